//! Manifest files, PNG tiles, and cached batch loading with an access audit.
//!
//! A dataset directory holds `manifest.csv` plus one PNG per tile under a
//! subdirectory named after its split. Manifest paths are relative to the
//! directory, so a dataset can be moved or hashed as a unit.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sscl_core::datagen::{Label, ManifestEntry, Split, TileDataset};
use sscl_core::image::{resize_bilinear, to_unit};
use sscl_core::Tensor;

use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.csv";
/// Training manifest after minority upsampling, next to `manifest.csv`.
pub const UPSAMPLED: &str = "train_upsampled.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    tile_id: String,
    path: String,
    block_id: u32,
    label: String,
    split: String,
}

pub fn write_manifest(path: &Path, ds: &TileDataset) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let mut w = csv::Writer::from_path(path).at(path)?;
    for e in &ds.entries {
        w.serialize(Row {
            tile_id: e.tile_id.clone(),
            path: e.path.clone(),
            block_id: e.block_id,
            label: e.label.map_or("-", Label::code).to_string(),
            split: e.split.name().to_string(),
        })
        .at(path)?;
    }
    w.flush().at(path)
}

pub fn read_manifest(path: &Path) -> Result<TileDataset> {
    let mut r = csv::Reader::from_path(path).at(path)?;
    let bad = |reason: String| Error::Manifest { path: path.to_path_buf(), reason };
    let mut entries = Vec::new();
    for row in r.deserialize::<Row>() {
        let row = row.at(path)?;
        let label = match row.label.as_str() {
            "pos" => Some(Label::Positive),
            "neg" => Some(Label::Negative),
            "-" => None,
            other => return Err(bad(format!("unknown label {other:?} for {}", row.tile_id))),
        };
        let split = Split::parse(&row.split).ok_or_else(|| bad(format!("unknown split {:?}", row.split)))?;
        entries.push(ManifestEntry { tile_id: row.tile_id, path: row.path, block_id: row.block_id, label, split });
    }
    Ok(TileDataset { entries })
}

pub fn write_png(path: &Path, pixels: &[u8], side: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    image::save_buffer(path, pixels, side as u32, side as u32, image::ExtendedColorType::Rgb8).at(path)
}

/// Square RGB8 tile and its side.
pub fn read_png(path: &Path) -> Result<(Vec<u8>, usize)> {
    let img = image::open(path).at(path)?.into_rgb8();
    if img.width() != img.height() {
        return Err(Error::Manifest { path: path.to_path_buf(), reason: "tile is not square".into() });
    }
    let side = img.width() as usize;
    Ok((img.into_raw(), side))
}

/// Tile pixels as `[0, 1]` floats, bilinearly resized to `resize`.
pub fn tile_to_unit(pixels: &[u8], side: usize, resize: usize) -> Vec<f32> {
    resize_bilinear(&to_unit(pixels), side, side, 3, resize, resize)
}

/// Reads `indices` of `ds` from disk into an `N×resize×resize×3` batch.
pub fn load_batch(root: &Path, ds: &TileDataset, indices: &[usize], resize: usize) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(indices.len() * resize * resize * 3);
    for &i in indices {
        let e = ds.entries.get(i).ok_or_else(|| Error::Invalid(format!("tile index {i} out of range")))?;
        let (px, side) = read_png(&root.join(&e.path))?;
        data.extend(tile_to_unit(&px, side, resize));
    }
    Ok(Tensor::from_vec(&[indices.len(), resize, resize, 3], data))
}

/// Pipeline phase, for the access audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Pretrain,
    Probe,
    Baseline,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretraining",
            Stage::Probe => "probing",
            Stage::Baseline => "baseline training",
            Stage::Evaluate => "evaluation",
        }
    }
}

/// Which splits each stage touched. Only evaluation may read the test
/// split.
#[derive(Debug, Default)]
pub struct Audit {
    reads: Mutex<BTreeMap<(Stage, Split), usize>>,
}

impl Audit {
    pub fn record(&self, stage: Stage, split: Split) {
        *self.reads.lock().unwrap().entry((stage, split)).or_default() += 1;
    }

    pub fn reads(&self) -> BTreeMap<(Stage, Split), usize> {
        self.reads.lock().unwrap().clone()
    }

    pub fn check(&self) -> Result<()> {
        match self.reads().keys().find(|(stage, split)| *split == Split::Test && *stage != Stage::Evaluate) {
            Some((stage, _)) => Err(Error::Leak { split: "test", stage: stage.name() }),
            None => Ok(()),
        }
    }
}

/// Decoded tiles of one manifest slice, stored contiguously.
#[derive(Clone, Debug)]
pub struct Images {
    pub side: usize,
    data: Vec<f32>,
    pub labels: Vec<Option<bool>>,
    pub ids: Vec<String>,
}

impl Images {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.side * self.side * 3
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.data[i * self.stride()..(i + 1) * self.stride()]
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.stride());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::from_vec(&[indices.len(), self.side, self.side, 3], data)
    }

    /// Labels of a labeled slice.
    pub fn targets(&self) -> Result<Vec<bool>> {
        self.labels.iter().map(|l| l.ok_or(Error::Core(sscl_core::Error::Unlabeled))).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == Some(true)).collect()
    }
}

/// A split dataset directory with lazily decoded, cached splits.
pub struct DataSource {
    pub root: PathBuf,
    pub manifest: TileDataset,
    pub upsampled: Option<TileDataset>,
    pub resize: usize,
    audit: Audit,
    cache: RefCell<BTreeMap<(Split, bool), Rc<Images>>>,
}

impl DataSource {
    pub fn open(root: &Path, resize: usize) -> Result<Self> {
        let manifest = read_manifest(&root.join(MANIFEST))?;
        let up = root.join(UPSAMPLED);
        let upsampled = if up.exists() { Some(read_manifest(&up)?) } else { None };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            upsampled,
            resize,
            audit: Audit::default(),
            cache: RefCell::default(),
        })
    }

    pub fn audit(&self) -> &Audit {
        &self.audit
    }

    pub fn entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.manifest.entries.iter().filter(|e| e.split == split).collect()
    }

    /// The split's tiles; for `Train` with `upsampled`, the upsampled
    /// manifest when one exists.
    pub fn images(&self, split: Split, upsampled: bool, stage: Stage) -> Result<Rc<Images>> {
        self.audit.record(stage, split);
        let key = (split, upsampled && split == Split::Train && self.upsampled.is_some());
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let entries: Vec<&ManifestEntry> = match (key.1, &self.upsampled) {
            (true, Some(up)) => up.entries.iter().collect(),
            _ => self.entries(split),
        };
        let mut decoded: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
        let mut images = Images { side: self.resize, data: Vec::new(), labels: Vec::new(), ids: Vec::new() };
        for e in entries {
            if !decoded.contains_key(e.path.as_str()) {
                let (px, side) = read_png(&self.root.join(&e.path))?;
                decoded.insert(&e.path, tile_to_unit(&px, side, self.resize));
            }
            images.data.extend_from_slice(&decoded[e.path.as_str()]);
            images.labels.push(e.label.map(Label::is_positive));
            images.ids.push(e.tile_id.clone());
        }
        let images = Rc::new(images);
        self.cache.borrow_mut().insert(key, images.clone());
        Ok(images)
    }
}
