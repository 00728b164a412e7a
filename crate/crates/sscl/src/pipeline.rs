//! Experiment stages: data generation, splitting, upsampling, pretraining,
//! probing, the supervised baseline, evaluation and the four-arm ablation.
//!
//! Output root layout:
//!
//! ```text
//! data/raw/          all tiles, labels and structure placements
//! data/split/        tiles by split, manifest.csv, train_upsampled.csv
//! arms/<arm>/seed-<s>/
//!     config.toml train_log.csv purity.csv checkpoints/ probe.ckpt metrics.csv
//! metrics.csv summary.csv report.md config.toml     (ablation)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sscl_core::augment::{augment, two_views};
use sscl_core::datagen::{
    generate_synthetic_region, split_dataset, tile_region, upsample_minority, Label, Split, TileDataset,
};
use sscl_core::metrics::{Confusion, MetricsReport};
use sscl_core::model::{Classifier, SimSiam};
use sscl_core::nn::Mode as NnMode;
use sscl_core::probe::{train_probe, LinearProbe, ProbeConfig};
use sscl_core::rng;
use sscl_core::train::{supervised_step, LossMode, Pretrainer, StepBatch};
use sscl_core::Tensor;

use crate::checkpoint::Checkpoint;
use crate::config::{hex, Arm, RunConfig, Tap};
use crate::dataset::{read_manifest, write_manifest, write_png, DataSource, Images, Stage, MANIFEST, UPSAMPLED};
use crate::error::{Error, IoContext, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const PURITY_LOG: &str = "purity.csv";
pub const METRICS: &str = "metrics.csv";
pub const SUMMARY: &str = "summary.csv";
pub const REPORT: &str = "report.md";
pub const CONFIG_COPY: &str = "config.toml";

/// Rows per forward pass when extracting features or predicting.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn raw(&self) -> PathBuf {
        self.root.join("data").join("raw")
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("data").join("split")
    }

    pub fn arm(&self, arm: Arm, seed: u64) -> PathBuf {
        self.root.join("arms").join(arm.name()).join(format!("seed-{seed}"))
    }

    pub fn last_checkpoint(&self, arm: Arm, seed: u64) -> PathBuf {
        self.arm(arm, seed).join("checkpoints").join("last.ckpt")
    }

    pub fn final_checkpoint(&self, arm: Arm, seed: u64) -> PathBuf {
        self.arm(arm, seed).join("checkpoints").join("final.ckpt")
    }

    pub fn probe_checkpoint(&self, arm: Arm, seed: u64) -> PathBuf {
        self.arm(arm, seed).join("probe.ckpt")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).at(path)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    create_dir(dir)
}

// ---------------------------------------------------------------- data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub tiles: usize,
    pub positives: usize,
    pub defective: usize,
    pub structures: usize,
}

/// Renders the synthetic region and writes every tile to `data/raw`.
pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<DataSummary> {
    let region = generate_synthetic_region(&cfg.data.synth, cfg.seed)?;
    let tiles = tile_region(&region.raster, &region.mask, &cfg.data.tiling)?;
    let ds = tiles.dataset();
    let dir = layout.raw();
    fresh_dir(&dir)?;
    for (t, e) in tiles.tiles.iter().zip(&ds.entries) {
        write_png(&dir.join(&e.path), &t.pixels, tiles.tile)?;
    }
    write_manifest(&dir.join(MANIFEST), &ds)?;

    let path = dir.join("placements.csv");
    let mut w = csv::Writer::from_path(&path).at(&path)?;
    w.write_record(["tile_row", "tile_col", "x0", "y0", "x1", "y1", "mask_pixels"]).at(&path)?;
    for p in &region.placements {
        let (x0, y0, x1, y1) = p.bbox;
        let rec = [p.tile_row, p.tile_col, x0, y0, x1, y1, p.mask_pixels].map(|v| v.to_string());
        w.write_record(&rec).at(&path)?;
    }
    w.flush().at(&path)?;

    let summary = DataSummary {
        tiles: ds.len(),
        positives: ds.count(Label::Positive),
        defective: tiles.defective,
        structures: region.placements.len(),
    };
    write_text(&dir.join("summary.toml"), &toml::to_string(&summary).expect("summary serializes"))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub counts: BTreeMap<&'static str, (usize, usize)>,
}

/// Block-level split of `data/raw` into `data/split`, copying the tiles.
pub fn split(cfg: &RunConfig, layout: &Layout) -> Result<SplitSummary> {
    let raw = read_manifest(&layout.raw().join(MANIFEST))?;
    let parts = split_dataset(&raw, &cfg.data.split)?;
    let combined = parts.combined();
    let dir = layout.split();
    fresh_dir(&dir)?;
    let by_id: HashMap<&str, &str> = raw.entries.iter().map(|e| (e.tile_id.as_str(), e.path.as_str())).collect();
    for e in &combined.entries {
        let src = layout.raw().join(by_id[e.tile_id.as_str()]);
        let dst = dir.join(&e.path);
        if let Some(d) = dst.parent() {
            create_dir(d)?;
        }
        fs::copy(&src, &dst).at(&src)?;
    }
    write_manifest(&dir.join(MANIFEST), &combined)?;
    let mut counts = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test, Split::Unlabeled] {
        let d = parts.get(s);
        counts.insert(s.name(), (d.count(Label::Positive), d.len()));
    }
    Ok(SplitSummary { counts })
}

/// Writes `train_upsampled.csv` next to the split manifest.
pub fn upsample(cfg: &RunConfig, layout: &Layout) -> Result<(usize, usize)> {
    let dir = layout.split();
    let manifest = read_manifest(&dir.join(MANIFEST))?;
    let train = TileDataset { entries: manifest.entries.into_iter().filter(|e| e.split == Split::Train).collect() };
    let up = upsample_minority(&train, cfg.data.upsample)?;
    write_manifest(&dir.join(UPSAMPLED), &up)?;
    Ok((train.count(Label::Positive), up.count(Label::Positive)))
}

fn data_fingerprint(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct D<'a> {
        seed: u64,
        data: &'a crate::config::DataConfig,
    }
    use sha2::Digest;
    hex(&sha2::Sha256::digest(toml::to_string(&D { seed: cfg.seed, data: &cfg.data }).unwrap()))
}

/// Runs the three data stages unless `data/` already holds the dataset of
/// this config.
pub fn ensure_data(cfg: &RunConfig, layout: &Layout) -> Result<bool> {
    let stamp = layout.root.join("data").join("fingerprint");
    let want = data_fingerprint(cfg);
    if fs::read_to_string(&stamp).is_ok_and(|s| s.trim() == want) && layout.split().join(UPSAMPLED).exists() {
        return Ok(false);
    }
    gen_data(cfg, layout)?;
    split(cfg, layout)?;
    upsample(cfg, layout)?;
    write_text(&stamp, &format!("{want}\n"))?;
    Ok(true)
}

/// Ground truth of the unlabeled pool, for pseudo-label purity only.
fn unlabeled_truth(layout: &Layout, images: &Images) -> Result<Vec<bool>> {
    let raw = read_manifest(&layout.raw().join(MANIFEST))?;
    let truth: HashMap<&str, bool> =
        raw.entries.iter().map(|e| (e.tile_id.as_str(), e.label == Some(Label::Positive))).collect();
    images
        .ids
        .iter()
        .map(|id| {
            truth
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("tile {id} missing from raw manifest")))
        })
        .collect()
}

// ---------------------------------------------------------------- pretraining

/// Positive indices for a given step. The positive pool is walked in
/// shuffled passes independent of the unlabeled epochs, so the batch at any
/// step depends only on (seed, step).
struct PositiveCycle {
    pool: Vec<usize>,
    seed: u64,
    cycle: Option<(u64, Vec<usize>)>,
}

impl PositiveCycle {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self { pool, seed, cycle: None }
    }

    fn at(&mut self, pos: u64) -> usize {
        let n = self.pool.len() as u64;
        let c = pos / n;
        if self.cycle.as_ref().is_none_or(|(k, _)| *k != c) {
            let mut order = self.pool.clone();
            order.shuffle(&mut rng::substream(self.seed, 2_000_000 + c));
            self.cycle = Some((c, order));
        }
        self.cycle.as_ref().unwrap().1[(pos % n) as usize]
    }

    fn batch(&mut self, step: u64, size: usize) -> Vec<usize> {
        let start = step * size as u64;
        (start..start + size as u64).map(|p| self.at(p)).collect()
    }
}

fn stack(rows: impl IntoIterator<Item = Vec<f32>>, n: usize, side: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(n * side * side * 3);
    rows.into_iter().for_each(|r| data.extend(r));
    Tensor::from_vec(&[n, side, side, 3], data)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean cosine loss over the first and last epoch (siamese modes).
    pub cosine_first_epoch: Option<f64>,
    pub cosine_last_epoch: Option<f64>,
    pub pseudo_selected: u64,
    pub pseudo_positive: u64,
}

/// Keeps the log rows up to `steps` (plus the header) when resuming.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let text = fs::read_to_string(path).at(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
        if i == 0 || step.is_some_and(|s| s <= steps) {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).at(path)
}

fn open_log(path: &Path, header: &str, resume_steps: Option<u64>) -> Result<fs::File> {
    match resume_steps {
        Some(s) if path.exists() => {
            truncate_log(path, s)?;
            fs::OpenOptions::new().append(true).open(path).at(path)
        }
        _ => {
            let mut f = fs::File::create(path).at(path)?;
            writeln!(f, "{header}").at(path)?;
            Ok(f)
        }
    }
}

/// Semi-supervised pretraining of one arm. With `resume`, continues after
/// the epoch stored in `checkpoints/last.ckpt`.
pub fn pretrain(cfg: &RunConfig, layout: &Layout, mode: LossMode, seed: u64, resume: bool) -> Result<PretrainSummary> {
    let arm = Arm::Pretrained(mode.into());
    let hash = cfg.fingerprint(arm, seed);
    let dir = layout.arm(arm, seed);
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_COPY), &cfg.to_toml())?;

    let src = DataSource::open(&layout.split(), cfg.data.resize)?;
    let unl = src.images(Split::Unlabeled, false, Stage::Pretrain)?;
    let truth = unlabeled_truth(layout, &unl)?;
    let p = &cfg.pretrain;
    if unl.len() < p.unlabeled_batch {
        return Err(Error::Core(sscl_core::Error::TooFewUnlabeled { needed: p.unlabeled_batch, got: unl.len() }));
    }
    let labeled = src.images(Split::Train, true, Stage::Pretrain)?;
    let pos_pool = labeled.positives();
    if mode.uses_supervised() && pos_pool.len() < p.positive_batch {
        return Err(Error::Invalid(format!(
            "{} labeled positives cannot fill a positive batch of {}; run `sscl upsample` first or lower pretrain.positive_batch",
            pos_pool.len(),
            p.positive_batch
        )));
    }

    let model = SimSiam::new(cfg.model.clone(), &mut rng::substream(seed, 0))?;
    let mut trainer = Pretrainer::new(model, cfg.pretrain_for(mode));
    let last = layout.last_checkpoint(arm, seed);
    let mut start = 1;
    let mut resumed = None;
    if resume && last.exists() {
        let ck = Checkpoint::load(&last, Some(&hash))?;
        ck.restore_pretrainer(&mut trainer, &last)?;
        start = ck.epoch + 1;
        resumed = Some(ck.steps);
    }
    let mut log = open_log(&dir.join(TRAIN_LOG), "step,loss_cosine,loss_super,loss_total,v1,v2", resumed)?;
    let mut purity = open_log(&dir.join(PURITY_LOG), "step,anchor,selected,positives", resumed)?;
    let log_path = dir.join(TRAIN_LOG);
    let purity_path = dir.join(PURITY_LOG);

    let side = cfg.data.resize;
    let b = p.unlabeled_batch;
    let per_epoch = unl.len() / b;
    let mut positives = PositiveCycle::new(pos_pool, seed);
    let mut summary = PretrainSummary {
        steps: trainer.steps,
        first_loss: f64::NAN,
        last_loss: f64::NAN,
        cosine_first_epoch: None,
        cosine_last_epoch: None,
        pseudo_selected: 0,
        pseudo_positive: 0,
    };
    for epoch in start..=p.epochs as u64 {
        // each epoch's order depends only on (seed, epoch) so a resumed run matches
        let mut r = rng::substream(seed, 1000 + epoch);
        let mut order: Vec<usize> = (0..unl.len()).collect();
        order.shuffle(&mut r);
        let mut cosine = Vec::new();
        for batch in order.chunks_exact(b).take(per_epoch) {
            let (view1, view2) = if mode.uses_siamese() {
                let (a, c): (Vec<_>, Vec<_>) =
                    batch.iter().map(|&i| two_views(unl.image(i), side, &cfg.augment, &mut r)).unzip();
                (stack(a, b, side), Some(stack(c, b, side)))
            } else {
                (stack(batch.iter().map(|&i| augment(unl.image(i), side, &cfg.augment, &mut r)), b, side), None)
            };
            let (pos, pos2) = if !mode.uses_supervised() {
                (None, None)
            } else {
                let idx = positives.batch(trainer.steps, p.positive_batch);
                let k = idx.len();
                if p.loss.cosine_on_positives && mode.uses_siamese() {
                    let (a, c): (Vec<_>, Vec<_>) =
                        idx.iter().map(|&i| two_views(labeled.image(i), side, &cfg.augment, &mut r)).unzip();
                    (Some(stack(a, k, side)), Some(stack(c, k, side)))
                } else {
                    (
                        Some(stack(
                            idx.iter().map(|&i| augment(labeled.image(i), side, &cfg.augment, &mut r)),
                            k,
                            side,
                        )),
                        None,
                    )
                }
            };
            let step = StepBatch {
                view1: &view1,
                view2: view2.as_ref(),
                positives: pos.as_ref(),
                positives_view2: pos2.as_ref(),
                sources: batch,
            };
            let out = trainer.step(&step, &mut r)?;
            let rep = out.report;
            writeln!(
                log,
                "{},{},{},{},{},{}",
                rep.step,
                opt(rep.loss_cosine),
                opt(rep.loss_super),
                rep.loss_total,
                rep.weights.v1,
                rep.weights.v2
            )
            .at(&log_path)?;
            if let Some(set) = out.pseudo {
                let hits = set.source.iter().filter(|&&s| truth[s]).count() as u64;
                writeln!(purity, "{},{},{},{}", rep.step, set.anchor, set.len(), hits).at(&purity_path)?;
                summary.pseudo_selected += set.len() as u64;
                summary.pseudo_positive += hits;
            }
            if summary.first_loss.is_nan() {
                summary.first_loss = rep.loss_total;
            }
            summary.last_loss = rep.loss_total;
            cosine.extend(rep.loss_cosine);
        }
        let mean = (!cosine.is_empty()).then(|| cosine.iter().sum::<f64>() / cosine.len() as f64);
        if epoch == start {
            summary.cosine_first_epoch = mean;
        }
        summary.cosine_last_epoch = mean;

        let mut ck = Checkpoint::from_pretrainer(&trainer, arm.name(), &hash, epoch);
        ck.metrics.insert("loss_total".into(), summary.last_loss);
        if let Some(m) = mean {
            ck.metrics.insert("loss_cosine_epoch_mean".into(), m);
        }
        ck.save(&last)?;
        if p.checkpoint_every > 0 && epoch % p.checkpoint_every as u64 == 0 {
            ck.save(&dir.join("checkpoints").join(format!("epoch-{epoch:04}.ckpt")))?;
        }
        eprintln!(
            "[{arm} seed {seed}] epoch {epoch}/{}: step {} loss {:.4}{}",
            p.epochs,
            trainer.steps,
            summary.last_loss,
            mean.map(|m| format!(" cosine {m:.4}")).unwrap_or_default()
        );
    }
    log.flush().at(&log_path)?;
    purity.flush().at(&purity_path)?;
    let mut ck = Checkpoint::from_pretrainer(&trainer, arm.name(), &hash, p.epochs as u64);
    if summary.pseudo_selected > 0 {
        ck.metrics.insert(
            "pseudo_negative_purity".into(),
            1.0 - summary.pseudo_positive as f64 / summary.pseudo_selected as f64,
        );
    }
    ck.save(&layout.final_checkpoint(arm, seed))?;
    summary.steps = trainer.steps;
    src.audit().check()?;
    Ok(summary)
}

/// Loads the final pretrained model of an arm.
pub fn load_pretrained(cfg: &RunConfig, layout: &Layout, arm: Arm, seed: u64) -> Result<SimSiam<f32>> {
    let path = layout.final_checkpoint(arm, seed);
    let ck = Checkpoint::load(&path, Some(&cfg.fingerprint(arm, seed)))?;
    let mut model = SimSiam::new(cfg.model.clone(), &mut rng::seeded(0))?;
    ck.restore_simsiam(&mut model, &path)?;
    Ok(model)
}

/// Eval-mode features of every image, from the configured tap.
pub fn extract_features(model: &mut SimSiam<f32>, images: &Images, tap: Tap) -> Result<Tensor<f64>> {
    let mut rows = Vec::new();
    let mut dim = 0;
    let all: Vec<usize> = (0..images.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x = images.batch(chunk);
        let f = match tap {
            Tap::Backbone => model.encode_backbone(&x)?,
            Tap::Projector => model.encode_features(&x)?,
        };
        dim = f.cols();
        rows.extend(f.data().iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(&[images.len(), dim], rows))
}

// ---------------------------------------------------------------- probing

fn write_history(path: &Path, arm: Arm, seed: u64, history: &[MetricsReport]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for h in history {
        w.row(arm, seed, h)?;
    }
    w.finish()
}

/// Trains the linear probe on frozen features of an arm's final model and
/// stores it as `probe.ckpt`; returns the selected validation report.
pub fn probe(cfg: &RunConfig, layout: &Layout, arm: Arm, seed: u64) -> Result<MetricsReport> {
    if arm == Arm::Baseline {
        return Err(Error::Invalid("the baseline arm has no probe; it is trained end to end".into()));
    }
    let mut model = load_pretrained(cfg, layout, arm, seed)?;
    let src = DataSource::open(&layout.split(), cfg.data.resize)?;
    let train = src.images(Split::Train, true, Stage::Probe)?;
    let val = src.images(Split::Val, false, Stage::Probe)?;
    let tx = extract_features(&mut model, &train, cfg.probe.tap)?;
    let vx = extract_features(&mut model, &val, cfg.probe.tap)?;
    let pc = ProbeConfig {
        epochs: cfg.probe.epochs,
        batch_size: cfg.probe.batch_size,
        optimizer: cfg.probe.optimizer,
        seed,
    };
    let out = train_probe(&tx, &train.targets()?, &vx, &val.targets()?, &pc)?;
    let dir = layout.arm(arm, seed);
    write_history(&dir.join("probe_history.csv"), arm, seed, &out.history)?;
    let mut ck = Checkpoint::from_probe(&out.probe, arm.name(), &cfg.fingerprint(arm, seed), out.best_epoch);
    ck.metrics.insert("val_balanced_accuracy".into(), out.best.balanced_accuracy);
    ck.metrics.insert("val_macro_f1".into(), out.best.macro_f1);
    ck.save(&layout.probe_checkpoint(arm, seed))?;
    src.audit().check()?;
    Ok(out.best)
}

// ---------------------------------------------------------------- baseline

fn classify(model: &mut Classifier<f32>, images: &Images) -> Vec<bool> {
    let all: Vec<usize> = (0..images.len()).collect();
    let mut pred = Vec::with_capacity(images.len());
    for chunk in all.chunks(EVAL_CHUNK) {
        let out = model.forward(&images.batch(chunk), NnMode::Eval);
        pred.extend((0..out.logits.rows()).map(|i| out.logits.row(i)[1] > out.logits.row(i)[0]));
    }
    pred
}

fn report(split: Split, epoch: u64, truth: &[bool], pred: &[bool]) -> MetricsReport {
    MetricsReport::new(split, epoch, Confusion::from_pairs(truth.iter().copied().zip(pred.iter().copied())))
}

/// End-to-end cross-entropy training on the labeled (upsampled) train split,
/// keeping the epoch with the best validation metrics.
pub fn baseline(cfg: &RunConfig, layout: &Layout, seed: u64) -> Result<MetricsReport> {
    let arm = Arm::Baseline;
    let dir = layout.arm(arm, seed);
    create_dir(&dir)?;
    write_text(&dir.join(CONFIG_COPY), &cfg.to_toml())?;
    let src = DataSource::open(&layout.split(), cfg.data.resize)?;
    let train = src.images(Split::Train, true, Stage::Baseline)?;
    let val = src.images(Split::Val, false, Stage::Baseline)?;
    let (ty, vy) = (train.targets()?, val.targets()?);
    let side = cfg.data.resize;
    let mut model = Classifier::new(cfg.model.clone(), &mut rng::substream(seed, 0))?;
    let mut best: Option<(Classifier<f32>, MetricsReport)> = None;
    let mut history = Vec::new();
    let log_path = dir.join("baseline_log.csv");
    let mut log = fs::File::create(&log_path).at(&log_path)?;
    writeln!(log, "epoch,loss,val_macro_f1,val_balanced_accuracy").at(&log_path)?;
    for epoch in 1..=cfg.baseline.epochs as u64 {
        let mut r = rng::substream(seed, 3000 + epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut r);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.baseline.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics need two rows
            }
            let x =
                stack(chunk.iter().map(|&i| augment(train.image(i), side, &cfg.augment, &mut r)), chunk.len(), side);
            let y: Vec<bool> = chunk.iter().map(|&i| ty[i]).collect();
            losses.push(supervised_step(&mut model, &x, &y, &cfg.baseline.optimizer)?);
        }
        let rep = report(Split::Val, epoch, &vy, &classify(&mut model, &val));
        let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        writeln!(log, "{epoch},{mean},{},{}", rep.macro_f1, rep.balanced_accuracy).at(&log_path)?;
        history.push(rep);
        if best.as_ref().is_none_or(|(_, b)| rep.selection_cmp(b).is_gt()) {
            best = Some((model.clone(), rep));
        }
        eprintln!(
            "[baseline seed {seed}] epoch {epoch}/{}: loss {mean:.4} val BA {:.4}",
            cfg.baseline.epochs, rep.balanced_accuracy
        );
    }
    log.flush().at(&log_path)?;
    write_history(&dir.join("probe_history.csv"), arm, seed, &history)?;
    let (model, rep) = best.unwrap();
    let mut ck = Checkpoint::from_classifier(&model, arm.name(), &cfg.fingerprint(arm, seed), rep.epoch);
    ck.metrics.insert("val_balanced_accuracy".into(), rep.balanced_accuracy);
    ck.metrics.insert("val_macro_f1".into(), rep.macro_f1);
    ck.save(&layout.final_checkpoint(arm, seed))?;
    src.audit().check()?;
    Ok(rep)
}

// ---------------------------------------------------------------- evaluation

/// Validation and test reports of a finished arm, also written to the arm's
/// `metrics.csv`.
pub fn evaluate(cfg: &RunConfig, layout: &Layout, arm: Arm, seed: u64) -> Result<[MetricsReport; 2]> {
    let src = DataSource::open(&layout.split(), cfg.data.resize)?;
    let hash = cfg.fingerprint(arm, seed);
    let reports = match arm {
        Arm::Baseline => {
            let path = layout.final_checkpoint(arm, seed);
            let ck = Checkpoint::load(&path, Some(&hash))?;
            let mut model = Classifier::new(cfg.model.clone(), &mut rng::seeded(0))?;
            ck.restore_classifier(&mut model, &path)?;
            [Split::Val, Split::Test].map(|s| -> Result<MetricsReport> {
                let imgs = src.images(s, false, Stage::Evaluate)?;
                Ok(report(s, ck.epoch, &imgs.targets()?, &classify(&mut model, &imgs)))
            })
        }
        Arm::Pretrained(_) => {
            let mut model = load_pretrained(cfg, layout, arm, seed)?;
            let path = layout.probe_checkpoint(arm, seed);
            let ck = Checkpoint::load(&path, Some(&hash))?;
            let dim = match cfg.probe.tap {
                Tap::Backbone => cfg.model.backbone_dim(),
                Tap::Projector => cfg.model.feature_dim,
            };
            let mut probe = LinearProbe::new(&Tensor::zeros(&[1, dim]), 0);
            ck.restore_probe(&mut probe, &path)?;
            [Split::Val, Split::Test].map(|s| -> Result<MetricsReport> {
                let imgs = src.images(s, false, Stage::Evaluate)?;
                let x = extract_features(&mut model, &imgs, cfg.probe.tap)?;
                Ok(probe.evaluate(&x, &imgs.targets()?, s, ck.epoch))
            })
        }
    };
    let [val, test] = reports;
    let reports = [val?, test?];
    let mut w = MetricsWriter::create(&layout.arm(arm, seed).join(METRICS))?;
    for r in &reports {
        w.row(arm, seed, r)?;
    }
    w.finish()?;
    src.audit().check()?;
    Ok(reports)
}

// ---------------------------------------------------------------- metrics files

pub const METRICS_HEADER: [&str; 10] =
    ["arm", "split", "epoch", "tp", "fp", "tn", "fn", "macro_f1", "balanced_accuracy", "seed"];

pub struct MetricsWriter {
    path: PathBuf,
    w: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            create_dir(d)?;
        }
        let mut w = csv::Writer::from_path(path).at(path)?;
        w.write_record(METRICS_HEADER).at(path)?;
        Ok(Self { path: path.to_path_buf(), w })
    }

    pub fn row(&mut self, arm: Arm, seed: u64, r: &MetricsReport) -> Result<()> {
        let c = r.confusion;
        let rec = [
            arm.name().to_string(),
            r.split.name().to_string(),
            r.epoch.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            r.macro_f1.to_string(),
            r.balanced_accuracy.to_string(),
            seed.to_string(),
        ];
        self.w.write_record(&rec).at(&self.path)
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().at(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub arm: String,
    pub split: String,
    pub epoch: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.is_file() {
        return Err(Error::Invalid(format!("{} not found; run `sscl ablate` (or `sscl eval`) first", path.display())));
    }
    let mut r = csv::Reader::from_path(path).at(path)?;
    r.deserialize().map(|row| row.at(path)).collect()
}

// ---------------------------------------------------------------- ablation

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub sd_balanced_accuracy: f64,
    pub rank: usize,
}

/// Mean test metrics per arm, ranked by balanced accuracy.
pub fn summarize(rows: &[MetricsRow]) -> Vec<ArmSummary> {
    let mut by_arm: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == Split::Test.name()) {
        by_arm.entry(r.arm.as_str()).or_default().push(r);
    }
    let mut out: Vec<ArmSummary> = by_arm
        .into_iter()
        .map(|(arm, rs)| {
            let n = rs.len() as f64;
            let ba = rs.iter().map(|r| r.balanced_accuracy).sum::<f64>() / n;
            let var = if rs.len() > 1 {
                rs.iter().map(|r| (r.balanced_accuracy - ba).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            ArmSummary {
                arm: arm.to_string(),
                seeds: rs.len(),
                macro_f1: rs.iter().map(|r| r.macro_f1).sum::<f64>() / n,
                balanced_accuracy: ba,
                sd_balanced_accuracy: var.sqrt(),
                rank: 0,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| out[b].balanced_accuracy.total_cmp(&out[a].balanced_accuracy).then(a.cmp(&b)));
    for (rank, i) in order.into_iter().enumerate() {
        out[i].rank = rank + 1;
    }
    out.sort_by_key(|s| s.arm.parse::<Arm>().ok());
    out
}

pub fn write_summary(path: &Path, summary: &[ArmSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(["arm", "seeds", "macro_f1", "balanced_accuracy", "sd_balanced_accuracy", "rank"]).at(path)?;
    for s in summary {
        let rec = [
            s.arm.clone(),
            s.seeds.to_string(),
            s.macro_f1.to_string(),
            s.balanced_accuracy.to_string(),
            s.sd_balanced_accuracy.to_string(),
            s.rank.to_string(),
        ];
        w.write_record(&rec).at(path)?;
    }
    w.flush().at(path)
}

/// Trains, probes and evaluates one arm.
pub fn run_arm(cfg: &RunConfig, layout: &Layout, arm: Arm, seed: u64, resume: bool) -> Result<[MetricsReport; 2]> {
    match arm {
        Arm::Baseline => {
            baseline(cfg, layout, seed)?;
        }
        Arm::Pretrained(m) => {
            pretrain(cfg, layout, m.into(), seed, resume)?;
            probe(cfg, layout, arm, seed)?;
        }
    }
    evaluate(cfg, layout, arm, seed)
}

/// Every configured arm under every training seed on one dataset; writes
/// `metrics.csv`, `summary.csv`, `report.md` and a config copy at the root.
pub fn run_ablation(cfg: &RunConfig, layout: &Layout, resume: bool) -> Result<Vec<ArmSummary>> {
    ensure_data(cfg, layout)?;
    write_text(&layout.root.join(CONFIG_COPY), &cfg.to_toml())?;
    let mut rows = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for &arm in &cfg.ablation.arms {
            let reports = run_arm(cfg, layout, arm, seed, resume)?;
            eprintln!(
                "[{arm} seed {seed}] test BA {:.4} macro F1 {:.4}",
                reports[1].balanced_accuracy, reports[1].macro_f1
            );
            rows.push((arm, seed, reports));
        }
    }
    let path = layout.root.join(METRICS);
    let mut w = MetricsWriter::create(&path)?;
    for (arm, seed, reports) in &rows {
        for r in reports {
            w.row(*arm, *seed, r)?;
        }
    }
    w.finish()?;
    let summary = summarize(&read_metrics(&path)?);
    write_summary(&layout.root.join(SUMMARY), &summary)?;
    write_text(&layout.root.join(REPORT), &crate::report::render(&layout.root)?)?;
    Ok(summary)
}
