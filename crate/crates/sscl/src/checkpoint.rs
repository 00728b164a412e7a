//! Checkpoints: a binary blob of named little-endian arrays plus a TOML
//! sidecar with the epoch, config fingerprint and a metric snapshot.
//!
//! Blob layout: `SSCLCKPT`, `u32` version, `u32` array count, then per
//! array a `u16` name length, the name, a dtype byte (0 = f32, 1 = f64), a
//! `u64` element count and the elements.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sscl_core::model::{Classifier, SimSiam};
use sscl_core::nn::{Module, Param};
use sscl_core::probe::LinearProbe;
use sscl_core::train::Pretrainer;

use crate::config::hex;
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"SSCLCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub arm: String,
    pub epoch: u64,
    pub steps: u64,
    pub config_hash: String,
    /// SHA-256 of the blob.
    pub blob_sha256: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub arm: String,
    pub epoch: u64,
    pub steps: u64,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub arrays: Vec<(String, Array)>,
}

/// Sidecar path next to a blob: `x.ckpt` → `x.toml`.
pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

impl Checkpoint {
    pub fn new(arm: &str, config_hash: &str) -> Self {
        Self { arm: arm.into(), config_hash: config_hash.into(), ..Default::default() }
    }

    pub fn push_f32(&mut self, name: impl Into<String>, v: &[f32]) {
        self.arrays.push((name.into(), Array::F32(v.to_vec())));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, v: &[f64]) {
        self.arrays.push((name.into(), Array::F64(v.to_vec())));
    }

    fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Checkpoint { path: PathBuf::new(), reason: format!("missing array {name}") })
    }

    fn fill_f32(&self, name: &str, dst: &mut [f32]) -> Result<()> {
        match self.get(name)? {
            Array::F32(v) if v.len() == dst.len() => {
                dst.copy_from_slice(v);
                Ok(())
            }
            _ => Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: format!("array {name} has the wrong type or size"),
            }),
        }
    }

    fn fill_f64(&self, name: &str, dst: &mut [f64]) -> Result<()> {
        match self.get(name)? {
            Array::F64(v) if v.len() == dst.len() => {
                dst.copy_from_slice(v);
                Ok(())
            }
            _ => Err(Error::Checkpoint {
                path: PathBuf::new(),
                reason: format!("array {name} has the wrong type or size"),
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match a {
                Array::F32(v) => {
                    out.push(0);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                Array::F64(v) => {
                    out.push(1);
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        out
    }

    fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Array)>, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "array name is not UTF-8".to_string())?;
            let dtype = r.take(1)?[0];
            let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let a = match dtype {
                0 => Array::F32(
                    r.take(n.checked_mul(4).ok_or("size overflow")?)?
                        .chunks(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Array::F64(
                    r.take(n.checked_mul(8).ok_or("size overflow")?)?
                        .chunks(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(format!("unknown dtype {d}")),
            };
            arrays.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(arrays)
    }

    /// Writes the blob and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).at(dir)?;
        }
        let blob = self.encode();
        let meta = Meta {
            arm: self.arm.clone(),
            epoch: self.epoch,
            steps: self.steps,
            config_hash: self.config_hash.clone(),
            blob_sha256: hex(&Sha256::digest(&blob)),
            metrics: self.metrics.clone(),
        };
        fs::write(path, &blob).at(path)?;
        let side = sidecar(path);
        fs::write(&side, toml::to_string(&meta).expect("metadata serializes")).at(&side)
    }

    /// Reads a checkpoint, checking the blob digest and, when given, the
    /// config fingerprint.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let side = sidecar(path);
        let text = fs::read_to_string(&side).at(&side)?;
        let meta: Meta = toml::from_str(&text).map_err(|e| bad(format!("sidecar: {e}")))?;
        if let Some(h) = expected_hash {
            if h != meta.config_hash {
                return Err(Error::ConfigMismatch { expected: h.into(), found: meta.config_hash });
            }
        }
        let blob = fs::read(path).at(path)?;
        if hex(&Sha256::digest(&blob)) != meta.blob_sha256 {
            return Err(bad("blob does not match the digest in its sidecar".into()));
        }
        let arrays = Self::decode(&blob).map_err(bad)?;
        Ok(Self {
            arm: meta.arm,
            epoch: meta.epoch,
            steps: meta.steps,
            config_hash: meta.config_hash,
            metrics: meta.metrics,
            arrays,
        })
    }

    fn with_path(e: Error, path: &Path) -> Error {
        match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint { path: path.to_path_buf(), reason },
            e => e,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn push_module<M: Module<f32>>(ck: &mut Checkpoint, prefix: &str, m: &M) {
    for (i, p) in m.params().iter().enumerate() {
        ck.push_f32(format!("{prefix}.param.{i}"), &p.value);
        ck.push_f32(format!("{prefix}.momentum.{i}"), &p.momentum);
    }
    for (i, b) in m.buffers().iter().enumerate() {
        ck.push_f32(format!("{prefix}.buffer.{i}"), b);
    }
}

fn fill_module<M: Module<f32>>(ck: &Checkpoint, prefix: &str, m: &mut M) -> Result<()> {
    for (i, p) in m.params_mut().into_iter().enumerate() {
        ck.fill_f32(&format!("{prefix}.param.{i}"), &mut p.value)?;
        ck.fill_f32(&format!("{prefix}.momentum.{i}"), &mut p.momentum)?;
    }
    for (i, b) in m.buffers_mut().into_iter().enumerate() {
        ck.fill_f32(&format!("{prefix}.buffer.{i}"), b)?;
    }
    Ok(())
}

fn fill_param64(ck: &Checkpoint, name: &str, p: &mut Param<f64>) -> Result<()> {
    ck.fill_f64(name, &mut p.value)?;
    ck.fill_f64(&format!("{name}.momentum"), &mut p.momentum)
}

impl Checkpoint {
    pub fn from_pretrainer(t: &Pretrainer, arm: &str, hash: &str, epoch: u64) -> Self {
        let mut ck = Self::new(arm, hash);
        ck.epoch = epoch;
        ck.steps = t.steps;
        push_module(&mut ck, "model", &t.model);
        ck.push_f64("uncertainty", &t.uncertainty.value);
        ck.push_f64("uncertainty.momentum", &t.uncertainty.momentum);
        ck
    }

    /// Restores weights, optimizer state and step count into `t`, which
    /// must have been built from the same config.
    pub fn restore_pretrainer(&self, t: &mut Pretrainer, path: &Path) -> Result<()> {
        fill_module(self, "model", &mut t.model).map_err(|e| Self::with_path(e, path))?;
        fill_param64(self, "uncertainty", &mut t.uncertainty).map_err(|e| Self::with_path(e, path))?;
        t.steps = self.steps;
        Ok(())
    }

    pub fn restore_simsiam(&self, m: &mut SimSiam<f32>, path: &Path) -> Result<()> {
        fill_module(self, "model", m).map_err(|e| Self::with_path(e, path))
    }

    pub fn from_classifier(m: &Classifier<f32>, arm: &str, hash: &str, epoch: u64) -> Self {
        let mut ck = Self::new(arm, hash);
        ck.epoch = epoch;
        push_module(&mut ck, "classifier", m);
        ck
    }

    pub fn restore_classifier(&self, m: &mut Classifier<f32>, path: &Path) -> Result<()> {
        fill_module(self, "classifier", m).map_err(|e| Self::with_path(e, path))
    }

    pub fn from_probe(p: &LinearProbe, arm: &str, hash: &str, epoch: u64) -> Self {
        let mut ck = Self::new(arm, hash);
        ck.epoch = epoch;
        ck.push_f64("probe.mean", &p.mean);
        ck.push_f64("probe.inv_std", &p.inv_std);
        for (i, q) in p.layer.params().iter().enumerate() {
            ck.push_f64(format!("probe.param.{i}"), &q.value);
        }
        ck
    }

    /// Fills a probe created with the right feature dimension.
    pub fn restore_probe(&self, p: &mut LinearProbe, path: &Path) -> Result<()> {
        let r = (|| {
            self.fill_f64("probe.mean", &mut p.mean)?;
            self.fill_f64("probe.inv_std", &mut p.inv_std)?;
            for (i, q) in p.layer.params_mut().into_iter().enumerate() {
                self.fill_f64(&format!("probe.param.{i}"), &mut q.value)?;
            }
            Ok(())
        })();
        r.map_err(|e| Self::with_path(e, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_exact() {
        let mut ck = Checkpoint::new("loss1", "abc");
        ck.push_f32("a", &[1.5, -0.0, f32::MIN_POSITIVE]);
        ck.push_f64("b", &[std::f64::consts::PI]);
        let arrays = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(arrays, ck.arrays);
    }

    #[test]
    fn truncation_is_detected() {
        let mut ck = Checkpoint::new("loss1", "abc");
        ck.push_f32("a", &[1.0; 4]);
        let blob = ck.encode();
        assert!(Checkpoint::decode(&blob[..blob.len() - 1]).is_err());
        assert!(Checkpoint::decode(b"NOTACKPT").is_err());
    }
}
