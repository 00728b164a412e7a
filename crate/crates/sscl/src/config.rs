//! Run configuration: built-in defaults, a TOML file on top, then
//! `key=value` overrides from the command line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use sscl_core::augment::AugmentPolicy;
use sscl_core::datagen::{SplitConfig, SynthConfig, TileOptions, Upsample};
use sscl_core::model::EncoderConfig;
use sscl_core::optim::Sgd;
use sscl_core::train::{LossMode, PretrainConfig};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds the synthetic region and, outside an ablation, training.
    pub seed: u64,
    pub data: DataConfig,
    pub model: EncoderConfig,
    pub augment: AugmentPolicy,
    pub pretrain: PretrainSection,
    pub probe: ProbeSection,
    pub baseline: BaselineSection,
    pub ablation: AblationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub tiling: TileOptions,
    pub split: SplitConfig,
    pub upsample: Upsample,
    /// Side the tiles are resized to when loaded.
    pub resize: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub unlabeled_batch: usize,
    pub positive_batch: usize,
    /// Keep a numbered checkpoint every this many epochs (0: only the
    /// rolling `last` and the `final` one).
    pub checkpoint_every: usize,
    pub loss: PretrainConfig,
}

/// Where probe features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tap {
    Backbone,
    Projector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub tap: Tap,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Training seeds; the dataset stays fixed by the top-level seed.
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

/// One row of the ablation: a pretraining loss mode followed by a linear
/// probe, or the end-to-end supervised baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Pretrained(Mode),
}

/// `LossMode` with an ordering, so arms sort in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Loss1,
    Loss2,
    Both,
}

impl From<Mode> for LossMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Loss1 => LossMode::Loss1,
            Mode::Loss2 => LossMode::Loss2,
            Mode::Both => LossMode::Both,
        }
    }
}

impl From<LossMode> for Mode {
    fn from(m: LossMode) -> Self {
        match m {
            LossMode::Loss1 => Mode::Loss1,
            LossMode::Loss2 => Mode::Loss2,
            LossMode::Both => Mode::Both,
        }
    }
}

impl Arm {
    pub const ALL: [Arm; 4] =
        [Arm::Baseline, Arm::Pretrained(Mode::Loss1), Arm::Pretrained(Mode::Loss2), Arm::Pretrained(Mode::Both)];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Pretrained(m) => LossMode::from(m).name(),
        }
    }

    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            Arm::Baseline => None,
            Arm::Pretrained(m) => Some(m.into()),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?} (expected baseline, loss1, loss2 or loss1+2)")))
    }
}

impl Serialize for Arm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Arm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: EncoderConfig::desk(),
            augment: AugmentPolicy::default(),
            pretrain: PretrainSection::default(),
            probe: ProbeSection::default(),
            baseline: BaselineSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            tiling: TileOptions::default(),
            split: SplitConfig::default(),
            upsample: Upsample::Factor(16),
            resize: 32,
        }
    }
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            unlabeled_batch: 128,
            positive_batch: 8,
            checkpoint_every: 0,
            loss: PretrainConfig::default(),
        }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            tap: Tap::Backbone,
            epochs: 50,
            batch_size: 32,
            optimizer: Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 },
        }
    }
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { epochs: 16, batch_size: 32, optimizer: Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 } }
    }
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3], arms: Arm::ALL.to_vec() }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Defaults, then `file` if given, then each `key=value` override in
    /// order. A named file that does not exist is `MissingConfig`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::default()).map_err(|e| invalid(e.to_string()))?;
        if let Some(path) = file {
            if !path.is_file() {
                return Err(Error::MissingConfig(path.to_path_buf()));
            }
            let text =
                std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
            let parsed: Self = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            value = toml::Value::try_from(parsed).map_err(|e| invalid(e.to_string()))?;
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.pretrain.loss.pseudo.validate()?;
        if self.data.tiling.tile != self.data.synth.tile {
            return Err(invalid("data.tiling.tile must equal data.synth.tile"));
        }
        if self.data.resize != self.model.input_side {
            return Err(invalid("data.resize must equal model.input_side"));
        }
        let p = &self.pretrain;
        if p.epochs == 0 || self.probe.epochs == 0 || self.baseline.epochs == 0 {
            return Err(invalid("epochs must be ≥ 1"));
        }
        if p.unlabeled_batch < 2 || p.positive_batch == 0 {
            return Err(invalid("pretrain batch sizes must be positive (unlabeled ≥ 2)"));
        }
        if p.unlabeled_batch < p.loss.pseudo.k {
            return Err(invalid(format!(
                "unlabeled batch {} is smaller than the subgroup size k = {}",
                p.unlabeled_batch, p.loss.pseudo.k
            )));
        }
        if p.loss.temperature.is_nan() || p.loss.temperature <= 0.0 {
            return Err(invalid("temperature must be positive"));
        }
        if self.probe.batch_size == 0 || self.baseline.batch_size == 0 {
            return Err(invalid("batch sizes must be positive"));
        }
        if self.ablation.seeds.is_empty() || self.ablation.arms.is_empty() {
            return Err(invalid("an ablation needs at least one seed and one arm"));
        }
        Ok(())
    }

    /// Hex SHA-256 over everything that shapes a trained model: the data,
    /// model, augmentation and optimization sections, the training seed and
    /// the arm. Probe and ablation settings are left out so that probing
    /// with new settings can reuse a checkpoint.
    pub fn fingerprint(&self, arm: Arm, train_seed: u64) -> String {
        #[derive(Serialize)]
        struct Shape<'a> {
            seed: u64,
            train_seed: u64,
            arm: Arm,
            data: &'a DataConfig,
            model: &'a EncoderConfig,
            augment: &'a AugmentPolicy,
            pretrain: Option<&'a PretrainSection>,
            baseline: Option<&'a BaselineSection>,
        }
        let shape = Shape {
            seed: self.seed,
            train_seed,
            arm,
            data: &self.data,
            model: &self.model,
            augment: &self.augment,
            pretrain: (arm != Arm::Baseline).then_some(&self.pretrain),
            baseline: (arm == Arm::Baseline).then_some(&self.baseline),
        };
        hex(&Sha256::digest(toml::to_string(&shape).expect("fingerprint serializes")))
    }

    /// Pretraining settings for one arm.
    pub fn pretrain_for(&self, mode: LossMode) -> PretrainConfig {
        PretrainConfig { mode, ..self.pretrain.loss }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets a dotted `key=value` path inside `root`. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise. Every table
/// on the path must exist; an unknown leaf is caught when the result is
/// deserialized.
pub fn apply_override(root: &mut toml::Value, text: &str) -> Result<()> {
    let (key, raw) = text.split_once('=').ok_or_else(|| invalid(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("malformed override key {key:?}")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (leaf, path) = parts.split_last().unwrap();
    let mut node = root;
    for p in path {
        node = node
            .get_mut(*p)
            .filter(|n| n.is_table())
            .ok_or_else(|| invalid(format!("override names unknown config key {key:?}")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| invalid(format!("override names unknown config key {key:?}")))?;
    table.insert(leaf.to_string(), value);
    Ok(())
}
