use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("row {index} has zero norm and cannot be normalized")]
    ZeroNorm { index: usize },
    #[error("need at least {needed} unlabeled features for one subgroup, got {got}")]
    TooFewUnlabeled { needed: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("degenerate batch: no anchor has a same-label partner")]
    DegenerateBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid hypergeometric bounds: pool {pool}, positives {positives}, draw {draw}")]
    PurityBounds { pool: u64, positives: u64, draw: u64 },
    #[error("fewer blocks ({blocks}) than requested splits ({splits})")]
    TooFewBlocks { blocks: usize, splits: usize },
    #[error("no positive tiles to upsample")]
    NoPositives,
    #[error("split carries no labels")]
    Unlabeled,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}
