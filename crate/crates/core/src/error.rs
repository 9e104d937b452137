use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("class unsatisfiable: class {0} is not present in any training image")]
    ClassUnsatisfiable(u32),
    #[error("infeasible task: sampling exhausted a class after {restarts} restarts")]
    InfeasibleTask { restarts: usize },
    #[error("support and query overlap on image `{0}`")]
    SupportQueryOverlap(String),
    #[error("unknown image id `{0}`")]
    UnknownImage(String),
    #[error("failed to load sample: {0}")]
    Load(String),
    #[error("input {height}x{width} is not divisible by the patch size; use a multiple of {patch}")]
    IndivisibleResolution { height: usize, width: usize, patch: usize },
    #[error("requested {requested} taps but the encoder has {available} blocks")]
    TooManyTaps { requested: usize, available: usize },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("target selector matched no weight matrices")]
    EmptySelection,
    #[error("adapter already merged into `{0}`")]
    AlreadyMerged(String),
    #[error("model has no bias parameters")]
    NoBiases,
    #[error("total_steps must be positive")]
    ZeroSteps,
    #[error("ground truth has no labeled (non-ignore) pixels")]
    NoLabeledPixels,
    #[error("mIoU undefined: no class has a non-zero denominator")]
    UndefinedMiou,
    #[error("catalog mismatch between confusion matrices")]
    CatalogMismatch,
    #[error("at least {needed} values are required, got {got}")]
    InsufficientValues { needed: usize, got: usize },
    #[error("every grid run failed: {0:?}")]
    AllRunsFailed(Vec<String>),
}
