use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),
    #[error("target has {len} tokens but the predictor only has {slots} output slots")]
    TargetTooLong { len: usize, slots: usize },
    #[error("duplicate edit id `{0}`")]
    DuplicateEditId(String),
    #[error("explicit edit `{0}` cannot be used by a fine-tuning editor")]
    ExplicitEditUnsupported(String),
    #[error("memory was built with classifier {memory} but the active classifier is {active}")]
    StaleMemory { memory: String, active: String },
    #[error("insufficient candidate pool: need {needed}, have {available}")]
    InsufficientPool { needed: usize, available: usize },
    #[error("at least 3 topics are required for a train/val/test split, got {0}")]
    TooFewTopics(usize),
    #[error("no in-scope samples to evaluate")]
    NoInScopeSamples,
    #[error("missing pre-generated responses: {0}")]
    MissingResponses(String),
    #[error("invalid edit descriptor: {0}")]
    InvalidEdit(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}
