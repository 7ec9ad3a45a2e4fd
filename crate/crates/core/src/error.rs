use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("line {line}: duplicate recipe_id {recipe_id}")]
    DuplicateRecipe { line: u64, recipe_id: u64 },

    #[error("line {line}: unknown category {token:?}")]
    UnknownCategory { line: u64, token: String },

    #[error("line {line}: rating {rating} outside 1..=5")]
    RatingRange { line: u64, rating: i64 },

    #[error("line {line}: unparseable timestamp {text:?}")]
    Timestamp { line: u64, text: String },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention over an empty support (every key is masked)")]
    EmptyAttention,

    #[error("user {user_id} has an empty history")]
    EmptyHistory { user_id: u64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("user {user_id}: only {available} candidate meals, {needed} required")]
    InsufficientCandidates {
        user_id: u64,
        available: usize,
        needed: usize,
    },

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
