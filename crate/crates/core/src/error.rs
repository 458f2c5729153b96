use thiserror::Error;

/// Errors produced anywhere in the policy stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    LayerWidth {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("forward cache is stale: network was modified after the forward pass")]
    StaleCache,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown suite `{name}`; known suites: {known}")]
    UnknownSuite { name: String, known: String },

    #[error("expert for task `{task}` produced only {produced} successful episodes in {attempts} attempts")]
    DemoGeneration {
        task: String,
        produced: usize,
        attempts: usize,
    },

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("environment fault at step {step}: {reason}")]
    EnvFault { step: usize, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            context: context.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}
