use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no valid columns")]
    DegenerateRow { row: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f64 },

    #[error("example {index} has effective length {len}; entropy normalization needs at least 2")]
    Length { index: usize, len: usize },

    #[error("invalid score: {0}")]
    Score(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("budget k = {k} outside [0, {total}]")]
    Budget { k: usize, total: usize },

    #[error("head index mismatch: {0}")]
    Index(String),

    #[error("degenerate alignment: g = min_h E[|cos| ||grad||] is zero")]
    DegenerateAlignment,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
