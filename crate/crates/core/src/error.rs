use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdoHmmError>;

#[derive(Debug, Error)]
pub enum OdoHmmError {
    /// Dimension mismatch between model components or inputs.
    #[error("structural error: {0}")]
    Structural(String),

    /// A scalar argument is outside its admissible range.
    #[error("range error: {0}")]
    Range(String),

    /// An observation symbol or index is out of bounds.
    #[error("input error: {0}")]
    Input(String),

    /// The circular mean is undefined (zero resultant vector).
    #[error("circular mean undefined: resultant vector is zero")]
    UndefinedMean,

    /// The sequence has zero likelihood under the model at the given step.
    #[error("sequence impossible under model at step {t}")]
    ImpossibleSequence { t: usize },

    /// Tag-based initialization needed more states than the model allows.
    #[error("tagging requires {needed} states but model has {available}; reduce N or provide more data")]
    StateOverflow { needed: usize, available: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A model/sequence/spec/plan file failed to parse.
    #[error("parse error: {0}")]
    Parse(String),
}
