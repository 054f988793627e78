//! Crate-wide error type.

use thiserror::Error;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Error type for all fallible operations in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A logit entry was NaN or infinite.
    #[error("logit {index} is not finite (value {value})")]
    NonFiniteLogit { index: usize, value: f64 },

    /// A probability vector violated nonnegativity or unit mass.
    #[error("invalid probability vector: {0}")]
    InvalidProbVector(String),

    /// KL divergence requested where the reference distribution has exact
    /// zero mass under the argument's support.
    #[error("absolute continuity violated: reference is zero at token {token} where the argument is positive")]
    AbsoluteContinuity { token: usize },

    /// A scalar parameter fell outside its legal range.
    #[error("{name} out of range: {message}")]
    OutOfRange { name: &'static str, message: String },

    /// The support set carries no probability mass.
    #[error("zero probability mass on the support set")]
    ZeroSupportMass,

    /// Teacher probability at the sampled token is exactly zero, so the
    /// advantage would be -inf. Callers wanting a diagnostic value should
    /// use the floored variant, which clips at 1e-12 and flags the token.
    #[error("teacher probability at sampled token {token} is exactly zero; use the 1e-12 floor for diagnostics")]
    ZeroTeacherProbability { token: usize },

    /// Student probability at the sampled token is zero; the token could not
    /// have been sampled from the stated distribution.
    #[error("student probability at sampled token {token} is zero")]
    ZeroStudentProbability { token: usize },

    /// A gradient entry was NaN or infinite.
    #[error("non-finite gradient for context {context}")]
    NonFiniteGradient { context: String },

    /// Two policies disagree on vocabulary size.
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },

    /// A table or gradient has an incompatible shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A trajectory carried no tokens.
    #[error("empty trajectory")]
    EmptyTrajectory,

    /// The training loss became NaN or infinite.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    /// Context enumeration would exceed the V^m cap.
    #[error("context enumeration V^m = {size} exceeds the 65536 cap")]
    EnumerationTooLarge { size: usize },

    /// Finite differencing hit a non-finite loss at a probe point.
    #[error("non-finite loss while probing coordinate {index} in finite differences")]
    NonFiniteProbe { index: usize },

    /// A run configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A serialized policy or record failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
