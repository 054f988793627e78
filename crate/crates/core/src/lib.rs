//! Desk-scale laboratory for on-policy distillation objectives on exactly
//! solvable tabular autoregressive policies.
//!
//! The crate implements the full asymmetric on-policy distillation (AOPD)
//! objective family over order-m tabular softmax policies, where the teacher
//! is exactly known and reverse KL to it can be enumerated rather than
//! estimated. The pieces:
//!
//! - [`simplex`]: probability-simplex primitives and divergences over a
//!   finite vocabulary, including top-K support extraction.
//! - [`policy`]: tabular context-conditioned softmax policies acting as
//!   teachers and students, with sampling and SGD updates.
//! - [`objectives`]: token-level losses and analytic logit gradients for
//!   OPD, truncated forward KL, the JSD-beta family, and the masked AOPD
//!   combination.
//! - [`rollout`]: on-policy trajectory generation with per-position teacher
//!   annotation, plus the teacher-sampled SeqKD data path.
//! - [`trainer`]: the training loop, ablation grids, and the two-task
//!   continual-learning schedule.
//! - [`oracle`]: independent brute-force verifiers (finite differences,
//!   exact reverse KL by context enumeration, the constructed exploration
//!   black hole).
//! - [`verify`]: the release-gate property battery behind `aopd verify`.

pub mod error;
pub mod metrics;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rollout;
pub mod simplex;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use metrics::{AdvantageHistogram, RunMetrics};
pub use objectives::{
    FklVariant, MaskRule, ObjectiveConfig, ObjectiveKind, TokenLossGrad, TokenRecord,
};
pub use policy::{ContextKey, GradientTable, PolicyTable, Role, StudentMode};
pub use rollout::{Prompt, Trajectory, TrajectorySource};
pub use simplex::{LogitVector, ProbVector, SupportSet};
pub use trainer::{Seeds, TrainConfig, TrainOutcome};
