//! Attention-head pruning with a combined importance/entropy criterion.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` tensors and reverse-mode differentiation.
//! - [`transformer`]: a gated multi-head encoder that records per-head attention,
//!   outputs and output gradients.
//! - [`scoring`]: head importance (HIS), attention entropy (AE), min-max
//!   normalization and the HIES combination.
//! - [`pruning`]: budgeted head selection, risk, baselines and masked models.
//! - [`analysis`]: numerical checks of the loss-increase bound, curvature
//!   plug-ins, spectral norms, the entropy/total-variation inequality, the
//!   generalization-gap constant and the gradient orthogonality diagnostic.
//! - [`harness`]: synthetic tasks, sweeps and report export.

pub mod analysis;
pub mod error;
pub mod harness;
pub mod pruning;
pub mod scoring;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{LossKind, Tensor};
pub use transformer::{Example, GateVector, HeadId, HeadLayout, Model, ModelConfig};
