//! Minimal reverse-mode automatic differentiation for small sequence models.
//!
//! Everything is generic over [`Scalar`] so the same layers run in `f32` for
//! training and inference and in `f64` for finite-difference checking.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{Embedding, Gru, LayerNorm, Linear};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Tape, Var, MASKED_LOGIT};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Tape32<'p> = Tape<'p, f32>;
pub type Tape64<'p> = Tape<'p, f64>;
pub type Adam32 = AdamState<f32>;
