//! Minimal reverse-mode autodiff engine over `ndarray`, sized for
//! desk-scale CPU training.
//!
//! The engine is generic over the element type so the same graph code
//! runs in `f32` for training and in `f64` for finite-difference
//! gradient verification. Tensors are unbatched (`CHW` layout); batch
//! handling is the caller's job (one tape per sample, gradients
//! accumulated in a fixed order so runs are bit-reproducible).

pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{GradAccum, PId, ParamGroup, ParamStore};
pub use tape::{Grads, Scalar, Tape, Var};
