//! Dense `f64` tensors, reverse-mode autodiff, the optimizer, a counter-based
//! RNG and the finite-difference gradient oracle.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use graph::{AttentionMask, AttnShape, BatchMask, Gradients, Graph, Var};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
pub use params::ParamStore;
pub use rng::RngState;
pub use tensor::Tensor;
