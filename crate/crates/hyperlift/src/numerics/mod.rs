//! Minimal dense-tensor substrate: f64 arrays with broadcasting, a
//! reverse-mode tape, batch normalization, parameters, Adam, and seeded RNG
//! streams. Everything else in the crate computes on top of this.

pub mod batchnorm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use batchnorm::{batchnorm, batchnorm_mut, BnState, BnUpdate, Mode};
pub use optim::{adam_step, grad_check, AdamParams, AdamState, GradCheckEntry, GradCheckReport};
pub use params::{ParamSet, Parameter};
pub use rng::{rand_uniform, randn, splitmix64, stream};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{broadcast_shape, NumericsError, Tensor};
