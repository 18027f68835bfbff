//! 2D-to-3D human pose lifting.
//!
//! A diffusion sampler refines noisy 3D poses conditioned on 2D keypoints;
//! the denoiser is a graph convolution network that mixes joint-scale,
//! part-scale, and body-scale skeleton structure through normalized graph and
//! hypergraph kernels. The crate is self-contained: dense f64 tensors with
//! reverse-mode differentiation, training, sampling, evaluation metrics, a
//! synthetic data generator, and a command-line front end.

pub mod cli;
pub mod denoiser;
pub mod diffusion;
pub mod evaluation;
pub mod kernels;
pub mod numerics;
pub mod skeleton;
