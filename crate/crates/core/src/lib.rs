//! AM-SincNet: raw-waveform speaker identification with a learnable sinc
//! band-pass filter bank front end and an additive-margin softmax classifier
//! head, implemented from scratch in f64 with hand-written backward kernels.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndarr`] — dense tensor kernels (matmul, 1-D convolution, pooling,
//!   reductions) with explicit backward counterparts
//! - [`signal`] — WAV I/O, chunking, standardization, mel conversions and a
//!   deterministic synthetic speaker corpus
//! - [`sincbank`] — the learnable sinc filter bank and its analytic gradients
//! - [`network`] — layer norm, activations, conv/dense stacks, model assembly
//! - [`loss`] — additive-margin softmax and the plain softmax baseline
//! - [`optim`] — RMSprop
//! - [`trainer`] — training/eval harness, metrics, checkpoints, margin sweep
//! - [`gradcheck`] — finite-difference verification of every gradient path

pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod ndarr;
pub mod network;
pub mod optim;
pub mod signal;
pub mod sincbank;
pub mod trainer;

pub use error::{Error, Result};
pub use ndarr::Tensor;
