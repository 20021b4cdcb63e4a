//! Offline design optimization by sampling from a jointly trained generative
//! model: a scalar weight network re-weights the offline data toward high
//! objective values while a score-based diffusion model learns the re-weighted
//! distribution; a deterministic probability-flow sampler then generates
//! candidate designs.
//!
//! The crate is organized as:
//! - [`tensor`] / [`tape`] / [`optim`]: a minimal f64 reverse-mode autodiff
//!   engine with Adam and finite-difference gradient checking,
//! - [`diffusion`]: variance-preserving noise schedule and the Monte Carlo
//!   denoising score matching loss,
//! - [`models`]: the weight network and the time-conditioned score network,
//! - [`objective`]: the joint training objective and its diagnostic report,
//! - [`training`]: the three-stage training procedure,
//! - [`sampler`]: the deterministic probability-flow sampler,
//! - [`toybench`]: a closed-form 2-D benchmark task,
//! - [`data_io`]: dataset ingestion, normalization, checkpoints, exports.

pub mod data_io;
pub mod diffusion;
pub mod error;
pub mod models;
pub mod objective;
pub mod optim;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod toybench;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
