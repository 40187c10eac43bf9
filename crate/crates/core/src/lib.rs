//! Hybrid quantum-classical normalizing flows (HQCNF) for small, sparse
//! detector images.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: define-by-run reverse-mode differentiation over dense `f64` tensors.
//! - [`qsim`]: statevector simulator with amplitude embedding and the two ansatz layouts.
//! - [`flow`]: affine couplings, quantum orthogonal blocks, and the composed [`flow::FlowModel`].
//! - [`training`]: composite loss, KL regularisation, Adam, and the epoch loop.
//! - [`metrics`]: FID, mode-collapse score, entropy, box-counting dimension, PCA.
//! - [`data`]: synthetic track/shower images, brightest-pixel crops, preprocessing, I/O.
//! - [`cli`]: the `hqcnf` command-line front end and experiment sweeps.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod qsim;
pub mod training;

pub use error::{Error, Result};
