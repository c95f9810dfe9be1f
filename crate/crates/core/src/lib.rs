//! Masked autoregressive pretraining for hybrid Mamba-Transformer vision
//! backbones, runnable end to end on synthetic data at desk scale.
//!
//! The crate is organized along the pipeline: `tensor` (autodiff substrate),
//! `data` (patchification, targets, synthetic datasets, archives), `masking`
//! (mask plans and decoder visibility), `backbone` (hybrid encoder),
//! `objective` (decoder, masked loss, factorization checks), `trainer`
//! (optimizer, loops, checkpoints, ablation grids), and `config`/`cli`.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod masking;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{MapError, Result};
pub use tensor::{Real, Tensor};
