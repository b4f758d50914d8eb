//! Differentially private federated fine-tuning of low-rank adapters with a
//! gradient codec pretrained on a statistics-only random prior.
//!
//! The crate is organised bottom-up:
//!
//! * [`lora`] and [`matrix`]: factor types, norms and clipping.
//! * [`stats`]: per-cell streaming mean/std estimators shared by clients.
//! * [`codec`]: synthetic gradient sampling and autoencoder training.
//! * [`mechanism`]: clip, noise, aggregate and update.
//! * [`accountant`]: GDP and RDP privacy accounting.
//! * [`fed`]: the federated simulator on a toy task.
//!
//! Data-parallel work goes through [`exec::Execution`], which uses rayon when
//! the `parallel` feature is on and otherwise runs sequentially. Results are
//! identical either way.

pub mod accountant;
pub mod codec;
pub mod error;
pub mod exec;
pub mod fed;
pub mod json;
pub mod lora;
pub mod matrix;
pub mod mechanism;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use lora::{LoraGrad, Part};
pub use matrix::Matrix;
