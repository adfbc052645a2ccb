//! Quantization-aware training in which the bitlength of every weight and
//! activation group is a learned, regularized parameter.
//!
//! The crate contains a small reverse-mode autodiff engine, the fractional
//! fake quantizer, the bit-loss regularizer, reference MLP/CNN models, the
//! learn/round/fine-tune training pipeline, a cost model for learned
//! bitlengths, datasets and checkpointing.

pub mod autodiff;
pub mod bitloss;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod models;
pub mod optim;
pub mod params;
pub mod persistence;
pub mod quantizer;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use bitloss::{BitLossConfig, Scheme};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use models::{Model, ModelSpec};
pub use params::{ParamId, ParamStore};
pub use quantizer::{Granularity, QuantPlan, Role};
pub use tensor::Tensor;
pub use training::Session;
