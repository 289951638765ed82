//! Chaotic denoising autoencoder pretraining and attentive feature fusion.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense tensors with
//! reverse-mode differentiation, [`nn`] the layers, [`models`] the encoders,
//! autoencoder and fusion classifier, and [`pipeline`] the three training
//! stages. [`corruption`], [`data`] and [`metrics`] are independent leaves.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod image;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod run;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
