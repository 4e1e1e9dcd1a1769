//! Masked autoencoder pre-training, NNCLR head initialisation, contrastive
//! tuning and the embedding evaluation battery, on a small reverse-mode
//! autodiff engine over `f64` tensors.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod mae;
pub mod nnclr;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tuning;
pub mod vit;

pub use autodiff::{Tape, Tensor, Var};
pub use data::Dataset;
pub use error::{Error, Result};
pub use params::Params;
pub use vit::{Image, ViTConfig};
