//! Generative adversarial networks for rehabilitation movement time series.
//!
//! The crate carries its own reverse-mode autodiff engine ([`engine`]), the
//! layer zoo ([`nn`]), the GAN, DCGAN, WGAN and RGAN model families
//! ([`models`]), the soft-label data pipeline ([`data`]) and the training
//! and evaluation loops ([`train`]).

pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod presets;
pub mod rng;
pub mod train;

pub use error::{Error, ErrorClass, Result};
