//! Attribute-conditioned deformable templates.
//!
//! The crate jointly learns a template function (intensity image plus a
//! probabilistic label map, optionally conditioned on subject attributes
//! such as age and sex) and an amortized diffeomorphic registration network
//! that aligns the template to each subject. Everything below the models is
//! built in-crate: dense grid fields, scaling-and-squaring integration, a
//! small reverse-mode autodiff tape, Adam, and the evaluation metrics.
//!
//! Module map:
//!
//! - [`field`]: grids, volumes, vector fields, warping and integration.
//! - [`autodiff`]: tape, parameter store, Adam, gradient checking, checkpoints.
//! - [`models`]: attribute encoding, template decoder, registration UNet.
//! - [`losses`]: image, segmentation, smoothness and centrality terms.
//! - [`synth`]: synthetic aging-anatomy populations and dataset persistence.
//! - [`eval`]: Dice, surface distance, regularity, trend analysis.
//! - [`train`]: the optimization loop and experiment configuration.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod field;
pub mod gradsuite;
pub mod losses;
pub mod manifest;
pub mod models;
pub mod plot;
pub mod real;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
