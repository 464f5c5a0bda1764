//! Small-footprint keyword spotting with depthwise-separable residual
//! networks.
//!
//! The crate bundles everything needed to analyze, train and run the
//! DS-ResNet model family on CPU:
//!
//! - [`nn`]: convolution (standard / depthwise / pointwise, dilated, "same"
//!   padding), pooling, activations, fully-connected layer.
//! - [`se`]: the squeeze-and-excitation channel gate.
//! - [`model`]: declarative architecture specs, the DS-ResNet18/14/10
//!   presets, deterministic construction, forward inference, the dilation
//!   schedule, the receptive-field calculator, and the "DSRN" model file.
//! - [`cost`]: exact parameter and multiply accounting with golden reference
//!   tables.
//! - [`audio`]: WAV ingestion, MFCC features, dataset splitting/balancing,
//!   augmentation, and the "DSFC" feature cache.
//! - [`train`]: backpropagation for every primitive, SGD with momentum and
//!   L2 decay, the step-decay learning-rate schedule, evaluation and
//!   confidence intervals, and a finite-difference gradient checker.
//!
//! Math is done in `f64`; file formats store `f32`. With the default
//! `parallel` feature the hot loops run on rayon, with bit-identical results
//! to the sequential fallback (`--no-default-features`).

pub mod audio;
pub mod cost;
pub mod error;
mod exec;
pub mod model;
pub mod nn;
pub mod rng;
pub mod se;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
