//! Image-prompt conditioned latent video diffusion at desk scale.
//!
//! The crate implements subject-driven video generation where a subject is
//! given as an image prompt next to the text prompt:
//!
//! - [`conditioning`]: frozen toy encoders, the trainable image-to-text
//!   mapper and the fusion of the coarse visual embedding into the caption;
//! - [`unet`]: a tiny inflated video U-Net with cross-frame, temporal and
//!   text cross-attention;
//! - [`injection`]: multi-scale attention injection of the image prompt into
//!   cross-frame attention, first into frame 0 and then propagated;
//! - [`trainer`]: the coarse-to-fine two-stage optimizer with strict
//!   parameter gating and checkpoints;
//! - [`dataset`]: a synthetic moving-subject corpus plus the curation
//!   protocol (segmentation, noun chunks, size and keyword filters, splits);
//! - [`metrics`]: frame-averaged cosine alignment scores;
//! - [`refiner`]: the zero-initialized residual watermark-removal U-Net.
//!
//! Everything is built on [`tensor`], [`ops`] and [`autodiff`], a small
//! deterministic CPU tensor engine. See `examples/` for runnable tours.

pub mod attention;
pub mod cli;
pub mod autodiff;
pub mod codec;
pub mod config;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod injection;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParameterStore, StageTag};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};
