//! Facial expression recognition from aggregated facial patches.
//!
//! The crate trains a patch-based convolutional network: a face image is
//! aligned by its eye positions, seven regions (eyes, eyebrows, nose, mouth,
//! jaw) are cropped into fixed-size patches, each patch runs through its own
//! convolutional sub-network, and the flattened features are aggregated into
//! one dense classifier head.
//!
//! Everything numeric is built on [`numcore`], a small reverse-mode
//! differentiation engine over `f64` tensors. Data augmentation comes in two
//! forms: deterministic image transformations ([`augment`]) and a conditional
//! GAN that synthesizes expression images from neutral faces ([`cgan`]).
//! [`dataeval`] holds the dataset model and the subject-independent
//! cross-validation harness.

pub mod augment;
pub mod cgan;
pub mod dataeval;
pub mod error;
pub mod facegeom;
pub mod model;
pub mod numcore;
pub mod par;
pub mod plot;

pub use error::{Error, Result};
