//! Lifelong person re-identification with text-guided global representations,
//! attribute-wise representations, and old/new model distillation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`nn`]: dense `f64` matrices, a reverse-mode tape and
//!   transformer layers.
//! * [`attribute_text`]: attribute thresholding and caption rendering.
//! * [`backbone`]: multi-class-token image encoder, tokenizer and frozen text encoder.
//! * [`tga`]: parallel fusion of text and image embeddings plus the current-task losses.
//! * [`acn`]: attribute decoder, attribute matching and attribute-wise representations.
//! * [`model`]: the full per-step model.
//! * [`lifelong`]: distillation losses, memory buffer, model pair and the training loop.
//! * [`evalkit`]: retrieval metrics, curves and feature dumps.
//! * [`datakit`]: synthetic domains, manifests and task streams.
//! * [`pipeline`]: end-to-end loading, training and evaluation over a task stream.

pub mod acn;
pub mod attribute_text;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod lifelong;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod tga;

pub use error::{Error, Result};
pub use tensor::Matrix;
