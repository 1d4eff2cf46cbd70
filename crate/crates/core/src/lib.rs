//! Printed text-line recognition built from scratch.
//!
//! The pipeline is: a high-resolution convolutional backbone (a five-level
//! U-Net or a four-stage multi-resolution network) produces a feature map at
//! input resolution; the map is collapsed over height into a width-indexed
//! sequence, regularised with temporal dropout, passed through two
//! bidirectional LSTM layers and classified per step; training uses the CTC
//! loss and AdaDelta. A procedural generator produces labelled line images
//! whose alphabet contains glyph families distinguished only by small dots.

pub mod charset;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod image;
pub mod metrics;
pub mod model;
pub mod real;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Tape, Tensor, Var};
