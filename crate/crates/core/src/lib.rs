//! Open-vocabulary keyword spotting by cross-modal matching.
//!
//! An audio encoder (log-mel front end, two convolutions, two Bi-GRUs) and a text encoder
//! (Bi-GRU over speech-synthesis intermediate representations) project into a shared
//! 128-dimensional space. Cross-attention with text as query summarizes the audio per text
//! position, and a Bi-GRU discriminator scores whether the pair names the same keyword.
//!
//! Everything numeric runs on the small autodiff engine in [`numerics`].

pub mod data;
pub mod dsp;
pub mod embeddings;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
