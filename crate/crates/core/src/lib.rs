//! Emotion-evoked image editing: paired-data curation, an emotion-conditioned
//! latent diffusion editor, critic-guided iterative inference and
//! emotion/structure metrics, all runnable at desk scale on synthetic images.

pub mod checkpoint;
pub mod config;
pub mod curation;
pub mod diffusion;
pub mod domain;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod synth;

pub use candle_core::DType;
pub use error::{Error, Result};
