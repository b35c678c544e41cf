//! Reversible greyscale steganography driven by predictive uncertainty.
//!
//! A compact dual-headed network predicts each query pixel of a chequerboard
//! partition from its context neighbours; Monte Carlo dropout turns the
//! predictor into a posterior sampler whose aleatoric and epistemic
//! uncertainty maps order the embedding pathway. Message bits ride on
//! prediction residuals through an exactly invertible expansion code, so the
//! decoder — holding the same model, key and seed — recovers both the
//! message and the original cover bit for bit.

pub mod bayes;
pub mod codec;
mod error;
pub mod eval;
pub mod grid;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod synth;

pub use bayes::{PosteriorSamples, UncertaintyMap, UncertaintyScore};
pub use error::{Error, Result};
pub use grid::{Partition, PixelGrid, Polarity};
pub use pipeline::{EmbedReport, StegoKey, FORMAT_VERSION};
pub use predictor::{Dataset, DropoutMask, DualHeadedModel, TrainConfig};
