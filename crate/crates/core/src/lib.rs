//! Video-to-image affordance grounding.
//!
//! Given a demonstration clip and a target image, predict where on the image
//! the demonstrated hand interaction lands (a heatmap) and, optionally, which
//! action it was. The crate contains the multi-scale cross-attention model,
//! the masked-hand self-supervised data synthesizer, the saliency metrics and
//! a training/evaluation harness that runs on procedurally generated corpora.

pub mod error;
pub mod heatmaps;
pub mod metrics;
pub mod media;
pub mod nn;
pub mod encoder;
pub mod decoder;
pub mod heads;
pub mod model;
pub mod maskahand;
pub mod harness;

pub use error::{Error, Result};
