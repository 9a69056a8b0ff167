//! Unsupervised domain adaptation from a labeled, weather-annotated source
//! domain to an unlabeled target domain.
//!
//! The training objective couples four learnable parts (feature extractor,
//! enhancement head, classifier, discriminator) with:
//!
//! * adversarial feature alignment through a gradient-reversal coupling,
//! * self-knowledge distillation against frozen vision-language embeddings,
//! * a hidden-layer token-offset consistency term,
//! * a curriculum that grows the active source subset by difficulty score.
//!
//! Everything runs on the CPU through `candle`; the [`vlm_bridge`] ships
//! deterministic frozen encoders so the full pipeline works without
//! pretrained weights.

pub mod cli;
pub mod curriculum;
pub mod data_domains;
pub mod error;
pub mod eval_report;
pub mod losses;
pub mod model;
pub mod perturbation;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod vlm_bridge;

pub use error::{Error, Result};
