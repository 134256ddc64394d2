//! Training objectives and target generators.

mod contrastive;
mod ctc;
mod kmeans;
mod masked;

pub use contrastive::{contrastive_loss, cosine_sim, sample_distractors, DistractorPolicy};
pub use ctc::{ctc_loss, BLANK};
pub use kmeans::{kmeans_assign, kmeans_fit, KmeansModel};
pub use masked::{cross_entropy, mask_spans, masked_predictive_loss, MaskSet};
