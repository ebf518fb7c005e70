//! Pseudo-labeling with training-set selection driven by learning dynamics.
//!
//! Every model in the loop is trained iteratively; the probabilities it gives
//! each candidate sample across checkpoints yield an average confidence and an
//! aleatoric uncertainty. Samples that are confidently and stably predicted
//! are kept for training, the rest are set aside, and this happens for the
//! labeled data as well as for pseudo-labels.

pub mod backbone;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod plabelers;
pub mod pipeline;
pub mod seed;
pub mod selectors;

pub use error::{DipsError, Result};
