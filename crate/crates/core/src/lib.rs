//! Influence-based training data attribution.
//!
//! Ranks training examples by their influence on validation loss, selects
//! coresets from those rankings, picks how many layers to use for influence
//! estimation under a memory budget, and scores how well a training set
//! covers unseen test points. A toy training harness with a leave-one-out
//! oracle provides ground truth for all of it.

pub mod coreset;
pub mod coverage;
pub mod error;
pub mod gradient_store;
pub mod influence;
pub mod layer_budget;
pub mod stats;
pub mod toy;

pub use error::{Error, Result};
