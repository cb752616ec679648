//! Online visual tracking by detection on a frozen off-the-shelf backbone.
//!
//! A frame-1 gradient probe picks the backbone channels that best separate
//! the target from its surroundings, a small convolutional head is trained
//! online on those channels with an imbalance-aware loss, and a short/long
//! term memory schedule decides when to update it.

pub mod adapt;
pub mod backbone;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod nn;
pub mod sampling;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use sampling::BBox;
