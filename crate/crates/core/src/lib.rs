//! Continual generalized category discovery on precomputed embeddings.
//!
//! A projection head is trained with proxy-anchor loss on labelled classes,
//! then at every later step unlabeled data is split into known and novel
//! samples, novel ones are clustered into new classes, and the head is
//! updated with replay of old-class features and distillation from the
//! previous head.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod metric_head;
pub mod par;
pub mod pipeline;
pub mod pseudo_label;
pub mod replay;
pub mod rng;
pub mod splitter;

pub use error::{Error, Result};
