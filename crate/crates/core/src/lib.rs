//! Toy-scale lab for studying how feed-forward memories override retrieved
//! context, and for suppressing them.
//!
//! The pieces, bottom up: dense numerics, a small transformer with explicit
//! key-value FFN memories, activation analysis, suppression plans, a
//! low-rank adapter trained for context faithfulness, the
//! knowledge-conflict data pipeline, and the evaluation metrics.

pub mod activation;
pub mod adapt;
pub mod dataqa;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod suppress;
pub mod vocab;

pub use error::{Error, Result};
