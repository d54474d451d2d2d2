//! Self-supervised sequential recommendation.
//!
//! A bidirectional transformer is pretrained with four contrastive
//! objectives (item↔attribute, masked context↔item, masked
//! context↔attribute, context↔segment), then fine-tuned left-to-right with a
//! pairwise ranking loss and evaluated with leave-one-out sampled ranking.

pub mod autograd;
pub mod checks;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod objectives;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
