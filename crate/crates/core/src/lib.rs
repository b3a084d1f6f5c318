//! Self-supervised contrastive pre-training of dialogue-history encoders and
//! profile-conditioned response generation.

pub mod corpus;
pub mod encoders;
mod error;
pub mod generator;
pub mod metrics;
pub mod mining;
pub mod objectives;
pub mod pipeline;

pub use error::{Error, Result};
