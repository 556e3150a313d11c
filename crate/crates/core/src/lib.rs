//! Multi-business generative recommendation over semantic IDs.
//!
//! Items are tokenized into semantic IDs by a residual quantizer. A
//! business-conditioned codec turns token embeddings into item
//! representations, a causal transformer encodes user histories, and a shared
//! mixture-of-experts layer specialises the sequence state per business before
//! the codec's decoder predicts next-item tokens. Targets are routed to the
//! nearest future event of each business.

pub mod backbone;
pub mod bid;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod ldr;
pub mod loss;
pub mod mbp;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod trainer;

pub use data::Interaction;
pub use error::{Error, Result};
pub use tokenizer::{Codebook, SemanticId};
