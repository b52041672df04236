//! Span-based named entity recognition with fixed-size ordinally forgetting
//! encodings (FOFE).
//!
//! Every fragment of up to `max_fragment_len` tokens is a candidate. Its
//! characters and words, and the full left and right contexts around it, are
//! folded into fixed-size FOFE codes, projected through embedding tables and
//! classified by a feed-forward network with dedicated fragment and context
//! stacks merged in a shared layer. Non-overlapping entity spans are then
//! decoded greedily from the per-candidate class distributions.

pub mod cli;
pub mod config;
pub mod conll;
pub mod embeddings;
pub mod error;
pub mod features;
pub mod fofe;
pub mod model;
pub mod model_io;
pub mod network;
pub mod pipeline;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
