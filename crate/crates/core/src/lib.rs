//! Knowledge graph completion by mined cloze prompts, retrieved support
//! passages and re-ranking of KGE recalls.

pub mod checksum;
pub mod config;
pub mod corpus;
pub mod error;
pub mod kg;
pub mod ensemble;
pub mod eval;
pub mod miner;
pub mod negatives;
pub mod phrase;
pub mod pipeline;
pub mod prompt;
pub mod remote;
pub mod retriever;
pub mod rng;
pub mod scorer;
pub mod selector;
pub mod synth;
pub mod text;

pub use error::{Error, Result, ScorerError};
