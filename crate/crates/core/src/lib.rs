//! Domain adaptation of frozen text embeddings.
//!
//! Paragraph embeddings from any backend are refined by a linear adapter
//! trained on LLM-labeled triplets, then on questions synthesized per
//! cluster of the refined space. See the README for the CLI.

pub mod clustering;
pub mod corpus;
pub mod embedding;
pub mod evalkit;
mod http;
pub mod llm;
pub mod pipeline;
pub mod prompts;
pub mod qepair;
pub mod trainer;
pub mod triplet;
