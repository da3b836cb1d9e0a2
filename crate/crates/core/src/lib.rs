//! Token-level MaxSim retrieval, moderate-similarity triplet curation and
//! numerical checks of the MaxSim InfoNCE objective.

pub mod cli;
pub mod config;
pub mod curation;
pub mod error;
pub mod loss;
pub mod maxsim;
pub mod metrics;
pub mod temb;
pub mod tokens;

pub use error::{Error, Result};
pub use maxsim::{maxsim, maxsim_brute, maxsim_matrix, top_k, RankedEntry, RankedList};
pub use temb::{load_embedding_store, save_embedding_store};
pub use tokens::{normalize_tokens, synth_embeddings, EmbeddingStore, ScoreMatrix, SynthSpec, TokenMatrix};
