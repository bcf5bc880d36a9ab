//! Retrieval-augmented generation engine for Verilog RTL.
//!
//! The pipeline is split into separable stages, each usable on its own:
//!
//! * [`corpus`] loads module records and renders them into embeddable documents,
//! * [`embedding`] turns text into unit-norm vectors through a pluggable provider,
//! * [`index`] performs exact L2 search and converts distances to relevance,
//! * [`retrieval`] applies the threshold filter and dynamic sampling,
//! * [`promptgen`] assembles the augmented prompt and extracts generated code,
//! * [`llmclient`] talks to completion providers with bounded retries,
//! * [`evaluation`] runs compile/simulate checks and computes pass@k,
//! * [`engine`] wires the stages together for one-shot generation and benchmarks.

pub mod corpus;
pub mod embedding;
pub mod engine;
pub mod evaluation;
pub mod index;
pub mod llmclient;
pub mod promptgen;
pub mod retrieval;

pub use corpus::{Document, ModuleRecord, PortDecl, PortDirection};
pub use embedding::{EmbeddingProvider, EmbeddingVector, HashedNgramEmbedder};
pub use engine::{Engine, EngineError};
pub use index::{SearchHit, VectorIndex};
pub use retrieval::{RetrievalConfig, RetrievalMode, SamplingTrace, ScoredCandidate};
