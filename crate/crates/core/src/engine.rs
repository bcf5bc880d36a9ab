//! End-to-end pipeline: retrieve, assemble, generate, extract.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::corpus::{batch_documents, read_documents, CorpusError, Document};
use crate::embedding::{embed_batch, embedder_from_spec, EmbeddingError, EmbeddingProvider};
use crate::index::{IndexError, VectorIndex};
use crate::llmclient::{self, BatchOutcome, Completion, CompletionProvider, GenerationConfig, LlmError, RetryPolicy};
use crate::promptgen::{self, AugmentedPrompt, ExtractionResult, PromptError, RuleSet, DEFAULT_TOKEN_BUDGET};
use crate::retrieval::{self, KnowledgeBase, RetrievalConfig, RetrievalError, RetrievalOutcome};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("embedding stage: {0}")]
    Embedding(#[from] EmbeddingError),
    #[error("index stage: {0}")]
    Index(#[from] IndexError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// Wall-clock milliseconds spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub retrieval_ms: f64,
    pub prompt_ms: f64,
    pub generation_ms: f64,
    pub extraction_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Serialize)]
pub struct Prepared {
    pub retrieval: RetrievalOutcome,
    pub prompt: AugmentedPrompt,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationRun {
    pub retrieval: RetrievalOutcome,
    pub prompt: AugmentedPrompt,
    pub completion: Completion,
    pub extraction: ExtractionResult,
    pub timings: StageTimings,
}

/// Embeds documents in batches and builds the exact index over them.
pub fn index_documents(
    provider: &dyn EmbeddingProvider,
    documents: &[Document],
    batch_size: usize,
) -> Result<VectorIndex, EngineError> {
    let mut pairs = Vec::with_capacity(documents.len());
    for (i, batch) in batch_documents(documents, batch_size)?.into_iter().enumerate() {
        let texts: Vec<&str> = batch.iter().map(|d| d.text.as_str()).collect();
        let vectors = embed_batch(provider, &texts)?;
        pairs.extend(batch.iter().map(|d| d.id.clone()).zip(vectors));
        tracing::debug!(batch = i, size = batch.len(), "embedded batch");
    }
    Ok(VectorIndex::build(pairs)?)
}

/// Immutable after construction; share it behind an `Arc` across threads.
pub struct Engine {
    kb: KnowledgeBase,
    embedder: Arc<dyn EmbeddingProvider>,
    rules: RuleSet,
    token_budget: usize,
}

impl Engine {
    pub fn new(kb: KnowledgeBase, embedder: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            kb,
            embedder,
            rules: RuleSet::default(),
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }

    /// Loads a saved index and its document store; the embedder is built
    /// from `embedder_spec` at the index dimension.
    pub fn load(index_path: &Path, documents_path: &Path, embedder_spec: &str) -> Result<Self, EngineError> {
        let index = VectorIndex::load(index_path)?;
        let embedder = embedder_from_spec(embedder_spec, index.dim())?;
        let documents = read_documents(documents_path)?;
        let kb = KnowledgeBase::new(index, documents)?;
        Ok(Self::new(kb, embedder))
    }

    /// Embeds and indexes `documents` with `embedder`.
    pub fn from_documents(documents: Vec<Document>, embedder: Arc<dyn EmbeddingProvider>) -> Result<Self, EngineError> {
        let index = index_documents(embedder.as_ref(), &documents, crate::corpus::DEFAULT_BATCH_SIZE)?;
        let kb = KnowledgeBase::new(index, documents)?;
        Ok(Self::new(kb, embedder))
    }

    pub fn with_rules(mut self, rules: RuleSet) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_token_budget(mut self, budget: usize) -> Self {
        self.token_budget = budget;
        self
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn embedder(&self) -> &dyn EmbeddingProvider {
        self.embedder.as_ref()
    }

    pub fn token_budget(&self) -> usize {
        self.token_budget
    }

    pub fn retrieve(&self, query: &str, cfg: &RetrievalConfig) -> Result<RetrievalOutcome, EngineError> {
        Ok(retrieval::retrieve(&self.kb, self.embedder.as_ref(), query, cfg)?)
    }

    /// Retrieval and prompt assembly, no provider call.
    pub fn prepare(&self, query: &str, cfg: &RetrievalConfig) -> Result<Prepared, EngineError> {
        if query.trim().is_empty() {
            return Err(PromptError::EmptyQuery.into());
        }
        let t = Instant::now();
        let outcome = self.retrieve(query, cfg)?;
        let retrieval_ms = ms_since(t);
        let t = Instant::now();
        let prompt = promptgen::assemble_prompt(query, &outcome.selected, &self.rules, self.token_budget)?;
        let prompt_ms = ms_since(t);
        for w in &prompt.warnings {
            tracing::warn!("{w}");
        }
        Ok(Prepared {
            retrieval: outcome,
            prompt,
            timings: StageTimings {
                retrieval_ms,
                prompt_ms,
                ..Default::default()
            },
        })
    }

    /// One completion through the full pipeline.
    pub fn generate(
        &self,
        provider: &dyn CompletionProvider,
        query: &str,
        rcfg: &RetrievalConfig,
        gcfg: &GenerationConfig,
        policy: &RetryPolicy,
    ) -> Result<GenerationRun, EngineError> {
        gcfg.validate()?;
        let Prepared {
            retrieval,
            prompt,
            mut timings,
        } = self.prepare(query, rcfg)?;
        let t = Instant::now();
        let completion = llmclient::generate(provider, &prompt, gcfg, policy)?;
        timings.generation_ms = ms_since(t);
        let t = Instant::now();
        let extraction = promptgen::extract_code(&completion.text)?;
        timings.extraction_ms = ms_since(t);
        Ok(GenerationRun {
            retrieval,
            prompt,
            completion,
            extraction,
            timings,
        })
    }

    /// `gcfg.samples_n` completions for one prepared prompt.
    pub fn generate_samples(
        &self,
        provider: &dyn CompletionProvider,
        prompt: &AugmentedPrompt,
        gcfg: &GenerationConfig,
        policy: &RetryPolicy,
        parallelism: usize,
    ) -> Result<BatchOutcome, EngineError> {
        Ok(llmclient::generate_batch(provider, prompt, gcfg, policy, parallelism)?)
    }
}
