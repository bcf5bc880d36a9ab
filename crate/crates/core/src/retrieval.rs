//! Multi-stage retrieval: candidate pool, absolute threshold, dynamic sampling.
//!
//! Dynamic sampling walks the threshold-filtered candidates in relevance
//! order. The first candidate is always kept, the second establishes the
//! initial score drop, and each later candidate is kept only while its drop
//! from the previous one stays within `alpha` times the previous drop. The
//! walk never goes past `k_max`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::embedding::{embed_text, EmbeddingError, EmbeddingProvider};
use crate::index::{IndexError, VectorIndex};

pub const DEFAULT_POOL_SIZE: usize = 10;
pub const DEFAULT_TAU: f64 = 0.55;
pub const DEFAULT_ALPHA: f64 = 1.5;
pub const DEFAULT_K_MAX: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("candidates are not sorted by non-increasing relevance at position {position}")]
    Unsorted { position: usize },
    #[error("candidate at position {position} has a non-finite relevance")]
    NonFinite { position: usize },
    #[error("query text is empty")]
    EmptyQuery,
    #[error("embedding stage: {0}")]
    Embed(#[from] EmbeddingError),
    #[error("search stage: {0}")]
    Search(#[from] IndexError),
    #[error("knowledge base: {0}")]
    KnowledgeBase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RetrievalMode {
    #[default]
    Dynamic,
    Fixed(usize),
    Disabled,
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrievalMode::Dynamic => f.write_str("dynamic"),
            RetrievalMode::Fixed(n) => write!(f, "fixed:{n}"),
            RetrievalMode::Disabled => f.write_str("disabled"),
        }
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    /// Accepts `dynamic`, `disabled`, `fixed:N` and `fixed(N)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "dynamic" => return Ok(RetrievalMode::Dynamic),
            "disabled" | "none" | "off" => return Ok(RetrievalMode::Disabled),
            _ => {}
        }
        let n = s
            .strip_prefix("fixed:")
            .or_else(|| s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| format!("unknown retrieval mode `{s}` (expected dynamic, fixed:N or disabled)"))?;
        n.trim()
            .parse()
            .map(RetrievalMode::Fixed)
            .map_err(|_| format!("bad document count in `{s}`"))
    }
}

impl TryFrom<String> for RetrievalMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RetrievalMode> for String {
    fn from(m: RetrievalMode) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub pool_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub k_max: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            pool_size: DEFAULT_POOL_SIZE,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            k_max: DEFAULT_K_MAX,
            mode: RetrievalMode::Dynamic,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: String| Err(RetrievalError::InvalidConfig(m));
        if self.k_max < 1 {
            return bad("k_max must be at least 1".into());
        }
        if self.pool_size < self.k_max {
            return bad(format!(
                "pool_size ({}) must be at least k_max ({})",
                self.pool_size, self.k_max
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be a positive number, got {}", self.alpha));
        }
        if !self.tau.is_finite() {
            return bad(format!("tau must be finite, got {}", self.tau));
        }
        if let RetrievalMode::Fixed(n) = self.mode {
            if n < 1 || n > self.pool_size {
                return bad(format!(
                    "fixed mode needs 1 <= n <= pool_size ({}), got {n}",
                    self.pool_size
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub doc_id: String,
    pub relevance: f64,
    pub distance: f64,
    pub document: Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    /// A score drop exceeded `alpha` times the previous drop.
    DropFactor,
    /// Selection stopped at `k_max` (or the fixed count) with candidates left.
    Cap,
    /// Every threshold-qualified candidate was selected.
    Exhausted,
    /// No candidate met the threshold.
    ThresholdEmpty,
    /// Retrieval was turned off.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingTrace {
    /// Every score drop that was computed, in order: the initial drop between
    /// the first two candidates, then one per candidate examined afterwards.
    pub drops: Vec<f64>,
    /// 0-based position, within the filtered list, of the candidate whose drop halted selection.
    pub halted_at: Option<usize>,
    pub reason: HaltReason,
    /// Number of candidates that met the threshold.
    pub filtered: usize,
    pub selected: usize,
}

fn check_sorted(scores: &[f64]) -> Result<(), RetrievalError> {
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(RetrievalError::NonFinite { position: i });
        }
        if i > 0 && scores[i - 1] < *s {
            return Err(RetrievalError::Unsorted { position: i });
        }
    }
    Ok(())
}

/// Dynamic sampling over relevance scores sorted in non-increasing order.
///
/// Returns the trace; the selection is always the first `trace.selected`
/// scores.
pub fn dynamic_sample_scores(
    scores: &[f64],
    tau: f64,
    alpha: f64,
    k_max: usize,
) -> Result<SamplingTrace, RetrievalError> {
    check_sorted(scores)?;
    // sorted input makes the threshold survivors a prefix
    let filtered = scores.iter().take_while(|&&s| s >= tau).count();
    let kept = &scores[..filtered];
    let mut trace = SamplingTrace {
        drops: Vec::new(),
        halted_at: None,
        reason: HaltReason::ThresholdEmpty,
        filtered,
        selected: 0,
    };
    if filtered == 0 {
        return Ok(trace);
    }
    trace.selected = 1;
    if filtered >= 2 && k_max >= 2 {
        trace.selected = 2;
        let mut prev_drop = kept[0] - kept[1];
        trace.drops.push(prev_drop);
        for i in 2..filtered.min(k_max) {
            let drop = kept[i - 1] - kept[i];
            trace.drops.push(drop);
            if drop > alpha * prev_drop {
                trace.halted_at = Some(i);
                trace.reason = HaltReason::DropFactor;
                return Ok(trace);
            }
            trace.selected = i + 1;
            prev_drop = drop;
        }
    }
    trace.reason = if filtered > trace.selected {
        HaltReason::Cap
    } else {
        HaltReason::Exhausted
    };
    Ok(trace)
}

pub fn dynamic_sample(
    candidates: &[ScoredCandidate],
    cfg: &RetrievalConfig,
) -> Result<(Vec<ScoredCandidate>, SamplingTrace), RetrievalError> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.relevance).collect();
    let trace = dynamic_sample_scores(&scores, cfg.tau, cfg.alpha, cfg.k_max)?;
    Ok((candidates[..trace.selected].to_vec(), trace))
}

/// Top-`n` of the threshold-filtered candidates.
pub fn fixed_sample(
    candidates: &[ScoredCandidate],
    n: usize,
    tau: f64,
) -> Result<(Vec<ScoredCandidate>, SamplingTrace), RetrievalError> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.relevance).collect();
    check_sorted(&scores)?;
    let filtered = scores.iter().take_while(|&&s| s >= tau).count();
    let selected = filtered.min(n);
    let reason = match (filtered, filtered > n) {
        (0, _) => HaltReason::ThresholdEmpty,
        (_, true) => HaltReason::Cap,
        _ => HaltReason::Exhausted,
    };
    let trace = SamplingTrace {
        drops: Vec::new(),
        halted_at: None,
        reason,
        filtered,
        selected,
    };
    Ok((candidates[..selected].to_vec(), trace))
}

/// The searchable corpus: an index plus the documents its entries point to,
/// aligned by position.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    index: VectorIndex,
    documents: Vec<Document>,
}

impl KnowledgeBase {
    pub fn new(index: VectorIndex, documents: Vec<Document>) -> Result<Self, RetrievalError> {
        if index.len() != documents.len() {
            return Err(RetrievalError::KnowledgeBase(format!(
                "index has {} entries but {} documents were given",
                index.len(),
                documents.len()
            )));
        }
        if let Some((i, (id, doc))) = index
            .ids()
            .iter()
            .zip(&documents)
            .enumerate()
            .find(|(_, (id, doc))| **id != doc.id)
        {
            return Err(RetrievalError::KnowledgeBase(format!(
                "entry {i}: index id `{id}` does not match document id `{}`",
                doc.id
            )));
        }
        Ok(Self { index, documents })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalOutcome {
    /// The candidate pool before thresholding, best first.
    pub pool: Vec<ScoredCandidate>,
    pub selected: Vec<ScoredCandidate>,
    pub trace: SamplingTrace,
}

/// Embeds the query, searches the pool and applies the configured selection mode.
pub fn retrieve(
    kb: &KnowledgeBase,
    provider: &dyn EmbeddingProvider,
    query: &str,
    cfg: &RetrievalConfig,
) -> Result<RetrievalOutcome, RetrievalError> {
    cfg.validate()?;
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    if cfg.mode == RetrievalMode::Disabled {
        return Ok(RetrievalOutcome {
            pool: Vec::new(),
            selected: Vec::new(),
            trace: SamplingTrace {
                drops: Vec::new(),
                halted_at: None,
                reason: HaltReason::Disabled,
                filtered: 0,
                selected: 0,
            },
        });
    }
    let qv = embed_text(provider, query)?;
    let hits = kb.index.search(&qv, cfg.pool_size)?;
    let pool: Vec<ScoredCandidate> = hits
        .into_iter()
        .map(|h| ScoredCandidate {
            document: kb.documents[h.position].clone(),
            doc_id: h.doc_id,
            relevance: h.relevance,
            distance: h.distance,
        })
        .collect();
    let (selected, trace) = match cfg.mode {
        RetrievalMode::Dynamic => dynamic_sample(&pool, cfg)?,
        RetrievalMode::Fixed(n) => fixed_sample(&pool, n, cfg.tau)?,
        RetrievalMode::Disabled => unreachable!(),
    };
    tracing::debug!(
        pool = pool.len(),
        filtered = trace.filtered,
        selected = trace.selected,
        reason = ?trace.reason,
        "retrieval finished"
    );
    Ok(RetrievalOutcome {
        pool,
        selected,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn run(scores: &[f64]) -> SamplingTrace {
        dynamic_sample_scores(scores, DEFAULT_TAU, DEFAULT_ALPHA, DEFAULT_K_MAX).unwrap()
    }

    #[test]
    fn sharp_drop_halts() {
        let t = run(&[0.9, 0.85, 0.80, 0.60, 0.58]);
        assert_eq!(t.selected, 3);
        assert_eq!(t.reason, HaltReason::DropFactor);
        assert_eq!(t.halted_at, Some(3));
        assert_eq!(t.filtered, 5);
        assert_eq!(t.drops.len(), 3);
    }

    #[test]
    fn equal_drops_never_halt() {
        let t = run(&[0.9, 0.8, 0.7, 0.6, 0.54]);
        assert_eq!((t.filtered, t.selected, t.reason), (4, 4, HaltReason::Exhausted));
    }

    #[test]
    fn all_below_threshold() {
        let t = run(&[0.50, 0.49]);
        assert_eq!((t.selected, t.reason), (0, HaltReason::ThresholdEmpty));
        assert!(t.drops.is_empty());
    }

    #[test]
    fn single_survivor_is_always_kept() {
        let t = run(&[0.9]);
        assert_eq!((t.selected, t.reason), (1, HaltReason::Exhausted));
    }

    #[test]
    fn cap_limits_selection() {
        let t = run(&[0.99, 0.98, 0.97, 0.96, 0.95, 0.94, 0.93]);
        assert_eq!((t.selected, t.reason), (5, HaltReason::Cap));
    }

    #[test]
    fn tied_leading_scores_halt_on_any_drop() {
        let t = run(&[0.8, 0.8, 0.79]);
        assert_eq!((t.selected, t.reason, t.halted_at), (2, HaltReason::DropFactor, Some(2)));
    }

    #[test]
    fn unsorted_and_nan_inputs_are_rejected() {
        assert!(matches!(
            dynamic_sample_scores(&[0.7, 0.9], 0.5, 1.5, 5),
            Err(RetrievalError::Unsorted { position: 1 })
        ));
        assert!(matches!(
            dynamic_sample_scores(&[0.9, f64::NAN], 0.5, 1.5, 5),
            Err(RetrievalError::NonFinite { position: 1 })
        ));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("dynamic".parse::<RetrievalMode>().unwrap(), RetrievalMode::Dynamic);
        assert_eq!("fixed:3".parse::<RetrievalMode>().unwrap(), RetrievalMode::Fixed(3));
        assert_eq!("fixed(1)".parse::<RetrievalMode>().unwrap(), RetrievalMode::Fixed(1));
        assert_eq!("disabled".parse::<RetrievalMode>().unwrap(), RetrievalMode::Disabled);
        assert!("sometimes".parse::<RetrievalMode>().is_err());
        assert!("fixed:x".parse::<RetrievalMode>().is_err());
        let json = serde_json::to_string(&RetrievalMode::Fixed(2)).unwrap();
        assert_eq!(json, "\"fixed:2\"");
    }

    #[test]
    fn config_validation() {
        assert!(RetrievalConfig::default().validate().is_ok());
        let with = |f: fn(&mut RetrievalConfig)| {
            let mut c = RetrievalConfig::default();
            f(&mut c);
            c.validate()
        };
        assert!(with(|c| c.k_max = 0).is_err());
        assert!(with(|c| c.pool_size = 3).is_err());
        assert!(with(|c| c.alpha = 0.0).is_err());
        assert!(with(|c| c.alpha = -1.0).is_err());
        assert!(with(|c| c.tau = f64::NAN).is_err());
        assert!(with(|c| c.mode = RetrievalMode::Fixed(0)).is_err());
        assert!(with(|c| c.mode = RetrievalMode::Fixed(11)).is_err());
        assert!(with(|c| c.mode = RetrievalMode::Fixed(10)).is_ok());
    }

    fn sorted_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-0.4f64..1.0, 0..12).prop_map(|mut v| {
            v.sort_by(|a, b| b.partial_cmp(a).unwrap());
            v
        })
    }

    proptest! {
        #[test]
        fn selection_is_a_qualified_prefix(
            scores in sorted_scores(),
            tau in 0.0f64..1.0,
            alpha in 0.1f64..4.0,
            k_max in 1usize..8,
        ) {
            let t = dynamic_sample_scores(&scores, tau, alpha, k_max).unwrap();
            prop_assert!(t.selected <= k_max);
            prop_assert!(t.selected <= t.filtered);
            prop_assert!(scores[..t.selected].iter().all(|&s| s >= tau));
            prop_assert_eq!(t.selected == 0, scores.iter().all(|&s| s < tau));
        }

        #[test]
        fn halting_is_correct(scores in sorted_scores(), alpha in 0.1f64..4.0) {
            let t = dynamic_sample_scores(&scores, 0.0, alpha, 8).unwrap();
            if let Some(i) = t.halted_at {
                let kept: Vec<f64> = scores.iter().copied().filter(|&s| s >= 0.0).collect();
                let mut prev = kept[0] - kept[1];
                for j in 2..i {
                    let d = kept[j - 1] - kept[j];
                    prop_assert!(d <= alpha * prev);
                    prev = d;
                }
                prop_assert!(kept[i - 1] - kept[i] > alpha * prev);
                prop_assert_eq!(t.selected, i);
            }
        }

        #[test]
        fn raising_tau_never_enlarges(scores in sorted_scores(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = dynamic_sample_scores(&scores, lo, 1.5, 5).unwrap();
            let b = dynamic_sample_scores(&scores, hi, 1.5, 5).unwrap();
            prop_assert!(b.selected <= a.selected);
        }
    }
}
