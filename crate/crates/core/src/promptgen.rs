//! Augmented prompt assembly and code extraction.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::retrieval::ScoredCandidate;

/// Rules every prompt carries. Extra rules from a rule file are appended after these.
pub const DEFAULT_RULES: [&str; 3] = [
    "You must produce fully implemented, accurate Verilog-2005 code.",
    "You must not use placeholders or incomplete modules.",
    "You cannot nest a module inside another module.",
];

const ROLE_TEXT: &str = "You are an expert Verilog RTL engineer. You follow these rules strictly:";
const OUTPUT_TEXT: &str = "Return the complete design inside a single ```verilog fenced code block.";
const CONTEXT_INTRO: &str = "The following verified Verilog modules were retrieved as reference examples. \
Use them for coding style, structure, and intended function where relevant.";
const REQUEST_HEADING: &str = "Design request:";

pub const DEFAULT_TOKEN_BUDGET: usize = 6144;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("token budget {budget} cannot hold the system rules and request ({needed} tokens)")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("model response is empty")]
    EmptyResponse,
    #[error("failed to read rule file {path}: {source}")]
    RuleFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Character-count heuristic: `ceil(chars / 4)`.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

/// System rules: the fixed defaults followed by any configured extras.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    extra: Vec<String>,
}

impl RuleSet {
    pub fn with_extra<I, S>(rules: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::default();
        for r in rules {
            set.push(r.into());
        }
        set
    }

    fn push(&mut self, rule: String) {
        let rule = rule.trim().to_string();
        if rule.is_empty() || DEFAULT_RULES.contains(&rule.as_str()) || self.extra.contains(&rule) {
            return;
        }
        self.extra.push(rule);
    }

    /// Reads a plain-text rule file, one rule per line.
    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::RuleFile {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::with_extra(text.lines()))
    }

    pub fn rules(&self) -> impl Iterator<Item = &str> {
        DEFAULT_RULES.iter().copied().chain(self.extra.iter().map(String::as_str))
    }

    pub fn system_text(&self) -> String {
        let mut s = String::from(ROLE_TEXT);
        for rule in self.rules() {
            s.push_str("\n- ");
            s.push_str(rule);
        }
        s.push('\n');
        s.push_str(OUTPUT_TEXT);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBlock {
    pub doc_id: String,
    pub module_name: String,
    pub relevance: f64,
    /// Full document text, header and code.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPrompt {
    pub system_text: String,
    /// Best first.
    pub context_blocks: Vec<ContextBlock>,
    pub user_text: String,
    pub estimated_tokens: usize,
    /// Ids of blocks removed to meet the token budget.
    pub evicted: Vec<String>,
    pub warnings: Vec<String>,
}

impl AugmentedPrompt {
    /// The user turn: retrieved examples followed by the request.
    pub fn user_payload(&self) -> String {
        let mut s = String::new();
        if !self.context_blocks.is_empty() {
            s.push_str(CONTEXT_INTRO);
            s.push_str("\n\n");
            for (i, block) in self.context_blocks.iter().enumerate() {
                s.push_str(&format!(
                    "// ---- Example {}: {} (relevance {:.3}) ----\n",
                    i + 1,
                    block.module_name,
                    block.relevance
                ));
                s.push_str(&block.text);
                if !block.text.ends_with('\n') {
                    s.push('\n');
                }
                s.push('\n');
            }
        }
        s.push_str(REQUEST_HEADING);
        s.push('\n');
        s.push_str(&self.user_text);
        s
    }

    /// Single-text rendering for completion-style providers.
    pub fn render_single(&self) -> String {
        format!("{}\n\n{}", self.system_text, self.user_payload())
    }

    fn refresh_estimate(&mut self) {
        self.estimated_tokens = estimate_tokens(&self.render_single());
    }
}

/// Builds the three-part prompt (rules, examples, request) and fits it to `budget`.
pub fn assemble_prompt(
    query: &str,
    selected: &[ScoredCandidate],
    rules: &RuleSet,
    budget: usize,
) -> Result<AugmentedPrompt, PromptError> {
    if query.trim().is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    let mut blocks: Vec<ContextBlock> = selected
        .iter()
        .map(|c| ContextBlock {
            doc_id: c.doc_id.clone(),
            module_name: c.document.module_name().unwrap_or(&c.doc_id).to_string(),
            relevance: c.relevance,
            text: c.document.text.clone(),
        })
        .collect();
    blocks.sort_by(|a, b| b.relevance.total_cmp(&a.relevance));
    let mut prompt = AugmentedPrompt {
        system_text: rules.system_text(),
        context_blocks: blocks,
        user_text: query.to_string(),
        estimated_tokens: 0,
        evicted: Vec::new(),
        warnings: Vec::new(),
    };
    prompt.refresh_estimate();
    fit_to_budget(prompt, budget)
}

/// Drops whole context blocks, lowest relevance first, until the prompt fits.
pub fn fit_to_budget(mut prompt: AugmentedPrompt, budget: usize) -> Result<AugmentedPrompt, PromptError> {
    let bare = AugmentedPrompt {
        context_blocks: Vec::new(),
        ..prompt.clone()
    };
    let needed = estimate_tokens(&bare.render_single());
    if needed > budget {
        return Err(PromptError::BudgetTooSmall { needed, budget });
    }
    prompt.refresh_estimate();
    while prompt.estimated_tokens > budget {
        let Some(block) = prompt.context_blocks.pop() else {
            break;
        };
        prompt.warnings.push(format!(
            "context block `{}` dropped to fit the {budget}-token budget",
            block.doc_id
        ));
        prompt.evicted.push(block.doc_id);
        prompt.refresh_estimate();
    }
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionSource {
    TaggedFence,
    AnyFence,
    WholeText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub code: String,
    pub source: ExtractionSource,
    pub warnings: Vec<String>,
}

static FENCE_OPEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^[ \t]*```[ \t]*([^\s`]*)[^\n]*\n").unwrap());
static FENCE_CLOSE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^[ \t]*```[ \t\r]*$").unwrap());

const VERILOG_TAGS: [&str; 4] = ["verilog", "v", "systemverilog", "sv"];

struct Fence<'a> {
    tag: &'a str,
    body: &'a str,
    terminated: bool,
}

fn fences(raw: &str) -> Vec<Fence<'_>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(open) = FENCE_OPEN.captures_at(raw, pos) {
        let whole = open.get(0).unwrap();
        let tag = open.get(1).map_or("", |m| m.as_str());
        let body_start = whole.end();
        match FENCE_CLOSE.find_at(raw, body_start) {
            Some(close) => {
                out.push(Fence {
                    tag,
                    body: &raw[body_start..close.start()],
                    terminated: true,
                });
                pos = close.end();
            }
            None => {
                out.push(Fence {
                    tag,
                    body: &raw[body_start..],
                    terminated: false,
                });
                break;
            }
        }
        if pos >= raw.len() {
            break;
        }
    }
    out
}

/// Pulls the generated code out of a raw model response.
///
/// Precedence: first non-empty fence tagged as Verilog, then the first
/// non-empty untagged fence, then the whole trimmed response.
pub fn extract_code(raw: &str) -> Result<ExtractionResult, PromptError> {
    if raw.trim().is_empty() {
        return Err(PromptError::EmptyResponse);
    }
    let all = fences(raw);
    let mut warnings = Vec::new();
    let pick = |f: &Fence<'_>, source, warnings: &mut Vec<String>| {
        if !f.terminated {
            warnings.push("code fence is not closed; using text up to the end of the response".into());
        }
        ExtractionResult {
            code: f.body.trim().to_string(),
            source,
            warnings: std::mem::take(warnings),
        }
    };
    let usable = |f: &&Fence<'_>| !f.body.trim().is_empty();
    if let Some(f) = all
        .iter()
        .filter(usable)
        .find(|f| VERILOG_TAGS.iter().any(|t| f.tag.eq_ignore_ascii_case(t)))
    {
        return Ok(pick(f, ExtractionSource::TaggedFence, &mut warnings));
    }
    if let Some(f) = all.iter().filter(usable).find(|f| f.tag.is_empty()) {
        return Ok(pick(f, ExtractionSource::AnyFence, &mut warnings));
    }
    if !all.is_empty() {
        warnings.push("fenced blocks were empty or not tagged as Verilog".into());
    }
    warnings.push("no fenced Verilog block found; using the whole response".into());
    Ok(ExtractionResult {
        code: raw.trim().to_string(),
        source: ExtractionSource::WholeText,
        warnings,
    })
}
