//! Two-stage validation (compile, then simulate) and pass@k scoring.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::engine::{Engine, EngineError};
use crate::llmclient::{CompletionProvider, GenerationConfig, Profile, RetryPolicy};
use crate::promptgen::{extract_code, ExtractionSource};
use crate::retrieval::RetrievalConfig;

pub const DEFAULT_K_VALUES: [usize; 3] = [1, 5, 10];
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;
const MAX_LOG_BYTES: usize = 64 * 1024;
const DESIGN_FILE: &str = "design.v";
const TESTBENCH_FILE: &str = "tb.v";
const OUT_FILE: &str = "sim.out";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("pass@k undefined for n={n}, c={c}, k={k}: need 1 <= k <= n and 0 <= c <= n")]
    PassAtKDomain { n: i64, c: i64, k: i64 },
    /// The toolchain could not run at all; distinct from a failed compile.
    #[error("toolchain environment error: {0}")]
    Environment(String),
    #[error("invalid toolchain config: {0}")]
    Toolchain(String),
    #[error("suite line {line}: {message}")]
    Suite { line: usize, message: String },
    #[error("invalid benchmark options: {0}")]
    InvalidOptions(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)`.
///
/// The ratio is taken as a running product so no binomial is ever formed.
pub fn pass_at_k(n: i64, c: i64, k: i64) -> Result<f64, EvalError> {
    if n < 1 || c < 0 || c > n || k < 1 || k > n {
        return Err(EvalError::PassAtKDomain { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut miss = 1.0f64;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolchainConfig {
    /// Stage 1. Placeholders: `{files}`, `{out}`, `{dir}`.
    pub compile_cmd: String,
    /// Stage 2 build step over design and testbench; empty to skip.
    pub sim_compile_cmd: String,
    /// Stage 2 run step; its output is scanned for markers. Empty to skip.
    pub sim_run_cmd: String,
    /// Required in simulation output when set.
    pub pass_marker: Option<String>,
    /// Forbidden in simulation output when set.
    pub fail_marker: Option<String>,
    pub timeout_s: f64,
}

impl Default for ToolchainConfig {
    fn default() -> Self {
        Self {
            compile_cmd: "iverilog -g2005 -o {out} {files}".into(),
            sim_compile_cmd: "iverilog -g2005 -o {out} {files}".into(),
            sim_run_cmd: "vvp -n {out}".into(),
            pass_marker: Some("PASSED".into()),
            fail_marker: Some("MISMATCH".into()),
            timeout_s: DEFAULT_TIMEOUT_S,
        }
    }
}

impl ToolchainConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.compile_cmd.trim().is_empty() {
            return Err(EvalError::Toolchain("compile_cmd is empty".into()));
        }
        if self.sim_compile_cmd.trim().is_empty() && self.sim_run_cmd.trim().is_empty() {
            return Err(EvalError::Toolchain(
                "at least one of sim_compile_cmd and sim_run_cmd must be set".into(),
            ));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(EvalError::Toolchain(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| EvalError::Toolchain(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Result of one toolchain stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub ok: bool,
    pub timed_out: bool,
    pub log: String,
}

struct CommandOutput {
    status: Option<i32>,
    timed_out: bool,
    log: String,
}

fn quote(path: &Path) -> Result<String, EvalError> {
    let s = path.to_str().ok_or_else(|| EvalError::Environment("temp path is not UTF-8".into()))?;
    shlex::try_quote(s)
        .map(|q| q.into_owned())
        .map_err(|e| EvalError::Environment(format!("cannot quote {s}: {e}")))
}

fn render_template(template: &str, dir: &Path, files: &[PathBuf]) -> Result<String, EvalError> {
    let files = files.iter().map(|f| quote(f)).collect::<Result<Vec<_>, _>>()?.join(" ");
    Ok(template
        .replace("{files}", &files)
        .replace("{out}", &quote(&dir.join(OUT_FILE))?)
        .replace("{dir}", &quote(dir)?))
}

fn drain<R: Read>(mut reader: R) -> Vec<u8> {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = MAX_LOG_BYTES.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
            }
        }
    }
    kept
}

#[cfg(unix)]
fn kill_tree(child: &mut std::process::Child) {
    // The child leads its own process group, so this reaches anything it spawned.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}

#[cfg(not(unix))]
fn kill_tree(child: &mut std::process::Child) {
    let _ = child.kill();
}

fn run_command(template: &str, dir: &Path, files: &[PathBuf], timeout: Duration) -> Result<CommandOutput, EvalError> {
    let rendered = render_template(template, dir, files)?;
    tracing::debug!(command = %rendered, "running toolchain step");
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&rendered)
        .current_dir(dir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| EvalError::Environment(format!("cannot start shell for `{rendered}`: {e}")))?;
    let out = child.stdout.take().map(|s| std::thread::spawn(move || drain(s)));
    let err = child.stderr.take().map(|s| std::thread::spawn(move || drain(s)));
    let waited = child
        .wait_timeout(timeout)
        .map_err(|e| EvalError::Environment(format!("waiting on `{rendered}`: {e}")))?;
    let (status, timed_out) = match waited {
        Some(status) => {
            // Reap stragglers that still hold the pipes open.
            #[cfg(unix)]
            unsafe {
                libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
            }
            (status.code(), false)
        }
        None => {
            kill_tree(&mut child);
            let _ = child.wait();
            (None, true)
        }
    };
    let mut log = String::new();
    for handle in [out, err].into_iter().flatten() {
        let bytes = handle.join().unwrap_or_default();
        log.push_str(&String::from_utf8_lossy(&bytes));
    }
    if timed_out {
        let _ = writeln!(log, "[timed out after {:.1}s]", timeout.as_secs_f64());
    }
    if matches!(status, Some(126) | Some(127)) {
        return Err(EvalError::Environment(format!(
            "`{rendered}` could not run (exit {}): {}",
            status.unwrap(),
            log.trim()
        )));
    }
    Ok(CommandOutput {
        status,
        timed_out,
        log,
    })
}

fn scratch_dir() -> Result<tempfile::TempDir, EvalError> {
    tempfile::Builder::new()
        .prefix("rtlrag-eval-")
        .tempdir()
        .map_err(|e| EvalError::Environment(format!("cannot create temp dir: {e}")))
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, EvalError> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(io_err(&path))?;
    Ok(path)
}

/// Stage 1: compiles the design alone. `ok` is true when the compiler exits 0.
pub fn check_syntax(code: &str, toolchain: &ToolchainConfig) -> Result<StageResult, EvalError> {
    toolchain.validate()?;
    let dir = scratch_dir()?;
    let design = write_file(dir.path(), DESIGN_FILE, code)?;
    let out = run_command(
        &toolchain.compile_cmd,
        dir.path(),
        &[design],
        Duration::from_secs_f64(toolchain.timeout_s),
    )?;
    Ok(StageResult {
        ok: out.status == Some(0) && !out.timed_out,
        timed_out: out.timed_out,
        log: out.log,
    })
}

/// An extra file placed next to the design during simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub content: String,
}

fn is_hdl_source(name: &str) -> bool {
    name.ends_with(".v") || name.ends_with(".sv") || name.ends_with(".vh")
}

/// Stage 2: builds design plus testbench and runs the simulation.
///
/// Callers run this only for designs that passed stage 1.
pub fn check_function(
    code: &str,
    testbench: &str,
    artifacts: &[Artifact],
    toolchain: &ToolchainConfig,
    timeout_s: Option<f64>,
) -> Result<StageResult, EvalError> {
    toolchain.validate()?;
    let timeout = Duration::from_secs_f64(timeout_s.unwrap_or(toolchain.timeout_s));
    let dir = scratch_dir()?;
    let mut files = vec![write_file(dir.path(), DESIGN_FILE, code)?];
    for a in artifacts {
        if a.name.contains('/') || a.name.contains('\\') || a.name.starts_with('.') {
            return Err(EvalError::Toolchain(format!("artifact name `{}` is not a plain file name", a.name)));
        }
        let path = write_file(dir.path(), &a.name, &a.content)?;
        if is_hdl_source(&a.name) {
            files.push(path);
        }
    }
    files.push(write_file(dir.path(), TESTBENCH_FILE, testbench)?);

    let mut log = String::new();
    let mut last = None;
    for step in [&toolchain.sim_compile_cmd, &toolchain.sim_run_cmd] {
        if step.trim().is_empty() {
            continue;
        }
        let out = run_command(step, dir.path(), &files, timeout)?;
        log.push_str(&out.log);
        let failed = out.status != Some(0) || out.timed_out;
        last = Some(out);
        if failed {
            break;
        }
    }
    let out = last.expect("validate guarantees one simulation step");
    let exit_ok = out.status == Some(0) && !out.timed_out;
    let no_mismatch = toolchain.fail_marker.as_ref().is_none_or(|m| !out.log.contains(m.as_str()));
    let marker_seen = toolchain.pass_marker.as_ref().is_none_or(|m| out.log.contains(m.as_str()));
    Ok(StageResult {
        ok: exit_ok && no_mismatch && marker_seen,
        timed_out: out.timed_out,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkProblem {
    pub id: String,
    pub prompt_text: String,
    pub testbench: String,
    #[serde(default)]
    pub reference_artifacts: Vec<Artifact>,
    #[serde(default)]
    pub k_values: Option<Vec<usize>>,
    #[serde(default)]
    pub timeout_s: Option<f64>,
}

/// Reads a newline-delimited suite file.
pub fn parse_suite<R: BufRead>(reader: R) -> Result<Vec<BenchmarkProblem>, EvalError> {
    let mut problems = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let suite_err = |message: String| EvalError::Suite { line: line_no, message };
        let line = line.map_err(|e| suite_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: BenchmarkProblem = serde_json::from_str(&line).map_err(|e| suite_err(e.to_string()))?;
        if p.id.trim().is_empty() {
            return Err(suite_err("field `id` is empty".into()));
        }
        if p.prompt_text.trim().is_empty() {
            return Err(suite_err("field `prompt_text` is empty".into()));
        }
        if p.testbench.trim().is_empty() {
            return Err(suite_err("field `testbench` is empty".into()));
        }
        if p.k_values.as_ref().is_some_and(|ks| ks.is_empty() || ks.contains(&0)) {
            return Err(suite_err("field `k_values` must hold positive integers".into()));
        }
        if p.timeout_s.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
            return Err(suite_err("field `timeout_s` must be positive".into()));
        }
        if let Some(first) = seen.insert(p.id.clone(), line_no) {
            return Err(suite_err(format!("duplicate id `{}` (first on line {first})", p.id)));
        }
        problems.push(p);
    }
    Ok(problems)
}

pub fn load_suite(path: &Path) -> Result<Vec<BenchmarkProblem>, EvalError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_suite(BufReader::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub problem_id: String,
    pub sample_index: usize,
    pub compiled: bool,
    /// Never true unless `compiled` is.
    pub passed: bool,
    pub timed_out: bool,
    pub compiler_log: String,
    pub sim_log: String,
    pub extraction: Option<ExtractionSource>,
    /// Generation or extraction failure that kept the sample from the toolchain.
    pub error: Option<String>,
}

impl EvalOutcome {
    fn failed(problem_id: &str, sample_index: usize, error: String) -> Self {
        Self {
            problem_id: problem_id.to_string(),
            sample_index,
            compiled: false,
            passed: false,
            timed_out: false,
            compiler_log: String::new(),
            sim_log: String::new(),
            extraction: None,
            error: Some(error),
        }
    }
}

/// Runs both stages on one generated response.
pub fn evaluate_sample(
    problem: &BenchmarkProblem,
    sample_index: usize,
    raw_response: &str,
    toolchain: &ToolchainConfig,
) -> Result<EvalOutcome, EvalError> {
    let extraction = match extract_code(raw_response) {
        Ok(x) => x,
        Err(e) => return Ok(EvalOutcome::failed(&problem.id, sample_index, e.to_string())),
    };
    let syntax = check_syntax(&extraction.code, toolchain)?;
    let mut outcome = EvalOutcome {
        problem_id: problem.id.clone(),
        sample_index,
        compiled: syntax.ok,
        passed: false,
        timed_out: syntax.timed_out,
        compiler_log: syntax.log,
        sim_log: String::new(),
        extraction: Some(extraction.source),
        error: None,
    };
    if outcome.compiled {
        let sim = check_function(
            &extraction.code,
            &problem.testbench,
            &problem.reference_artifacts,
            toolchain,
            problem.timeout_s,
        )?;
        outcome.passed = sim.ok;
        outcome.timed_out = sim.timed_out;
        outcome.sim_log = sim.log;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemResult {
    pub id: String,
    pub n: usize,
    pub c_syntax: usize,
    pub c_func: usize,
    pub k_values: Vec<usize>,
    /// Set when an environment error kept the problem out of the aggregate.
    pub skipped: Option<String>,
    pub retrieved: Vec<String>,
    pub outcomes: Vec<EvalOutcome>,
}

impl ProblemResult {
    pub fn from_outcomes(id: &str, k_values: Vec<usize>, retrieved: Vec<String>, outcomes: Vec<EvalOutcome>) -> Self {
        Self {
            id: id.to_string(),
            n: outcomes.len(),
            c_syntax: outcomes.iter().filter(|o| o.compiled).count(),
            c_func: outcomes.iter().filter(|o| o.passed).count(),
            k_values,
            skipped: None,
            retrieved,
            outcomes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k: usize,
    pub estimate: f64,
    /// Problems contributing to the mean.
    pub problems: usize,
}

/// Identifies the configuration that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub retrieval_mode: String,
    pub generation_profile: String,
    pub provider: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub samples_n: usize,
    pub pool_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub k_max: usize,
}

impl Fingerprint {
    pub fn new(provider: &str, profile: Profile, r: &RetrievalConfig, g: &GenerationConfig) -> Self {
        Self {
            retrieval_mode: r.mode.to_string(),
            generation_profile: profile.to_string(),
            provider: provider.to_string(),
            temperature: g.temperature,
            top_p: g.top_p,
            max_new_tokens: g.max_new_tokens,
            samples_n: g.samples_n,
            pool_size: r.pool_size,
            tau: r.tau,
            alpha: r.alpha,
            k_max: r.k_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKReport {
    pub fingerprint: Fingerprint,
    pub k_values: Vec<usize>,
    pub problems: Vec<ProblemResult>,
    pub syntax: Vec<KEstimate>,
    pub functional: Vec<KEstimate>,
}

impl PassAtKReport {
    pub fn syntax_at(&self, k: usize) -> Option<f64> {
        self.syntax.iter().find(|e| e.k == k).map(|e| e.estimate)
    }

    pub fn functional_at(&self, k: usize) -> Option<f64> {
        self.functional.iter().find(|e| e.k == k).map(|e| e.estimate)
    }
}

/// Mean over problems of per-problem estimates, for every k any problem asks for.
///
/// Problems are summed in id order so the result does not depend on the
/// order they were evaluated in.
pub fn aggregate(problems: &[ProblemResult]) -> Result<(Vec<KEstimate>, Vec<KEstimate>), EvalError> {
    let mut ordered: Vec<&ProblemResult> = problems.iter().filter(|p| p.skipped.is_none()).collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let ks: BTreeSet<usize> = ordered.iter().flat_map(|p| p.k_values.iter().copied()).collect();
    let mut syntax = Vec::new();
    let mut functional = Vec::new();
    for k in ks {
        let members: Vec<&&ProblemResult> = ordered.iter().filter(|p| p.k_values.contains(&k) && p.n >= k).collect();
        if members.is_empty() {
            continue;
        }
        let (mut s, mut f) = (0.0, 0.0);
        for p in &members {
            s += pass_at_k(p.n as i64, p.c_syntax as i64, k as i64)?;
            f += pass_at_k(p.n as i64, p.c_func as i64, k as i64)?;
        }
        let m = members.len();
        syntax.push(KEstimate {
            k,
            estimate: s / m as f64,
            problems: m,
        });
        functional.push(KEstimate {
            k,
            estimate: f / m as f64,
            problems: m,
        });
    }
    Ok((syntax, functional))
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub retrieval: RetrievalConfig,
    pub generation: GenerationConfig,
    pub profile: Profile,
    pub toolchain: ToolchainConfig,
    pub k_values: Vec<usize>,
    pub retry: RetryPolicy,
    pub problem_parallelism: usize,
    pub sample_parallelism: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            generation: Profile::Benchmark.config(),
            profile: Profile::Benchmark,
            toolchain: ToolchainConfig::default(),
            k_values: DEFAULT_K_VALUES.to_vec(),
            retry: RetryPolicy::default(),
            problem_parallelism: 2,
            sample_parallelism: 4,
        }
    }
}

fn evaluate_problem(
    engine: &Engine,
    provider: &dyn CompletionProvider,
    problem: &BenchmarkProblem,
    opts: &BenchOptions,
) -> Result<ProblemResult, EvalError> {
    let n = opts.generation.samples_n;
    let k_values = problem.k_values.clone().unwrap_or_else(|| opts.k_values.clone());
    let prepared = match engine.prepare(&problem.prompt_text, &opts.retrieval) {
        Ok(p) => p,
        Err(e) => {
            let outcomes = (0..n).map(|i| EvalOutcome::failed(&problem.id, i, e.to_string())).collect();
            return Ok(ProblemResult::from_outcomes(&problem.id, k_values, Vec::new(), outcomes));
        }
    };
    let retrieved: Vec<String> = prepared.prompt.context_blocks.iter().map(|b| b.doc_id.clone()).collect();
    let responses: Vec<Result<String, String>> =
        match engine.generate_samples(provider, &prepared.prompt, &opts.generation, &opts.retry, opts.sample_parallelism) {
            Ok(batch) => batch
                .samples
                .into_iter()
                .map(|s| s.map(|c| c.text).map_err(|e| e.to_string()))
                .collect(),
            Err(e) => vec![Err(e.to_string()); n],
        };
    let mut outcomes = Vec::with_capacity(n);
    for (i, response) in responses.into_iter().enumerate() {
        let outcome = match response {
            Ok(text) => evaluate_sample(problem, i, &text, &opts.toolchain)?,
            Err(e) => EvalOutcome::failed(&problem.id, i, e),
        };
        outcomes.push(outcome);
    }
    Ok(ProblemResult::from_outcomes(&problem.id, k_values, retrieved, outcomes))
}

/// Generates `samples_n` responses per problem and scores them with both stages.
///
/// A problem hitting an environment error is marked skipped; the run fails
/// only when every problem was skipped that way.
pub fn run_benchmark(
    engine: &Engine,
    provider: &dyn CompletionProvider,
    suite: &[BenchmarkProblem],
    opts: &BenchOptions,
) -> Result<PassAtKReport, EvalError> {
    if suite.is_empty() {
        return Err(EvalError::InvalidOptions("suite is empty".into()));
    }
    opts.retrieval
        .validate()
        .map_err(|e| EvalError::InvalidOptions(e.to_string()))?;
    opts.generation
        .validate()
        .map_err(|e| EvalError::InvalidOptions(e.to_string()))?;
    opts.toolchain.validate()?;
    let n = opts.generation.samples_n;
    for p in suite {
        let ks = p.k_values.as_ref().unwrap_or(&opts.k_values);
        if let Some(k) = ks.iter().find(|&&k| k == 0 || k > n) {
            return Err(EvalError::InvalidOptions(format!(
                "problem `{}`: k={k} is outside 1..={n} (samples per problem)",
                p.id
            )));
        }
    }

    let slots: Vec<Mutex<Option<ProblemResult>>> = suite.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.problem_parallelism.max(1).min(suite.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= suite.len() {
                    break;
                }
                let problem = &suite[i];
                let result = match evaluate_problem(engine, provider, problem, opts) {
                    Ok(r) => r,
                    Err(e) => {
                        tracing::warn!(problem = %problem.id, error = %e, "problem skipped");
                        ProblemResult {
                            id: problem.id.clone(),
                            n: 0,
                            c_syntax: 0,
                            c_func: 0,
                            k_values: Vec::new(),
                            skipped: Some(e.to_string()),
                            retrieved: Vec::new(),
                            outcomes: Vec::new(),
                        }
                    }
                };
                tracing::info!(
                    problem = %result.id,
                    n = result.n,
                    c_syntax = result.c_syntax,
                    c_func = result.c_func,
                    "problem evaluated"
                );
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let problems: Vec<ProblemResult> = slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every problem slot is filled"))
        .collect();
    if let Some(reason) = problems.iter().map(|p| p.skipped.as_ref()).collect::<Option<Vec<_>>>() {
        return Err(EvalError::Environment(format!(
            "every problem was skipped; first reason: {}",
            reason[0]
        )));
    }
    let (syntax, functional) = aggregate(&problems)?;
    let k_values: Vec<usize> = syntax.iter().map(|e| e.k).collect();
    Ok(PassAtKReport {
        fingerprint: Fingerprint::new(provider.name(), opts.profile, &opts.retrieval, &opts.generation),
        k_values,
        problems,
        syntax,
        functional,
    })
}

/// The machine-readable report file: one or more runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<PassAtKReport>,
}

impl BenchReport {
    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }
}

fn is_baseline(r: &PassAtKReport) -> bool {
    r.fingerprint.retrieval_mode == "disabled"
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn delta(rag: Option<f64>, base: Option<f64>) -> String {
    match (rag, base) {
        (Some(r), Some(b)) => format!("{:+.1}", 100.0 * (r - b)),
        _ => "-".to_string(),
    }
}

/// Syntax and functional tables: baseline, RAG and improvement per k, one row
/// per provider/profile/mode.
pub fn render_tables(report: &BenchReport, ks: &[usize]) -> String {
    type Row<'a> = (String, Option<&'a PassAtKReport>, Option<&'a PassAtKReport>);
    let mut rows: Vec<Row> = Vec::new();
    let mut baselines: BTreeMap<(String, String), &PassAtKReport> = BTreeMap::new();
    for r in report.runs.iter().filter(|r| is_baseline(r)) {
        let key = (r.fingerprint.provider.clone(), r.fingerprint.generation_profile.clone());
        baselines.entry(key).or_insert(r);
    }
    let mut paired = BTreeSet::new();
    for r in report.runs.iter().filter(|r| !is_baseline(r)) {
        let key = (r.fingerprint.provider.clone(), r.fingerprint.generation_profile.clone());
        let base = baselines.get(&key).copied();
        paired.insert(key.clone());
        rows.push((
            format!("{} ({}, {})", key.0, key.1, r.fingerprint.retrieval_mode),
            base,
            Some(r),
        ));
    }
    for (key, base) in &baselines {
        if !paired.contains(key) {
            rows.push((format!("{} ({})", key.0, key.1), Some(*base), None));
        }
    }

    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Model".len());
    let col = 7;
    let group_w = ks.len() * col;
    let mut out = String::new();
    type Getter = fn(&PassAtKReport, usize) -> Option<f64>;
    let tables: [(&str, Getter); 2] = [
        ("Syntax correctness, pass@k (%)", PassAtKReport::syntax_at),
        ("Functional correctness, pass@k (%)", PassAtKReport::functional_at),
    ];
    for (title, get) in tables {
        let _ = writeln!(out, "{title}");
        let _ = writeln!(
            out,
            "{:<label_w$} | {:<group_w$} | {:<group_w$} | {:<group_w$}",
            "Model", "Baseline", "RAG", "Improvement"
        );
        let ks_hdr: String = ks.iter().map(|k| format!("{:<col$}", format!("@{k}"))).collect();
        let _ = writeln!(out, "{:<label_w$} | {ks_hdr} | {ks_hdr} | {ks_hdr}", "");
        for (label, base, rag) in &rows {
            let b: Vec<Option<f64>> = ks.iter().map(|&k| base.and_then(|r| get(r, k))).collect();
            let r: Vec<Option<f64>> = ks.iter().map(|&k| rag.and_then(|r| get(r, k))).collect();
            let cells = |vals: Vec<String>| vals.iter().map(|v| format!("{v:<col$}")).collect::<String>();
            let _ = writeln!(
                out,
                "{label:<label_w$} | {} | {} | {}",
                cells(b.iter().map(|v| pct(*v)).collect()),
                cells(r.iter().map(|v| pct(*v)).collect()),
                cells(r.iter().zip(&b).map(|(r, b)| delta(*r, *b)).collect()),
            );
        }
        out.push('\n');
    }
    out
}
