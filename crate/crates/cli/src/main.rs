//! `rtlrag`: ingest, index, query, generate, bench, report, serve.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error, 3 environment error.

mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use rtlrag::corpus::{build_documents, load_corpus, read_documents, write_documents, CorpusError, DEFAULT_BATCH_SIZE};
use rtlrag::embedding::{embedder_from_spec, EmbeddingError, DEFAULT_DIM};
use rtlrag::engine::{index_documents, Engine, EngineError};
use rtlrag::evaluation::{
    load_suite, render_tables, run_benchmark, BenchOptions, BenchReport, EvalError, ToolchainConfig, DEFAULT_K_VALUES,
};
use rtlrag::index::IndexError;
use rtlrag::llmclient::{provider_from_spec, ApiKey, GenerationConfig, LlmError, Profile, RetryPolicy};
use rtlrag::retrieval::RetrievalError;
use rtlrag::{RetrievalConfig, RetrievalMode};
use rtlrag_service::{ServiceConfig, ServiceError};

use config::{ConfigError, FileConfig};

#[derive(Parser)]
#[command(name = "rtlrag", version, about = "Retrieval-augmented Verilog generation")]
struct Cli {
    /// TOML file with defaults for paths, retrieval and generation settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus JSONL -> documents JSONL.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Documents JSONL -> index file.
    Index {
        #[arg(long)]
        documents: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embedder: Option<String>,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
    },
    /// Ranked candidates and the sampling trace for a query.
    Query {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
        query: String,
    },
    /// Full pipeline; the extracted code goes to stdout, everything else to stderr.
    Generate {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        generation: GenerationArgs,
        /// mock:PATH or openai:MODEL
        #[arg(long)]
        provider: Option<String>,
        /// Environment variable holding the API key for this run.
        #[arg(long)]
        api_key_env: Option<String>,
        query: String,
    },
    /// Runs a suite and writes a pass@k report.
    Bench {
        #[command(flatten)]
        kb: KbArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        generation: GenerationArgs,
        #[arg(long)]
        provider: Option<String>,
        #[arg(long)]
        api_key_env: Option<String>,
        #[arg(long)]
        suite: PathBuf,
        /// Toolchain TOML; defaults to iverilog/vvp.
        #[arg(long)]
        toolchain: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also run with retrieval disabled for the comparison columns.
        #[arg(long)]
        baseline: bool,
        /// Add runs to an existing report instead of replacing it.
        #[arg(long)]
        append: bool,
        #[arg(long, default_value_t = 2)]
        problem_parallelism: usize,
        #[arg(long, default_value_t = 4)]
        sample_parallelism: usize,
    },
    /// Renders a report file as syntax and functional tables.
    Report {
        report: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
    },
    /// Starts the HTTP service.
    Serve {
        #[command(flatten)]
        kb: KbArgs,
        /// Provider TOML (http and mock entries).
        #[arg(long)]
        providers: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        max_in_flight: Option<usize>,
    },
}

#[derive(Args)]
struct KbArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    documents: Option<PathBuf>,
    /// hashed, remote or remote:URL; must match the one the index was built with.
    #[arg(long)]
    embedder: Option<String>,
}

#[derive(Args)]
struct RetrievalArgs {
    /// dynamic, fixed:N or disabled
    #[arg(long)]
    mode: Option<RetrievalMode>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
}

#[derive(Args)]
struct GenerationArgs {
    /// benchmark, pass1-strict or case-study
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    k_values: Option<Vec<usize>>,
}

#[derive(Debug)]
enum Failure {
    Domain(String),
    Usage(String),
    Environment(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Environment(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Domain(m) | Failure::Usage(m) | Failure::Environment(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Environment(e.to_string()),
            ConfigError::Parse { .. } => Failure::Usage(e.to_string()),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => Failure::Environment(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Io { .. } => Failure::Environment(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for Failure {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Provider { .. } => Failure::Environment(e.to_string()),
            EmbeddingError::UnknownEmbedder(_) => Failure::Usage(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<LlmError> for Failure {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            LlmError::Transport { .. } => Failure::Environment(e.to_string()),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<RetrievalError> for Failure {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            RetrievalError::Embed(e) => e.into(),
            RetrievalError::Search(e) => e.into(),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Corpus(e) => e.into(),
            EngineError::Embedding(e) => e.into(),
            EngineError::Index(e) => e.into(),
            EngineError::Retrieval(e) => e.into(),
            EngineError::Llm(e) => e.into(),
            EngineError::Prompt(e) => Failure::Domain(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Environment(_) | EvalError::Io { .. } => Failure::Environment(e.to_string()),
            EvalError::InvalidOptions(_) | EvalError::PassAtKDomain { .. } => Failure::Usage(e.to_string()),
            EvalError::Engine(e) => e.into(),
            _ => Failure::Domain(e.to_string()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Engine(e) => e.into(),
            ServiceError::Io(_) => Failure::Environment(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

struct Ctx {
    file: FileConfig,
}

impl Ctx {
    fn embedder(&self, flag: Option<String>) -> String {
        flag.or_else(|| self.file.embedder.clone()).unwrap_or_else(|| "hashed".into())
    }

    fn path(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
        flag.or_else(|| file.clone())
            .ok_or_else(|| Failure::Usage(format!("--{name} is required (or set `{name}` in --config)")))
    }

    fn engine(&self, kb: KbArgs) -> Result<Engine, Failure> {
        let index = Self::path(kb.index, &self.file.index, "index")?;
        let documents = Self::path(kb.documents, &self.file.documents, "documents")?;
        Ok(Engine::load(&index, &documents, &self.embedder(kb.embedder))?)
    }

    fn retrieval(&self, a: RetrievalArgs) -> Result<RetrievalConfig, Failure> {
        let f = &self.file.retrieval;
        let d = RetrievalConfig::default();
        let mode = match (a.mode, &f.mode) {
            (Some(m), _) => m,
            (None, Some(s)) => s.parse().map_err(Failure::Usage)?,
            (None, None) => d.mode,
        };
        let cfg = RetrievalConfig {
            pool_size: a.pool_size.or(f.pool_size).unwrap_or(d.pool_size),
            tau: a.tau.or(f.tau).unwrap_or(d.tau),
            alpha: a.alpha.or(f.alpha).unwrap_or(d.alpha),
            k_max: a.k_max.or(f.k_max).unwrap_or(d.k_max),
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn generation(&self, a: &GenerationArgs) -> Result<(Profile, GenerationConfig), Failure> {
        let f = &self.file.generation;
        let profile = match (a.profile, &f.profile) {
            (Some(p), _) => p,
            (None, Some(s)) => s.parse().map_err(Failure::Usage)?,
            (None, None) => Profile::default(),
        };
        let d = profile.config();
        let cfg = GenerationConfig {
            temperature: a.temperature.or(f.temperature).unwrap_or(d.temperature),
            top_p: a.top_p.or(f.top_p).unwrap_or(d.top_p),
            max_new_tokens: a.max_tokens.or(f.max_tokens).unwrap_or(d.max_new_tokens),
            samples_n: a.samples.or(f.samples).unwrap_or(d.samples_n),
        };
        cfg.validate()?;
        Ok((profile, cfg))
    }

    fn provider(
        &self,
        flag: Option<String>,
        key_env: Option<String>,
    ) -> Result<Arc<dyn rtlrag::llmclient::CompletionProvider>, Failure> {
        let spec = flag
            .or_else(|| self.file.provider.clone())
            .ok_or_else(|| Failure::Usage("--provider is required (mock:PATH or openai:MODEL)".into()))?;
        let key = match key_env {
            Some(var) => Some(ApiKey::new(std::env::var(&var).map_err(|_| {
                Failure::Environment(format!("environment variable {var} is not set"))
            })?)),
            None => None,
        };
        provider_from_spec(&spec, key).map_err(|e| match e {
            LlmError::InvalidConfig(m) => Failure::Usage(m),
            other => other.into(),
        })
    }
}

fn print_query(out: &rtlrag::retrieval::RetrievalOutcome) {
    let selected: std::collections::HashSet<&str> = out.selected.iter().map(|c| c.doc_id.as_str()).collect();
    let id_w = out.pool.iter().map(|c| c.doc_id.len()).max().unwrap_or(0).max(6);
    let mod_w = out
        .pool
        .iter()
        .map(|c| c.document.module_name().map_or(1, str::len))
        .max()
        .unwrap_or(0)
        .max(6);
    let mut s = format!("rank  {:id_w$}  {:mod_w$}  relevance  distance  selected\n", "doc_id", "module");
    for (i, c) in out.pool.iter().enumerate() {
        s.push_str(&format!(
            "{:>4}  {:id_w$}  {:mod_w$}  {:>9.4}  {:>8.4}  {}\n",
            i + 1,
            c.doc_id,
            c.document.module_name().unwrap_or("-"),
            c.relevance,
            c.distance,
            if selected.contains(c.doc_id.as_str()) { "*" } else { "" }
        ));
    }
    let t = &out.trace;
    s.push_str(&format!(
        "\ntrace: filtered={} selected={} halted_at={} reason={}\ndrops: [{}]\n",
        t.filtered,
        t.selected,
        t.halted_at.map_or_else(|| "-".into(), |h| h.to_string()),
        serde_json::to_value(t.reason).unwrap().as_str().unwrap_or("?"),
        t.drops.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>().join(", ")
    ));
    print!("{s}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    let ctx = Ctx {
        file: match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        },
    };
    match cli.command {
        Command::Ingest { corpus, out } => {
            let records = load_corpus(&corpus)?;
            let docs = build_documents(&records);
            write_documents(&out, &docs)?;
            eprintln!("wrote {} documents to {}", docs.len(), out.display());
        }
        Command::Index {
            documents,
            out,
            embedder,
            dim,
            batch_size,
        } => {
            let documents = Ctx::path(documents, &ctx.file.documents, "documents")?;
            let docs = read_documents(&documents)?;
            let embedder = embedder_from_spec(&ctx.embedder(embedder), dim)?;
            let index = index_documents(embedder.as_ref(), &docs, batch_size)?;
            index.save(&out)?;
            eprintln!(
                "indexed {} documents (dim {}, {}) into {}",
                index.len(),
                index.dim(),
                embedder.name(),
                out.display()
            );
        }
        Command::Query {
            kb,
            retrieval,
            json,
            query,
        } => {
            let rcfg = ctx.retrieval(retrieval)?;
            let engine = ctx.engine(kb)?;
            let out = engine.retrieve(&query, &rcfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&out).unwrap());
            } else {
                print_query(&out);
            }
        }
        Command::Generate {
            kb,
            retrieval,
            generation,
            provider,
            api_key_env,
            query,
        } => {
            let rcfg = ctx.retrieval(retrieval)?;
            let (_, mut gcfg) = ctx.generation(&generation)?;
            gcfg.samples_n = 1;
            let provider = ctx.provider(provider, api_key_env)?;
            let engine = ctx.engine(kb)?;
            let run = engine.generate(provider.as_ref(), &query, &rcfg, &gcfg, &RetryPolicy::default())?;
            let ids: Vec<&str> = run.retrieval.selected.iter().map(|c| c.doc_id.as_str()).collect();
            eprintln!("provider: {}", provider.name());
            eprintln!("retrieved: [{}]", ids.join(", "));
            if !run.prompt.evicted.is_empty() {
                eprintln!("evicted for budget: [{}]", run.prompt.evicted.join(", "));
            }
            for w in run.prompt.warnings.iter().chain(&run.extraction.warnings) {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "timings ms: retrieval {:.1}, prompt {:.1}, generation {:.1}, extraction {:.1}",
                run.timings.retrieval_ms, run.timings.prompt_ms, run.timings.generation_ms, run.timings.extraction_ms
            );
            let mut stdout = std::io::stdout().lock();
            let code = run.extraction.code;
            let _ = stdout.write_all(code.as_bytes());
            if !code.ends_with('\n') {
                let _ = stdout.write_all(b"\n");
            }
        }
        Command::Bench {
            kb,
            retrieval,
            generation,
            provider,
            api_key_env,
            suite,
            toolchain,
            out,
            baseline,
            append,
            problem_parallelism,
            sample_parallelism,
        } => {
            let rcfg = ctx.retrieval(retrieval)?;
            let (profile, gcfg) = ctx.generation(&generation)?;
            let k_values = generation
                .k_values
                .clone()
                .or_else(|| ctx.file.k_values.clone())
                .unwrap_or_else(|| DEFAULT_K_VALUES.to_vec());
            let toolchain = match toolchain.or_else(|| ctx.file.toolchain.clone()) {
                Some(p) => ToolchainConfig::from_toml_file(&p)?,
                None => ToolchainConfig::default(),
            };
            let provider = ctx.provider(provider, api_key_env)?;
            let suite = load_suite(&suite)?;
            let engine = ctx.engine(kb)?;
            let opts = BenchOptions {
                retrieval: rcfg,
                generation: gcfg,
                profile,
                toolchain,
                k_values,
                retry: RetryPolicy::default(),
                problem_parallelism,
                sample_parallelism,
            };
            let mut report = if append && out.exists() {
                BenchReport::load(&out)?
            } else {
                BenchReport::default()
            };
            let ks = opts.k_values.clone();
            if baseline {
                let mut base = opts.clone();
                base.retrieval.mode = RetrievalMode::Disabled;
                report.runs.push(run_benchmark(&engine, provider.as_ref(), &suite, &base)?);
            }
            report.runs.push(run_benchmark(&engine, provider.as_ref(), &suite, &opts)?);
            report.save(&out)?;
            for r in &report.runs {
                for p in r.problems.iter().filter(|p| p.skipped.is_some()) {
                    eprintln!("skipped {}: {}", p.id, p.skipped.as_deref().unwrap_or(""));
                }
            }
            print!("{}", render_tables(&report, &ks));
            eprintln!("report written to {}", out.display());
        }
        Command::Report { report, k_values } => {
            let report = BenchReport::load(&report)?;
            let ks = k_values.unwrap_or_else(|| {
                let mut ks: Vec<usize> = report.runs.iter().flat_map(|r| r.k_values.iter().copied()).collect();
                ks.sort_unstable();
                ks.dedup();
                ks
            });
            print!("{}", render_tables(&report, &ks));
        }
        Command::Serve {
            kb,
            providers,
            bind,
            max_in_flight,
        } => {
            let var = |n: &str| std::env::var(n).ok().filter(|v| !v.is_empty());
            let index = kb
                .index
                .or_else(|| ctx.file.index.clone())
                .or_else(|| var("RTLRAG_INDEX").map(PathBuf::from));
            let documents = kb
                .documents
                .or_else(|| ctx.file.documents.clone())
                .or_else(|| var("RTLRAG_DOCUMENTS").map(PathBuf::from));
            let cfg = ServiceConfig {
                index: Ctx::path(index, &None, "index")?,
                documents: Ctx::path(documents, &None, "documents")?,
                embedder: kb
                    .embedder
                    .or_else(|| ctx.file.embedder.clone())
                    .or_else(|| var("RTLRAG_EMBEDDER"))
                    .unwrap_or_else(|| "hashed".into()),
                providers: providers.or_else(|| var("RTLRAG_PROVIDERS").map(PathBuf::from)),
                bind: bind
                    .or_else(|| var("RTLRAG_BIND"))
                    .unwrap_or_else(|| rtlrag_service::DEFAULT_BIND.into())
                    .parse()
                    .map_err(|e| Failure::Usage(format!("--bind: {e}")))?,
                max_in_flight: max_in_flight.unwrap_or(rtlrag_service::DEFAULT_MAX_IN_FLIGHT).max(1),
            };
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Failure::Environment(format!("cannot start runtime: {e}")))?;
            rt.block_on(rtlrag_service::serve(cfg))?;
        }
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        2 => tracing::Level::DEBUG,
        _ => tracing::Level::TRACE,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
