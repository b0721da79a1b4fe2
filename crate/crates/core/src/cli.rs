//! Command-line interface.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{HttpChatBackend, ModelBackend, ScriptedBackend, ENDPOINT_ENV};
use crate::classifier::PromptSet;
use crate::deptable::DependencyTable;
use crate::eval::evaluate;
use crate::harvest::DateSource;
use crate::hosting::{FixtureTransport, GithubClient, ResponseCache};
use crate::orchestrator::Orchestrator;
use crate::pipeline::{cmd_mine, MineServices, PipelineConfig, PipelineError, DEFAULT_OUT_DIR};
use crate::runtime::{ContainerRuntime, DockerRuntime, FakeRuntime, LocalRuntime};
use crate::store::{EntryFilter, Store, StoreError, Verification};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_UNAVAILABLE: i32 = 69;
pub const EXIT_SOFTWARE: i32 = 70;
pub const EXIT_NO_PERMISSION: i32 = 77;
pub const EXIT_CONFIG: i32 = 78;

#[derive(Debug, Parser)]
#[command(name = "perfmine", version, about = "Mine execution-time-improving commits from C++ repositories")]
pub struct Cli {
    /// Output directory holding the store, logs and runtime state.
    #[arg(long, global = true, default_value = DEFAULT_OUT_DIR)]
    pub out: PathBuf,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Discover repositories and mine commits into the store.
    Mine(MineArgs),
    /// Score a candidate patch against a stored entry.
    Evaluate(EvaluateArgs),
    /// List stored entries.
    Inspect(InspectArgs),
    /// Record a manual review decision for an entry.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuntimeKind {
    Docker,
    Podman,
    /// Host toolchain in per-container directories; no package installs.
    Local,
    /// Simulated builds and tests driven by source directives.
    Fake,
}

#[derive(Debug, Args)]
pub struct RuntimeArgs {
    #[arg(long, value_enum, default_value = "docker")]
    pub runtime: RuntimeKind,
    /// Shorthand for `--runtime fake`.
    #[arg(long)]
    pub fake_runtime: bool,
    #[arg(long)]
    pub container_cpus: Option<f64>,
    /// Memory limit in the runtime's syntax, e.g. 4g.
    #[arg(long)]
    pub container_memory: Option<String>,
    /// Timing runs per version; the first is a warm-up.
    #[arg(long, default_value_t = crate::orchestrator::DEFAULT_RUNS)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Minimum relative median improvement.
    #[arg(long, default_value_t = 0.05)]
    pub min_improvement: f64,
    /// Largest n*m for which exact p-values are computed.
    #[arg(long, default_value_t = crate::stats::DEFAULT_EXACT_THRESHOLD)]
    pub exact_threshold: usize,
}

impl RuntimeArgs {
    fn kind(&self) -> RuntimeKind {
        if self.fake_runtime {
            RuntimeKind::Fake
        } else {
            self.runtime
        }
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub runtime: RuntimeArgs,
    #[arg(long, default_value_t = 300)]
    pub min_stars: u64,
    #[arg(long, default_value = "C++")]
    pub language: String,
    #[arg(long, default_value_t = 10)]
    pub page_limit: u32,
    #[arg(long, default_value_t = 100)]
    pub per_page: u32,
    #[arg(long)]
    pub include_forks: bool,
    #[arg(long)]
    pub exclude_archived: bool,
    /// First day of the commit window (inclusive).
    #[arg(long, default_value = "2020-01-01")]
    pub since: NaiveDate,
    /// Last day of the commit window (inclusive).
    #[arg(long, default_value = "2025-12-31")]
    pub until: NaiveDate,
    #[arg(long, default_value_t = 20)]
    pub max_files: usize,
    #[arg(long, value_enum, default_value = "author")]
    pub date_source: DateSourceArg,
    #[arg(long, default_value_t = crate::orchestrator::DEFAULT_MAX_REPAIR_ROUNDS)]
    pub max_repair_rounds: usize,
    /// Commits built concurrently.
    #[arg(long, default_value_t = 1)]
    pub max_containers: usize,
    /// Model identifiers for the two phase-1 votes.
    #[arg(long, num_args = 2, value_names = ["FIRST", "SECOND"])]
    pub phase1_backends: Option<Vec<String>>,
    #[arg(long)]
    pub phase2_backend: Option<String>,
    /// OpenAI-compatible chat endpoint for the classifier and repair.
    #[arg(long, env = ENDPOINT_ENV)]
    pub llm_endpoint: Option<String>,
    /// Model requests in flight at once.
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Answer model prompts from a script file instead of an endpoint.
    #[arg(long, value_name = "SCRIPT")]
    pub stub_backends: Option<PathBuf>,
    /// Serve hosting API responses from a transcript file.
    #[arg(long, value_name = "TRANSCRIPT")]
    pub fixture_api: Option<PathBuf>,
    #[arg(long)]
    pub api_base: Option<String>,
    /// Replace the shipped missing-dependency table.
    #[arg(long)]
    pub dep_table: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DateSourceArg {
    Author,
    Committer,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub runtime: RuntimeArgs,
    #[arg(long)]
    pub patch_id: String,
    /// Unified diff to evaluate.
    #[arg(long)]
    pub patch_file: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// `owner/name`.
    #[arg(long)]
    pub repo: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub multi_file: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub has_significant_test: Option<bool>,
    #[arg(long, value_enum)]
    pub verified: Option<Verification>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub patch_id: String,
    #[arg(long, conflicts_with = "reject", required_unless_present = "reject")]
    pub accept: bool,
    #[arg(long)]
    pub reject: bool,
    /// Reviewer note, e.g. which retention criterion applies.
    #[arg(long)]
    pub note: Option<String>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn fail(code: i32, error: impl Into<anyhow::Error>) -> Failure {
    Failure { code, error: error.into() }
}

fn day_start(d: NaiveDate) -> DateTime<Utc> {
    d.and_hms_opt(0, 0, 0).expect("midnight").and_utc()
}

fn day_end(d: NaiveDate) -> DateTime<Utc> {
    d.and_hms_opt(23, 59, 59).expect("end of day").and_utc()
}

/// Builds the effective pipeline configuration from `mine` flags.
pub fn pipeline_config(out: &Path, args: &MineArgs) -> PipelineConfig {
    let mut c = PipelineConfig { out_dir: out.to_owned(), max_containers: args.max_containers, ..Default::default() };
    c.discovery.min_stars = args.min_stars;
    c.discovery.language = args.language.clone();
    c.discovery.page_limit = args.page_limit;
    c.discovery.per_page = args.per_page;
    c.discovery.include_forks = args.include_forks;
    c.discovery.include_archived = !args.exclude_archived;
    c.harvest.since = day_start(args.since);
    c.harvest.until = day_end(args.until);
    c.harvest.max_files = args.max_files;
    c.harvest.date_source = match args.date_source {
        DateSourceArg::Author => DateSource::Author,
        DateSourceArg::Committer => DateSource::Committer,
    };
    if let Some([a, b]) = args.phase1_backends.as_deref() {
        c.backends.phase1_backends = [a.clone(), b.clone()];
    }
    if let Some(p) = &args.phase2_backend {
        c.backends.phase2_backend = p.clone();
    }
    c.backends.endpoint = args.llm_endpoint.clone();
    c.backends.max_in_flight = args.max_in_flight;
    apply_runtime_args(&mut c, &args.runtime);
    c.orchestration.max_repair_rounds = args.max_repair_rounds;
    c
}

fn apply_runtime_args(c: &mut PipelineConfig, r: &RuntimeArgs) {
    c.orchestration.runs = r.runs;
    c.orchestration.limits.cpus = r.container_cpus;
    c.orchestration.limits.memory = r.container_memory.clone();
    c.stats.alpha = r.alpha;
    c.stats.delta = r.min_improvement;
    c.stats.exact_threshold = r.exact_threshold;
}

fn make_runtime(kind: RuntimeKind, out: &Path) -> Box<dyn ContainerRuntime> {
    match kind {
        RuntimeKind::Docker => Box::new(DockerRuntime::new("docker")),
        RuntimeKind::Podman => Box::new(DockerRuntime::new("podman")),
        RuntimeKind::Local => Box::new(LocalRuntime::new(out.join(".local-runtime"))),
        RuntimeKind::Fake => Box::new(FakeRuntime::new(out.join(".fake-runtime"))),
    }
}

fn run_mine(out: &Path, args: &MineArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let config = pipeline_config(out, args);
    writeln!(stdout, "effective config:\n{}", serde_json::to_string_pretty(&config).expect("config serializes"))
        .map_err(|e| fail(EXIT_SOFTWARE, e))?;
    config.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    if args.dry_run {
        return Ok(EXIT_OK);
    }
    let table = match &args.dep_table {
        Some(path) => DependencyTable::load(path).map_err(|e| fail(EXIT_CONFIG, e))?,
        None => DependencyTable::default(),
    };
    let timeout = config.discovery.request_timeout;
    let github = match &args.fixture_api {
        Some(path) => {
            let transport = FixtureTransport::load(path).map_err(|e| fail(EXIT_NO_INPUT, e))?;
            GithubClient::new(Box::new(transport), None)
        }
        None => GithubClient::from_env(timeout)
            .map_err(|e| fail(EXIT_NO_PERMISSION, e))?
            .with_cache(ResponseCache::new(out.join(".api-cache"))),
    };
    let github = match &args.api_base {
        Some(base) => github.with_base_url(base.clone()),
        None => github,
    };
    let backend: Box<dyn ModelBackend> = match (&args.stub_backends, &config.backends.endpoint) {
        (Some(script), _) => Box::new(ScriptedBackend::load(script).map_err(|e| fail(EXIT_NO_INPUT, e))?),
        (None, Some(endpoint)) => Box::new(
            HttpChatBackend::new(endpoint, Duration::from_secs(300), config.backends.max_in_flight)
                .map_err(|e| fail(EXIT_CONFIG, e))?,
        ),
        (None, None) => {
            return Err(fail(
                EXIT_NO_PERMISSION,
                anyhow::anyhow!("no model endpoint: set {ENDPOINT_ENV}, pass --llm-endpoint, or use --stub-backends"),
            ))
        }
    };
    let runtime = make_runtime(args.runtime.kind(), out);
    let prompts = PromptSet::default();
    let services = MineServices { github: &github, backend: backend.as_ref(), runtime: runtime.as_ref(), table: &table, prompts: &prompts };
    let summary = cmd_mine(&config, &services).map_err(|e| {
        let code = match &e {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Credentials(_) => EXIT_NO_PERMISSION,
            PipelineError::Discovery(_) | PipelineError::Runtime(_) => EXIT_UNAVAILABLE,
            PipelineError::Io(_) => EXIT_SOFTWARE,
        };
        fail(code, e)
    })?;
    write!(stdout, "funnel:\n{}", summary.funnel.render()).map_err(|e| fail(EXIT_SOFTWARE, e))?;
    for id in &summary.entries {
        writeln!(stdout, "stored {id}").map_err(|e| fail(EXIT_SOFTWARE, e))?;
    }
    Ok(EXIT_OK)
}

fn run_evaluate(out: &Path, args: &EvaluateArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let mut config = PipelineConfig::default();
    apply_runtime_args(&mut config, &args.runtime);
    config.validate().map_err(|e| fail(EXIT_CONFIG, e))?;
    let diff = std::fs::read_to_string(&args.patch_file)
        .with_context(|| format!("cannot read {}", args.patch_file.display()))
        .map_err(|e| fail(EXIT_NO_INPUT, e))?;
    let store = Store::new(out);
    let runtime = make_runtime(args.runtime.kind(), out);
    let table = DependencyTable::default();
    let orch = Orchestrator::new(runtime.as_ref(), &config.orchestration, &table);
    let (report, path) = evaluate(&args.patch_id, &diff, &store, &orch, &config.stats).map_err(|e| {
        let code = e.exit_code();
        fail(code, e)
    })?;
    writeln!(stdout, "{}: {:?} (report {})", report.patch_id, report.verdict, path.display()).map_err(|e| fail(EXIT_SOFTWARE, e))?;
    Ok(report.verdict.exit_code())
}

fn run_inspect(out: &Path, args: &InspectArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let filter = EntryFilter {
        repo: args.repo.clone(),
        multi_file: args.multi_file,
        has_significant_test: args.has_significant_test,
        verified: args.verified,
    };
    let result = Store::new(out).query(&filter).map_err(|e| match e {
        StoreError::MissingStore(_) => fail(EXIT_NO_INPUT, e),
        other => fail(EXIT_DATA, other),
    })?;
    for (path, error) in &result.errors {
        log::error!("{}: {error}", path.display());
    }
    let io = |e: std::io::Error| fail(EXIT_SOFTWARE, e);
    if args.json {
        writeln!(stdout, "{}", serde_json::to_string_pretty(&result.entries).expect("entries serialize")).map_err(io)?;
    } else {
        for e in &result.entries {
            let significant: Vec<&str> =
                e.timing.iter().filter(|t| t.result.significant).map(|t| t.test_name.as_str()).collect();
            writeln!(
                stdout,
                "{}  repo={} files={} significant={} verified={:?} image={}",
                e.patch_id,
                e.repo.full_name(),
                e.commit.changes.len(),
                if significant.is_empty() { "-".to_owned() } else { significant.join(",") },
                e.verified,
                e.build.image
            )
            .map_err(io)?;
        }
        writeln!(stdout, "{} entr{}", result.entries.len(), if result.entries.len() == 1 { "y" } else { "ies" }).map_err(io)?;
    }
    Ok(if result.errors.is_empty() { EXIT_OK } else { EXIT_DATA })
}

fn run_verify(out: &Path, args: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let decision = if args.accept { Verification::Accepted } else { Verification::Rejected };
    let entry = Store::new(out).mark_verified(&args.patch_id, decision, args.note.as_deref()).map_err(|e| match e {
        StoreError::NotFound(_) => fail(EXIT_NO_INPUT, e),
        other => fail(EXIT_DATA, other),
    })?;
    writeln!(stdout, "{}: {:?}", entry.patch_id, entry.verified).map_err(|e| fail(EXIT_SOFTWARE, e))?;
    Ok(EXIT_OK)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Mine(a) => run_mine(&cli.out, a, stdout),
        Command::Evaluate(a) => run_evaluate(&cli.out, a, stdout),
        Command::Inspect(a) => run_inspect(&cli.out, a, stdout),
        Command::Verify(a) => run_verify(&cli.out, a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {:#}", f.error);
            f.code
        }
    }
}
