//! The mining pipeline: discovery, harvest, classification, build and
//! timing, judgement, and storage.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ModelBackend;
use crate::classifier::{BackendConfig, Classifier, Label, PromptSet};
use crate::deptable::DependencyTable;
use crate::discovery::{gate_repository, search_repositories, DiscoveryConfig, DiscoveryError, RepoDescriptor};
use crate::git::Git;
use crate::harvest::{apply_structural_filter, resolve_linked_issue, walk_history, CommitRecord, FilterDecision, HarvestConfig, IssueResolver};
use crate::hosting::{ApiError, GithubClient};
use crate::orchestrator::{
    image_tag, Orchestrator, OrchestratorConfig, OrchestratorError, OrchestratorProber, RepairModel, RunOutcome, Session, Version,
};
use crate::runtime::ContainerRuntime;
use crate::stats::{judge, StatConfig, TimingSeries};
use crate::store::{patch_file_for, patch_id, BenchmarkEntry, BuildRecord, MeasurementNotes, Store, TimingEvidence, Verification, SCHEMA_VERSION};

pub const DEFAULT_OUT_DIR: &str = "./perfmine-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub discovery: DiscoveryConfig,
    pub harvest: HarvestConfig,
    pub backends: BackendConfig,
    pub stats: StatConfig,
    pub orchestration: OrchestratorConfig,
    /// Commits orchestrated at the same time, one container each.
    pub max_containers: usize,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            discovery: DiscoveryConfig::default(),
            harvest: HarvestConfig::default(),
            backends: BackendConfig::default(),
            stats: StatConfig::default(),
            orchestration: OrchestratorConfig::default(),
            max_containers: 1,
            out_dir: PathBuf::from(DEFAULT_OUT_DIR),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("credentials rejected: {0}")]
    Credentials(String),
    #[error("repository discovery failed: {0}")]
    Discovery(DiscoveryError),
    #[error("container runtime unavailable: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.discovery.validate().map_err(|e| cfg(&e))?;
        self.harvest.validate().map_err(|e| cfg(&e))?;
        self.backends.validate().map_err(|e| cfg(&e))?;
        self.stats.validate().map_err(|e| cfg(&e))?;
        self.orchestration.validate().map_err(|e| cfg(&e))?;
        if self.max_containers == 0 {
            return Err(PipelineError::Config("max_containers must be positive".into()));
        }
        Ok(())
    }
}

/// Commit counts after each stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Funnel {
    pub scanned: usize,
    pub structural: usize,
    pub classified: usize,
    pub built: usize,
    pub stored: usize,
}

impl Funnel {
    pub fn stages(&self) -> [(&'static str, usize); 5] {
        [
            ("scanned", self.scanned),
            ("structurally accepted", self.structural),
            ("classified positive", self.classified),
            ("built", self.built),
            ("stored", self.stored),
        ]
    }

    pub fn is_monotone(&self) -> bool {
        self.stages().windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn render(&self) -> String {
        self.stages().iter().map(|(label, n)| format!("{label:<22} {n}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MineSummary {
    pub repositories_found: usize,
    pub repositories_gated: usize,
    pub funnel: Funnel,
    pub entries: Vec<String>,
    pub dropped: Vec<Dropped>,
}

/// Everything `mine` talks to.
pub struct MineServices<'a> {
    pub github: &'a GithubClient,
    pub backend: &'a dyn ModelBackend,
    pub runtime: &'a dyn ContainerRuntime,
    pub table: &'a DependencyTable,
    pub prompts: &'a PromptSet,
}

#[derive(Default)]
struct Counters {
    scanned: AtomicUsize,
    structural: AtomicUsize,
    classified: AtomicUsize,
    built: AtomicUsize,
    stored: AtomicUsize,
}

impl Counters {
    fn add(counter: &AtomicUsize, n: usize) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    fn funnel(&self) -> Funnel {
        Funnel {
            scanned: self.scanned.load(Ordering::Relaxed),
            structural: self.structural.load(Ordering::Relaxed),
            classified: self.classified.load(Ordering::Relaxed),
            built: self.built.load(Ordering::Relaxed),
            stored: self.stored.load(Ordering::Relaxed),
        }
    }
}

struct Miner<'a> {
    config: &'a PipelineConfig,
    services: &'a MineServices<'a>,
    orchestrator: Orchestrator<'a>,
    store: Store,
    counters: Counters,
    dropped: Mutex<Vec<Dropped>>,
    entries: Mutex<Vec<String>>,
}

impl Miner<'_> {
    fn drop_commit(&self, id: &str, stage: &str, reason: impl std::fmt::Display) {
        log::warn!("{id}: dropped at {stage}: {reason}");
        self.dropped.lock().unwrap().push(Dropped { id: id.to_owned(), stage: stage.to_owned(), reason: reason.to_string() });
    }

    fn worktree(&self, repo: &RepoDescriptor) -> Result<PathBuf, String> {
        let dir = self.config.out_dir.join("repos").join(format!("{}__{}", repo.owner, repo.name));
        if dir.join(".git").exists() {
            let git = Git::new(&dir);
            git.run(["fetch", "--quiet", "origin"]).map_err(|e| e.to_string())?;
            git.run(["checkout", "--quiet", "--detach", &format!("origin/{}", repo.default_branch)])
                .map_err(|e| e.to_string())?;
        } else {
            if let Some(parent) = dir.parent() {
                std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            Git::clone_into(&repo.clone_url, &dir).map_err(|e| e.to_string())?;
        }
        Ok(dir)
    }

    fn mine_repo(&self, repo: &RepoDescriptor, worktree: &Path) {
        let name = repo.full_name();
        let walk = match walk_history(worktree, "HEAD", &self.config.harvest) {
            Ok(w) => w,
            Err(e) => return self.drop_commit(&name, "harvest", e),
        };
        Counters::add(&self.counters.scanned, walk.pending_commits());
        let mut accepted = Vec::new();
        for item in walk {
            match item {
                Ok(commit) => match apply_structural_filter(&commit, &self.config.harvest) {
                    FilterDecision::Accept => accepted.push(commit),
                    FilterDecision::Reject(reason) => log::debug!("{}: {reason:?}", commit.sha),
                },
                Err(e) => self.drop_commit(&name, "harvest", e),
            }
        }
        Counters::add(&self.counters.structural, accepted.len());

        let next = AtomicUsize::new(0);
        let accepted = &accepted;
        std::thread::scope(|scope| {
            for _ in 0..self.config.max_containers.min(accepted.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(commit) = accepted.get(i) else { break };
                    self.process_commit(repo, worktree, commit.clone());
                });
            }
        });
    }

    fn process_commit(&self, repo: &RepoDescriptor, worktree: &Path, mut commit: CommitRecord) {
        let id = patch_id(&repo.owner, &repo.name, &commit.sha);
        resolve_linked_issue(&mut commit, &repo.owner, &repo.name, self.services.github as &dyn IssueResolver);
        let classifier = Classifier::new(&self.config.backends, self.services.backend, self.services.prompts);
        let verdict = match classifier.classify(&commit) {
            Ok(v) => v,
            // Unparseable replies included: the commit is skipped, not the run.
            Err(e) => return self.drop_commit(&id, "classify", e),
        };
        if verdict.label != Label::Positive {
            return;
        }
        Counters::add(&self.counters.classified, 1);

        let cmake = Git::new(worktree).run(["show", &format!("{}:CMakeLists.txt", commit.parent_sha)]).ok();
        let source = worktree.display().to_string();
        let o = &self.orchestrator;
        let mut session = match o.prepare_environment(&commit, repo, &source, cmake.as_deref()) {
            Ok(s) => s,
            Err(e) => return self.drop_commit(&id, "prepare", e),
        };
        let result = self.build_and_time(&mut session);
        if let Err(e) = o.mirror_logs(&session, &self.store.root().join("logs").join(&id)) {
            log::warn!("{id}: could not mirror logs: {e}");
        }
        let outcome = match result {
            Ok((original, patched)) => {
                Counters::add(&self.counters.built, 1);
                self.snapshot_and_store(&session, repo, &commit, verdict, &id, &original, &patched)
            }
            Err((stage, e)) => Err((stage, e.to_string())),
        };
        if let Err(e) = o.close(session) {
            log::warn!("{id}: could not remove container: {e}");
        }
        match outcome {
            Ok(()) => {
                Counters::add(&self.counters.stored, 1);
                self.entries.lock().unwrap().push(id);
            }
            Err((stage, reason)) => self.drop_commit(&id, stage, reason),
        }
    }

    fn build_and_time(&self, s: &mut Session) -> Result<(RunOutcome, RunOutcome), (&'static str, OrchestratorError)> {
        let o = &self.orchestrator;
        o.build_both(s).map_err(|e| ("build", e))?;
        let runs = self.config.orchestration.runs;
        let original = o.run_tests_repeatedly(s, Version::Original, runs).map_err(|e| ("test", e))?;
        let patched = o.run_tests_repeatedly(s, Version::Patched, runs).map_err(|e| ("test", e))?;
        for outcome in [&original, &patched] {
            if !outcome.qualified {
                let reason = format!("{:?} disqualified: {}", outcome.version, outcome.disqualified_reason.as_deref().unwrap_or("incomplete"));
                return Err(("test", OrchestratorError::Precondition(reason)));
            }
        }
        Ok((original, patched))
    }

    #[allow(clippy::too_many_arguments)]
    fn snapshot_and_store(
        &self,
        s: &Session,
        repo: &RepoDescriptor,
        commit: &CommitRecord,
        classification: crate::classifier::ClassificationVerdict,
        id: &str,
        original: &RunOutcome,
        patched: &RunOutcome,
    ) -> Result<(), (&'static str, String)> {
        let mut timing = Vec::new();
        for o in &original.tests {
            let Some(p) = patched.test(&o.name) else { continue };
            let series = TimingSeries { test_name: o.name.clone(), pre_ms: o.wall_ms.clone(), post_ms: p.wall_ms.clone() };
            let result = judge(&series, &self.config.stats).map_err(|e| ("judge", e.to_string()))?;
            timing.push(TimingEvidence::new(&series, result));
        }
        let image = self.orchestrator.snapshot_image(s, id, &[original, patched]).map_err(|e| ("snapshot", e.to_string()))?;
        debug_assert_eq!(image, image_tag(id));
        let has_significant_test = timing.iter().any(|t| t.result.significant);
        let entry = BenchmarkEntry {
            schema_version: SCHEMA_VERSION,
            patch_id: id.to_owned(),
            repo: repo.clone(),
            commit: commit.clone(),
            patch_file: patch_file_for(id),
            classification,
            build: BuildRecord { plan: s.plan.clone(), image },
            timing,
            has_significant_test,
            measurement: MeasurementNotes {
                runs_requested: original.runs_requested,
                runs_recorded: original.runs_recorded,
                warmup_discarded: true,
                invocation: "whole_suite".into(),
                per_test_source: "ctest_junit".into(),
                stat_config: self.config.stats.clone(),
            },
            prompts: self.services.prompts.fingerprints(),
            verified: Verification::Unreviewed,
            review_note: None,
        };
        self.store.put(&entry, &commit.diff).map_err(|e| ("store", e.to_string()))?;
        Ok(())
    }
}

/// Runs the whole pipeline and writes `<out>/mine-summary.json`.
///
/// Per-repository and per-commit failures are logged, recorded in the
/// summary, and skipped. Configuration, credential and runtime
/// reachability problems abort the run.
pub fn cmd_mine(config: &PipelineConfig, services: &MineServices<'_>) -> Result<MineSummary, PipelineError> {
    config.validate()?;
    let repos = match search_repositories(&config.discovery, services.github) {
        Ok(r) => r,
        Err(DiscoveryError::Api(ApiError::Authentication(e))) => return Err(PipelineError::Credentials(e)),
        Err(e) => return Err(PipelineError::Discovery(e)),
    };
    let mut summary = MineSummary { repositories_found: repos.len(), ..Default::default() };
    if !repos.is_empty() {
        services.runtime.ping().map_err(|e| PipelineError::Runtime(e.to_string()))?;
    }
    std::fs::create_dir_all(&config.out_dir)?;

    let mut orchestrator = Orchestrator::new(services.runtime, &config.orchestration, services.table);
    orchestrator = orchestrator.with_repair_model(RepairModel {
        backend: services.backend,
        model: &config.backends.phase2_backend,
        prompt: &services.prompts.repair,
        temperature: config.backends.temperature,
    });
    let miner = Miner {
        config,
        services,
        orchestrator,
        store: Store::new(&config.out_dir),
        counters: Counters::default(),
        dropped: Mutex::new(Vec::new()),
        entries: Mutex::new(Vec::new()),
    };

    for repo in repos {
        let name = repo.full_name();
        let worktree = match miner.worktree(&repo) {
            Ok(w) => w,
            Err(e) => {
                miner.drop_commit(&name, "checkout", e);
                continue;
            }
        };
        let prober = OrchestratorProber { orchestrator: &miner.orchestrator };
        let gated = match gate_repository(repo, &worktree, &prober) {
            Ok(r) => r,
            Err(e) => {
                miner.drop_commit(&name, "gate", e);
                continue;
            }
        };
        if !gated.passes_gate(&config.discovery) {
            miner.drop_commit(
                &name,
                "gate",
                format!(
                    "root CMakeLists.txt: {}, tests listed: {}, head tests: {:?}",
                    gated.has_root_cmake, gated.has_cmake_tests, gated.head_tests_pass
                ),
            );
            continue;
        }
        summary.repositories_gated += 1;
        miner.mine_repo(&gated, &worktree);
    }

    summary.funnel = miner.counters.funnel();
    summary.entries = miner.entries.into_inner().unwrap();
    summary.entries.sort();
    summary.dropped = miner.dropped.into_inner().unwrap();
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    crate::fsutil::atomic_write(&config.out_dir.join("mine-summary.json"), text.as_bytes())?;
    Ok(summary)
}
