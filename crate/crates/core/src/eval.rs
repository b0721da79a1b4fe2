//! Scoring a candidate patch against a stored benchmark entry.
//!
//! The candidate is applied to a fresh copy of the original tree inside the
//! entry's image. The original is rebuilt and re-timed in the same container
//! so both samples come from one session on one machine.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::orchestrator::{Orchestrator, OrchestratorError, RunOutcome, Session, Version};
use crate::runtime::{Step, META_DIR};
use crate::stats::{judge, SignificanceResult, StatConfig, StatsError, TimingSeries};
use crate::store::{Store, StoreError};

pub const BASELINE_POLICY: &str = "remeasured_in_session";
const EVAL_LOG_ROOT: &str = "/work/logs/evaluation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Improves,
    FunctionalOnly,
    Broken,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Improves => 0,
            Verdict::FunctionalOnly => 10,
            Verdict::Broken => 20,
        }
    }
}

pub fn verdict_for(applied_ok: bool, build_ok: bool, all_tests_pass: bool, any_significant: bool) -> Verdict {
    if !(applied_ok && build_ok && all_tests_pass) {
        Verdict::Broken
    } else if any_significant {
        Verdict::Improves
    } else {
        Verdict::FunctionalOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestComparison {
    pub test_name: String,
    pub original_ms: Vec<f64>,
    pub candidate_ms: Vec<f64>,
    pub result: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub patch_id: String,
    /// sha256 of the submitted diff bytes.
    pub candidate_digest: String,
    pub applied_ok: bool,
    pub build_ok: bool,
    pub all_tests_pass: bool,
    pub timing: Vec<TestComparison>,
    pub verdict: Verdict,
    pub runs: usize,
    pub baseline: String,
    pub original_session: Option<String>,
    pub candidate_session: Option<String>,
    pub stat_config: StatConfig,
    /// Files the candidate modifies, and those the ground-truth commit modifies.
    pub candidate_files: Vec<String>,
    pub ground_truth_files: Vec<String>,
    #[serde(default)]
    pub detail: Option<String>,
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<(), String> {
        let significant = self.timing.iter().any(|t| t.result.significant);
        if self.verdict != verdict_for(self.applied_ok, self.build_ok, self.all_tests_pass, significant) {
            return Err("verdict does not follow from the report fields".into());
        }
        if !self.timing.is_empty() && self.original_session != self.candidate_session {
            return Err("original and candidate timings come from different sessions".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no benchmark entry {0}")]
    MissingEntry(String),
    #[error("image {image} for {patch_id} is not available")]
    ImageUnavailable { patch_id: String, image: String },
    #[error("the original version no longer reproduces: {0}")]
    Baseline(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl EvalError {
    /// Process exit code; all are at least 64 to stay clear of verdict codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            EvalError::MissingEntry(_) | EvalError::Store(_) => 65,
            EvalError::ImageUnavailable { .. } => 69,
            EvalError::Orchestrator(OrchestratorError::Runtime(_)) => 69,
            EvalError::Baseline(_) | EvalError::Orchestrator(_) | EvalError::Stats(_) => 70,
        }
    }
}

pub fn digest(diff: &str) -> String {
    hex::encode(Sha256::digest(diff.as_bytes()))
}

/// Paths a unified diff modifies, from its `+++`/`---` headers.
pub fn touched_files(diff: &str) -> Vec<String> {
    let mut files = BTreeSet::new();
    for line in diff.lines() {
        let Some(rest) = line.strip_prefix("+++ ").or_else(|| line.strip_prefix("--- ")) else { continue };
        let path = rest.split('\t').next().unwrap_or(rest).trim();
        if path == "/dev/null" {
            continue;
        }
        let path = path.strip_prefix("a/").or_else(|| path.strip_prefix("b/")).unwrap_or(path);
        files.insert(path.to_owned());
    }
    files.into_iter().collect()
}

struct Measured {
    build_ok: bool,
    original: Option<RunOutcome>,
    candidate: Option<RunOutcome>,
}

fn measure(orch: &Orchestrator<'_>, s: &mut Session, runs: usize, applied_ok: bool) -> Result<Measured, EvalError> {
    if !applied_ok {
        return Ok(Measured { build_ok: false, original: None, candidate: None });
    }
    let original_build = orch.build_once(s, Version::Original)?;
    if !original_build.success() {
        return Err(EvalError::Baseline(format!("original no longer builds (exit {})", original_build.exit_code)));
    }
    let build_ok = orch.build_once(s, Version::Candidate)?.success();
    let original = orch.run_tests_repeatedly(s, Version::Original, runs)?;
    if !original.qualified {
        return Err(EvalError::Baseline(original.disqualified_reason.clone().unwrap_or_default()));
    }
    let candidate = if build_ok { Some(orch.run_tests_repeatedly(s, Version::Candidate, runs)?) } else { None };
    Ok(Measured { build_ok, original: Some(original), candidate })
}

/// Builds and times `candidate_diff` against the entry `patch_id`, then
/// writes `<store>/evaluations/<patch_id>.eval.json`.
pub fn evaluate(
    patch_id: &str,
    candidate_diff: &str,
    store: &Store,
    orch: &Orchestrator<'_>,
    stat: &StatConfig,
) -> Result<(EvaluationReport, PathBuf), EvalError> {
    let entry = match store.get(patch_id) {
        Ok(e) => e,
        Err(StoreError::NotFound(id)) => return Err(EvalError::MissingEntry(id)),
        Err(e) => return Err(e.into()),
    };
    let runtime = orch.runtime();
    let image = entry.build.image.clone();
    if !runtime.image_exists(&image).map_err(OrchestratorError::from)? {
        return Err(EvalError::ImageUnavailable { patch_id: patch_id.to_owned(), image });
    }
    let runs = orch.config().runs;
    let mut s = orch.open_snapshot(&image, &entry.build.plan, &entry.commit.sha, EVAL_LOG_ROOT)?;

    let result = (|| -> Result<(bool, Option<String>, Measured), EvalError> {
        let copy = Step::CopyTree { from: Version::Original.source_dir(), to: Version::Candidate.source_dir() };
        let out = runtime.exec(&s.container, &copy).map_err(OrchestratorError::from)?;
        if !out.success() {
            return Err(EvalError::Baseline(format!("cannot copy the original tree: {}", out.combined())));
        }
        let mut applied_ok = true;
        let mut detail = None;
        if !candidate_diff.trim().is_empty() {
            let patch_file = format!("{META_DIR}/candidate.patch");
            runtime.write_file(&s.container, &patch_file, candidate_diff.as_bytes()).map_err(OrchestratorError::from)?;
            let apply = Step::ApplyPatch { dir: Version::Candidate.source_dir(), patch_file };
            let out = runtime.exec(&s.container, &apply).map_err(OrchestratorError::from)?;
            applied_ok = out.success();
            if !applied_ok {
                detail = Some(format!("patch does not apply: {}", out.combined().trim()));
            }
        }
        let measured = measure(orch, &mut s, runs, applied_ok)?;
        Ok((applied_ok, detail, measured))
    })();
    if let Err(e) = orch.mirror_logs(&s, &store.root().join("logs").join(patch_id).join("evaluation")) {
        log::warn!("could not mirror evaluation logs: {e}");
    }
    let close = orch.close(s);
    let (applied_ok, mut detail, measured) = result?;
    close?;

    let mut timing = Vec::new();
    let mut all_tests_pass = false;
    if let (Some(original), Some(candidate)) = (&measured.original, &measured.candidate) {
        let names: BTreeSet<&str> = candidate.tests.iter().map(|t| t.name.as_str()).collect();
        let missing: Vec<&str> = original.tests.iter().map(|t| t.name.as_str()).filter(|n| !names.contains(n)).collect();
        all_tests_pass = candidate.qualified && missing.is_empty();
        if !candidate.qualified {
            detail = candidate.disqualified_reason.clone();
        } else if !missing.is_empty() {
            detail = Some(format!("candidate drops tests: {}", missing.join(", ")));
        }
        if all_tests_pass {
            for o in &original.tests {
                let c = candidate.test(&o.name).expect("checked above");
                let series = TimingSeries { test_name: o.name.clone(), pre_ms: o.wall_ms.clone(), post_ms: c.wall_ms.clone() };
                timing.push(TestComparison {
                    test_name: o.name.clone(),
                    original_ms: o.wall_ms.clone(),
                    candidate_ms: c.wall_ms.clone(),
                    result: judge(&series, stat)?,
                });
            }
        }
    } else if applied_ok && detail.is_none() {
        detail = Some("candidate does not build".into());
    }
    let significant = timing.iter().any(|t| t.result.significant);
    let report = EvaluationReport {
        patch_id: patch_id.to_owned(),
        candidate_digest: digest(candidate_diff),
        applied_ok,
        build_ok: measured.build_ok,
        all_tests_pass,
        timing,
        verdict: verdict_for(applied_ok, measured.build_ok, all_tests_pass, significant),
        runs,
        baseline: BASELINE_POLICY.into(),
        original_session: measured.original.as_ref().map(|o| o.session.clone()),
        candidate_session: measured.candidate.as_ref().map(|c| c.session.clone()),
        stat_config: stat.clone(),
        candidate_files: touched_files(candidate_diff),
        ground_truth_files: entry.commit.changes.iter().map(|c| c.path.clone()).collect(),
        detail,
    };
    debug_assert!(report.validate().is_ok());
    let path = store.evaluations_dir().join(format!("{patch_id}.eval.json"));
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    atomic_write(&path, text.as_bytes()).map_err(|source| StoreError::Io { path: path.clone(), source })?;
    Ok((report, path))
}
