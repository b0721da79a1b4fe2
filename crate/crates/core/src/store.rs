//! Benchmark manifests on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! entries/<patch_id>.json      one manifest per patch
//! patches/<patch_id>.patch     the commit's unified diff
//! evaluations/<patch_id>.eval.json
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{ClassificationVerdict, PromptFingerprint};
use crate::discovery::RepoDescriptor;
use crate::fsutil::atomic_write;
use crate::harvest::CommitRecord;
use crate::orchestrator::{image_tag, BuildPlan};
use crate::stats::{SignificanceResult, StatConfig, TimingSeries};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("schema violation in {patch_id}: {detail}")]
    Schema { patch_id: String, detail: String },
    #[error("unsupported schema_version {found} (this build reads {SCHEMA_VERSION})")]
    UnsupportedSchema { found: u64 },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no entry with patch id {0}")]
    NotFound(String),
    #[error("entry {patch_id} was already reviewed ({state:?})")]
    AlreadyReviewed { patch_id: String, state: Verification },
    #[error("store directory {0} does not exist")]
    MissingStore(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    #[default]
    Unreviewed,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub plan: BuildPlan,
    pub image: String,
}

/// One test's samples and the verdict on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEvidence {
    pub test_name: String,
    /// sha256 over the test name and both sample vectors.
    pub series_digest: String,
    pub pre_ms: Vec<f64>,
    pub post_ms: Vec<f64>,
    pub result: SignificanceResult,
}

impl TimingEvidence {
    pub fn new(series: &TimingSeries, result: SignificanceResult) -> Self {
        Self {
            test_name: series.test_name.clone(),
            series_digest: series_digest(series),
            pre_ms: series.pre_ms.clone(),
            post_ms: series.post_ms.clone(),
            result,
        }
    }

    pub fn series(&self) -> TimingSeries {
        TimingSeries { test_name: self.test_name.clone(), pre_ms: self.pre_ms.clone(), post_ms: self.post_ms.clone() }
    }
}

pub fn series_digest(series: &TimingSeries) -> String {
    let canonical = serde_json::to_string(series).expect("series serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// How the timing data was collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNotes {
    pub runs_requested: usize,
    pub runs_recorded: usize,
    pub warmup_discarded: bool,
    /// Always `whole_suite`: each run invokes the full ctest suite once.
    pub invocation: String,
    pub per_test_source: String,
    pub stat_config: StatConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub schema_version: u32,
    pub patch_id: String,
    pub repo: RepoDescriptor,
    pub commit: CommitRecord,
    /// Relative to the store root.
    pub patch_file: String,
    pub classification: ClassificationVerdict,
    pub build: BuildRecord,
    pub timing: Vec<TimingEvidence>,
    pub has_significant_test: bool,
    pub measurement: MeasurementNotes,
    pub prompts: Vec<PromptFingerprint>,
    pub verified: Verification,
    #[serde(default)]
    pub review_note: Option<String>,
}

pub fn patch_id(owner: &str, name: &str, sha: &str) -> String {
    format!("{owner}__{name}__{sha}")
}

pub fn patch_file_for(patch_id: &str) -> String {
    format!("patches/{patch_id}.patch")
}

impl BenchmarkEntry {
    fn violation(&self, detail: impl Into<String>) -> StoreError {
        StoreError::Schema { patch_id: self.patch_id.clone(), detail: detail.into() }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StoreError::UnsupportedSchema { found: self.schema_version.into() });
        }
        let expected = patch_id(&self.repo.owner, &self.repo.name, &self.commit.sha);
        if self.patch_id != expected {
            return Err(self.violation(format!("patch_id does not match repo and commit (expected {expected})")));
        }
        self.repo.validate().map_err(|e| self.violation(e))?;
        self.commit.validate().map_err(|e| self.violation(e))?;
        self.classification.validate().map_err(|e| self.violation(e))?;
        self.build.plan.validate().map_err(|e| self.violation(e))?;
        if self.patch_file != patch_file_for(&self.patch_id) {
            return Err(self.violation(format!("patch_file must be {}", patch_file_for(&self.patch_id))));
        }
        if self.build.image != image_tag(&self.patch_id) {
            return Err(self.violation(format!("image must be {}", image_tag(&self.patch_id))));
        }
        for t in &self.timing {
            let series = t.series();
            series.validate().map_err(|e| self.violation(format!("{}: {e}", t.test_name)))?;
            if t.series_digest != series_digest(&series) {
                return Err(self.violation(format!("{}: series_digest does not match the samples", t.test_name)));
            }
        }
        let any = self.timing.iter().any(|t| t.result.significant);
        if self.has_significant_test != any {
            return Err(self.violation("has_significant_test disagrees with the timing results"));
        }
        Ok(())
    }

    pub fn is_multi_file(&self) -> bool {
        self.commit.is_multi_file()
    }
}

/// Parses a manifest, rejecting unknown schema versions before anything else.
pub fn parse_entry(text: &str) -> Result<BenchmarkEntry, StoreError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| StoreError::Malformed { path: PathBuf::new(), detail: e.to_string() })?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        Some(found) => return Err(StoreError::UnsupportedSchema { found }),
        None => return Err(StoreError::Malformed { path: PathBuf::new(), detail: "missing schema_version".into() }),
    }
    let entry: BenchmarkEntry =
        serde_json::from_value(value).map_err(|e| StoreError::Malformed { path: PathBuf::new(), detail: e.to_string() })?;
    entry.validate()?;
    Ok(entry)
}

fn with_path(path: &Path, e: StoreError) -> StoreError {
    match e {
        StoreError::Malformed { detail, .. } => StoreError::Malformed { path: path.to_owned(), detail },
        other => other,
    }
}

/// Writes `<dir>/<patch_id>.json` atomically and returns its path.
pub fn write_entry(entry: &BenchmarkEntry, dir: &Path) -> Result<PathBuf, StoreError> {
    entry.validate()?;
    let path = dir.join(format!("{}.json", entry.patch_id));
    let mut text = serde_json::to_string_pretty(entry).expect("entry serializes");
    text.push('\n');
    atomic_write(&path, text.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryFilter {
    /// `owner/name`.
    pub repo: Option<String>,
    pub multi_file: Option<bool>,
    pub has_significant_test: Option<bool>,
    pub verified: Option<Verification>,
}

impl EntryFilter {
    pub fn matches(&self, e: &BenchmarkEntry) -> bool {
        self.repo.as_ref().is_none_or(|r| *r == e.repo.full_name())
            && self.multi_file.is_none_or(|m| m == e.is_multi_file())
            && self.has_significant_test.is_none_or(|s| s == e.has_significant_test)
            && self.verified.is_none_or(|v| v == e.verified)
    }
}

#[derive(Debug, Default)]
pub struct QueryResult {
    pub entries: Vec<BenchmarkEntry>,
    /// Files that could not be read, with the reason.
    pub errors: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries_dir(&self) -> PathBuf {
        self.root.join("entries")
    }

    pub fn evaluations_dir(&self) -> PathBuf {
        self.root.join("evaluations")
    }

    pub fn entry_path(&self, patch_id: &str) -> PathBuf {
        self.entries_dir().join(format!("{patch_id}.json"))
    }

    /// Stores the patch file, then the manifest.
    pub fn put(&self, entry: &BenchmarkEntry, diff: &str) -> Result<PathBuf, StoreError> {
        entry.validate()?;
        let patch = self.root.join(&entry.patch_file);
        atomic_write(&patch, diff.as_bytes()).map_err(io_err(&patch))?;
        write_entry(entry, &self.entries_dir())
    }

    pub fn get(&self, patch_id: &str) -> Result<BenchmarkEntry, StoreError> {
        let path = self.entry_path(patch_id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(patch_id.to_owned())),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        parse_entry(&text).map_err(|e| with_path(&path, e))
    }

    pub fn read_patch(&self, entry: &BenchmarkEntry) -> Result<String, StoreError> {
        let path = self.root.join(&entry.patch_file);
        std::fs::read_to_string(&path).map_err(io_err(&path))
    }

    /// Entries matching `filter`, sorted by patch id. Unreadable files are
    /// reported in `errors` and skipped. A store that was never written to
    /// (an output directory without `entries/`) is empty.
    pub fn query(&self, filter: &EntryFilter) -> Result<QueryResult, StoreError> {
        if !self.root.is_dir() {
            return Err(StoreError::MissingStore(self.root.clone()));
        }
        let mut result = QueryResult::default();
        let dir = self.entries_dir();
        let listing = match std::fs::read_dir(&dir) {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(result),
            Err(e) => return Err(StoreError::Io { path: dir, source: e }),
        };
        for item in listing {
            let path = item.map_err(io_err(&dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let parsed = std::fs::read_to_string(&path)
                .map_err(io_err(&path))
                .and_then(|text| parse_entry(&text).map_err(|e| with_path(&path, e)));
            match parsed {
                Ok(entry) if filter.matches(&entry) => result.entries.push(entry),
                Ok(_) => {}
                Err(e) => result.errors.push((path, e.to_string())),
            }
        }
        result.entries.sort_by(|a, b| a.patch_id.cmp(&b.patch_id));
        result.errors.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(result)
    }

    /// Records a review decision. Only unreviewed entries can be reviewed.
    pub fn mark_verified(&self, patch_id: &str, decision: Verification, note: Option<&str>) -> Result<BenchmarkEntry, StoreError> {
        if decision == Verification::Unreviewed {
            return Err(StoreError::Schema { patch_id: patch_id.to_owned(), detail: "a review must accept or reject".into() });
        }
        let mut entry = self.get(patch_id)?;
        if entry.verified != Verification::Unreviewed {
            return Err(StoreError::AlreadyReviewed { patch_id: patch_id.to_owned(), state: entry.verified });
        }
        entry.verified = decision;
        entry.review_note = note.map(str::to_owned);
        write_entry(&entry, &self.entries_dir())?;
        Ok(entry)
    }
}
