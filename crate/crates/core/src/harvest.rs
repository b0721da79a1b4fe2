//! Commit harvesting: walk first-parent history and apply the structural
//! criteria (time window, file-count cap, C++-only non-test changes).

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::LazyLock;

use chrono::{DateTime, TimeZone, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::git::{Git, GitError};

#[derive(Debug, Error)]
pub enum HarvestError {
    #[error(transparent)]
    Git(#[from] GitError),
    #[error(
        "shallow clone does not cover the window: oldest reachable commit is {oldest}, window starts {since}; re-clone with a deeper history"
    )]
    ShallowHistory { oldest: DateTime<Utc>, since: DateTime<Utc> },
    #[error("unreadable commit object {sha}: {detail}")]
    UnreadableCommit { sha: String, detail: String },
    #[error("invalid harvest configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Added,
    Modified,
    Deleted,
    Renamed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    pub change_kind: ChangeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_path: Option<String>,
    pub lines_added: u64,
    pub lines_deleted: u64,
}

impl FileChange {
    pub fn validate(&self) -> Result<(), String> {
        if (self.change_kind == ChangeKind::Renamed) != self.old_path.is_some() {
            return Err(format!("{}: old_path must be present exactly for renames", self.path));
        }
        for p in std::iter::once(&self.path).chain(self.old_path.as_ref()) {
            if normalize_path(p) != *p || p.is_empty() {
                return Err(format!("path `{p}` is not normalized"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub sha: String,
    pub parent_sha: String,
    pub author_timestamp: DateTime<Utc>,
    pub message: String,
    #[serde(default)]
    pub linked_issue_text: Option<String>,
    pub changes: Vec<FileChange>,
    /// Unified diff against the parent. Manifests store it as a sibling patch file.
    #[serde(skip)]
    pub diff: String,
}

impl CommitRecord {
    pub fn is_multi_file(&self) -> bool {
        self.changes.len() > 1
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_full_sha(&self.sha) || !is_full_sha(&self.parent_sha) {
            return Err(format!("commit {} / parent {} are not full hex shas", self.sha, self.parent_sha));
        }
        if self.changes.is_empty() {
            return Err(format!("commit {} has no changes", self.sha));
        }
        self.changes.iter().try_for_each(FileChange::validate)
    }
}

pub fn is_full_sha(s: &str) -> bool {
    s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DateSource {
    #[default]
    Author,
    Committer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    pub since: DateTime<Utc>,
    pub until: DateTime<Utc>,
    pub max_files: usize,
    pub cpp_extensions: BTreeSet<String>,
    pub test_path_markers: BTreeSet<String>,
    #[serde(default)]
    pub date_source: DateSource,
}

pub const DEFAULT_CPP_EXTENSIONS: &[&str] = &[
    ".cpp", ".cc", ".cxx", ".c++", ".hpp", ".hh", ".hxx", ".h", ".ipp", ".inl", ".tpp",
];
pub const DEFAULT_TEST_MARKERS: &[&str] =
    &["test", "tests", "unittest", "unittests", "benchmark", "benchmarks", "gtest"];

impl Default for HarvestConfig {
    fn default() -> Self {
        Self {
            since: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
            until: Utc.with_ymd_and_hms(2025, 12, 31, 23, 59, 59).unwrap(),
            max_files: 20,
            cpp_extensions: DEFAULT_CPP_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            test_path_markers: DEFAULT_TEST_MARKERS.iter().map(|s| s.to_string()).collect(),
            date_source: DateSource::Author,
        }
    }
}

impl HarvestConfig {
    pub fn validate(&self) -> Result<(), HarvestError> {
        if self.since >= self.until {
            return Err(HarvestError::InvalidConfig(format!(
                "since ({}) must be earlier than until ({})",
                self.since, self.until
            )));
        }
        if self.max_files < 1 {
            return Err(HarvestError::InvalidConfig("max_files must be at least 1".into()));
        }
        if self.cpp_extensions.is_empty() {
            return Err(HarvestError::InvalidConfig("cpp_extensions is empty".into()));
        }
        Ok(())
    }

    pub fn in_window(&self, ts: &DateTime<Utc>) -> bool {
        *ts >= self.since && *ts <= self.until
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileClass {
    CppSource,
    TestFile,
    Other,
}

/// Strips `./` components and converts backslashes.
pub fn normalize_path(path: &str) -> String {
    let unified = path.replace('\\', "/");
    unified
        .split('/')
        .filter(|seg| !seg.is_empty() && *seg != ".")
        .collect::<Vec<_>>()
        .join("/")
}

/// Splits on non-alphanumerics and lower-to-upper camel-case boundaries.
fn tokens(segment: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in segment.split(|c: char| !c.is_ascii_alphanumeric()) {
        let mut current = String::new();
        let mut prev_lower = false;
        for c in piece.chars() {
            if c.is_ascii_uppercase() && prev_lower && !current.is_empty() {
                out.push(std::mem::take(&mut current).to_ascii_lowercase());
            }
            prev_lower = c.is_ascii_lowercase() || c.is_ascii_digit();
            current.push(c);
        }
        if !current.is_empty() {
            out.push(current.to_ascii_lowercase());
        }
    }
    out
}

fn split_stem(file_name: &str) -> (&str, Option<&str>) {
    match file_name.rfind('.') {
        Some(idx) if idx > 0 => (&file_name[..idx], Some(&file_name[idx..])),
        _ => (file_name, None),
    }
}

/// A marker matches a whole directory segment or file stem, or any token of one.
pub fn classify_file(path: &str, config: &HarvestConfig) -> FileClass {
    let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
    let Some((file_name, dirs)) = segments.split_last() else {
        return FileClass::Other;
    };
    let (stem, ext) = split_stem(file_name);
    let markers: BTreeSet<String> =
        config.test_path_markers.iter().map(|m| m.to_ascii_lowercase()).collect();
    let hits = |segment: &str| {
        markers.contains(&segment.to_ascii_lowercase())
            || tokens(segment).iter().any(|t| markers.contains(t))
    };
    if dirs.iter().any(|d| hits(d)) || hits(stem) {
        return FileClass::TestFile;
    }
    match ext {
        Some(ext)
            if config
                .cpp_extensions
                .iter()
                .any(|e| e.eq_ignore_ascii_case(ext)) =>
        {
            FileClass::CppSource
        }
        _ => FileClass::Other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    OutOfWindow,
    TooManyFiles,
    NonCppFile,
    TouchesTests,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "decision", content = "reason")]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

impl FilterDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, FilterDecision::Accept)
    }
}

/// Checks the criteria in order; the first violation is the reason.
pub fn apply_structural_filter(commit: &CommitRecord, config: &HarvestConfig) -> FilterDecision {
    if !config.in_window(&commit.author_timestamp) {
        return FilterDecision::Reject(RejectReason::OutOfWindow);
    }
    if commit.changes.len() > config.max_files {
        return FilterDecision::Reject(RejectReason::TooManyFiles);
    }
    for change in &commit.changes {
        match classify_file(&change.path, config) {
            FileClass::CppSource => {}
            FileClass::TestFile => return FilterDecision::Reject(RejectReason::TouchesTests),
            FileClass::Other => return FilterDecision::Reject(RejectReason::NonCppFile),
        }
    }
    FilterDecision::Accept
}

/// Lazily yields first-parent, single-parent commits, oldest first.
pub struct HistoryWalk {
    git: Git,
    pending: std::vec::IntoIter<LogLine>,
    window: Option<(DateTime<Utc>, DateTime<Utc>)>,
}

#[derive(Debug, Clone)]
struct LogLine {
    sha: String,
    parents: Vec<String>,
    timestamp: DateTime<Utc>,
}

/// Walks `rev` (usually the default branch) restricted to the configured window.
pub fn walk_history(repo: &Path, rev: &str, config: &HarvestConfig) -> Result<HistoryWalk, HarvestError> {
    config.validate()?;
    let mut walk = scan_history(repo, rev, config.date_source)?;
    let git = Git::new(repo);
    if git.is_shallow()? {
        if let Some(oldest) = walk.pending.as_slice().iter().map(|l| l.timestamp).min() {
            if oldest > config.since {
                return Err(HarvestError::ShallowHistory { oldest, since: config.since });
            }
        }
    }
    walk.window = Some((config.since, config.until));
    Ok(walk)
}

/// Walks `rev` without a window; the pipeline counts every scanned commit.
pub fn scan_history(repo: &Path, rev: &str, dates: DateSource) -> Result<HistoryWalk, HarvestError> {
    let git = Git::new(repo);
    let date_fmt = match dates {
        DateSource::Author => "%at",
        DateSource::Committer => "%ct",
    };
    let out = git.run([
        "log",
        "--first-parent",
        "--reverse",
        &format!("--format=%H%x1f%P%x1f{date_fmt}"),
        rev,
    ])?;
    let mut lines = Vec::new();
    for raw in out.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = raw.split('\x1f').collect();
        let [sha, parents, ts] = fields[..] else {
            return Err(HarvestError::UnreadableCommit { sha: raw.into(), detail: "malformed log line".into() });
        };
        let secs: i64 = ts.trim().parse().map_err(|_| HarvestError::UnreadableCommit {
            sha: sha.into(),
            detail: format!("bad timestamp `{ts}`"),
        })?;
        lines.push(LogLine {
            sha: sha.to_owned(),
            parents: parents.split_whitespace().map(str::to_owned).collect(),
            timestamp: Utc.timestamp_opt(secs, 0).single().unwrap_or_default(),
        });
    }
    Ok(HistoryWalk { git, pending: lines.into_iter(), window: None })
}

impl HistoryWalk {
    /// Single-parent commits not yet yielded, ignoring the window.
    pub fn pending_commits(&self) -> usize {
        self.pending.as_slice().iter().filter(|l| l.parents.len() == 1).count()
    }
}

impl Iterator for HistoryWalk {
    type Item = Result<CommitRecord, HarvestError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.pending.next()?;
            if line.parents.len() != 1 {
                continue;
            }
            if let Some((since, until)) = self.window {
                if line.timestamp < since || line.timestamp > until {
                    continue;
                }
            }
            return Some(load_commit(&self.git, &line));
        }
    }
}

fn load_commit(git: &Git, line: &LogLine) -> Result<CommitRecord, HarvestError> {
    let unreadable = |e: GitError| HarvestError::UnreadableCommit { sha: line.sha.clone(), detail: e.to_string() };
    let parent = &line.parents[0];
    let message = git.run(["show", "-s", "--format=%B", &line.sha]).map_err(unreadable)?;
    let name_status = git
        .run(["diff", "--name-status", "-z", "-M50%", parent, &line.sha])
        .map_err(unreadable)?;
    let numstat = git
        .run(["diff", "--numstat", "-z", "-M50%", parent, &line.sha])
        .map_err(unreadable)?;
    let diff = git
        .run(["diff", "-M50%", "--no-color", "--full-index", parent, &line.sha])
        .map_err(unreadable)?;
    let changes = merge_diff_stats(&parse_name_status(&name_status), &parse_numstat(&numstat));
    Ok(CommitRecord {
        sha: line.sha.clone(),
        parent_sha: parent.clone(),
        author_timestamp: line.timestamp,
        message: message.trim_end().to_owned(),
        linked_issue_text: None,
        changes,
        diff,
    })
}

/// Parses `git diff --name-status -z` output into (kind, old, new).
fn parse_name_status(raw: &str) -> Vec<(ChangeKind, Option<String>, String)> {
    let mut fields = raw.split('\0').filter(|s| !s.is_empty());
    let mut out = Vec::new();
    while let Some(status) = fields.next() {
        let kind = status.chars().next().unwrap_or('M');
        match kind {
            'R' | 'C' => {
                let (Some(old), Some(new)) = (fields.next(), fields.next()) else { break };
                let kind = if kind == 'R' { ChangeKind::Renamed } else { ChangeKind::Added };
                let old = (kind == ChangeKind::Renamed).then(|| normalize_path(old));
                out.push((kind, old, normalize_path(new)));
            }
            _ => {
                let Some(path) = fields.next() else { break };
                let kind = match kind {
                    'A' => ChangeKind::Added,
                    'D' => ChangeKind::Deleted,
                    _ => ChangeKind::Modified,
                };
                out.push((kind, None, normalize_path(path)));
            }
        }
    }
    out
}

/// Parses `git diff --numstat -z` into (path, added, deleted). Binary files count zero lines.
fn parse_numstat(raw: &str) -> Vec<(String, u64, u64)> {
    let mut fields = raw.split('\0');
    let mut out = Vec::new();
    while let Some(head) = fields.next() {
        if head.is_empty() {
            continue;
        }
        let mut parts = head.splitn(3, '\t');
        let added = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let deleted = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
        let inline_path = parts.next().unwrap_or("");
        let path = if inline_path.is_empty() {
            // Renames: empty inline path followed by old and new paths.
            let _old = fields.next();
            fields.next().unwrap_or("").to_owned()
        } else {
            inline_path.to_owned()
        };
        out.push((normalize_path(&path), added, deleted));
    }
    out
}

fn merge_diff_stats(
    statuses: &[(ChangeKind, Option<String>, String)],
    numstat: &[(String, u64, u64)],
) -> Vec<FileChange> {
    statuses
        .iter()
        .map(|(kind, old, path)| {
            let (added, deleted) = numstat
                .iter()
                .find(|(p, _, _)| p == path)
                .map(|(_, a, d)| (*a, *d))
                .unwrap_or((0, 0));
            FileChange {
                path: path.clone(),
                change_kind: *kind,
                old_path: old.clone(),
                lines_added: added,
                lines_deleted: deleted,
            }
        })
        .collect()
}

/// A reference from a commit message to an issue on the hosting service.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct IssueRef {
    pub owner: String,
    pub name: String,
    pub number: u64,
}

static ISSUE_URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"https?://github\.com/([A-Za-z0-9_.-]+)/([A-Za-z0-9_.-]+)/(?:issues|pull)/(\d+)").unwrap()
});
static ISSUE_HASH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|[^\w/&])#(\d+)\b").unwrap());

/// Finds `#N` and full issue URLs in a message, in order of appearance, deduplicated.
pub fn issue_references(message: &str, owner: &str, name: &str) -> Vec<IssueRef> {
    let mut found: Vec<(usize, IssueRef)> = Vec::new();
    for cap in ISSUE_URL.captures_iter(message) {
        if let Ok(number) = cap[3].parse() {
            found.push((
                cap.get(0).unwrap().start(),
                IssueRef { owner: cap[1].to_owned(), name: cap[2].to_owned(), number },
            ));
        }
    }
    for cap in ISSUE_HASH.captures_iter(message) {
        if let Ok(number) = cap[1].parse() {
            found.push((
                cap.get(1).unwrap().start(),
                IssueRef { owner: owner.to_owned(), name: name.to_owned(), number },
            ));
        }
    }
    found.sort_by_key(|(pos, _)| *pos);
    let mut seen = BTreeSet::new();
    found
        .into_iter()
        .filter_map(|(_, r)| seen.insert(r.clone()).then_some(r))
        .collect()
}

/// Looks up the body of an issue. Any failure yields `None`.
pub trait IssueResolver {
    fn issue_body(&self, issue: &IssueRef) -> Option<String>;
}

/// Fills `linked_issue_text` from the referenced issues that resolve.
pub fn resolve_linked_issue(commit: &mut CommitRecord, owner: &str, name: &str, resolver: &dyn IssueResolver) {
    let bodies: Vec<String> = issue_references(&commit.message, owner, name)
        .iter()
        .filter_map(|r| resolver.issue_body(r))
        .filter(|b| !b.trim().is_empty())
        .collect();
    commit.linked_issue_text = (!bodies.is_empty()).then(|| bodies.join("\n\n---\n\n"));
}
