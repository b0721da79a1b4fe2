//! Two-phase commit classification.
//!
//! Phase 1 shows two backends the commit message (and linked issue text, if
//! any) and asks for Yes/No/Maybe. Agreement on Yes or on No decides. Every
//! other pair escalates to phase 2, where a single backend also sees the
//! (size-bounded) diff and must answer Yes or No.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, ModelRequest, Purpose};
use crate::harvest::CommitRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifyError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{backend} gave no parseable answer for {sha} after a reprompt: {response:?}")]
    Unparseable { backend: String, sha: String, response: String },
    #[error(transparent)]
    Contract(#[from] ContractViolation),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractViolation {
    #[error("phase-1 votes ({0:?}, {1:?}) do not agree; a phase-2 vote is required")]
    Phase2Missing(VoteValue, VoteValue),
    #[error("phase-1 votes agree on {0:?}; a phase-2 vote must not be supplied")]
    Phase2Unexpected(VoteValue),
    #[error("phase-2 vote must be Yes or No")]
    Phase2Maybe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoteValue {
    Yes,
    No,
    Maybe,
}

impl VoteValue {
    pub const ALL: [VoteValue; 3] = [VoteValue::Yes, VoteValue::No, VoteValue::Maybe];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub value: VoteValue,
    pub backend_id: String,
    pub raw_response: String,
}

impl Vote {
    pub fn new(value: VoteValue, backend_id: impl Into<String>) -> Self {
        Self { value, backend_id: backend_id.into(), raw_response: format!("{value:?}") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationVerdict {
    pub phase1: [Vote; 2],
    pub phase2: Option<Vote>,
    #[serde(rename = "final")]
    pub label: Label,
    pub decided_in_phase: u8,
}

impl ClassificationVerdict {
    pub fn validate(&self) -> Result<(), String> {
        let again = decide(self.phase1.clone(), self.phase2.clone()).map_err(|e| e.to_string())?;
        if again != *self {
            return Err("classification fields are inconsistent with the decision rule".into());
        }
        Ok(())
    }
}

/// Whether phase-1 votes settle the label without escalation.
pub fn phase1_decides(a: VoteValue, b: VoteValue) -> Option<Label> {
    match (a, b) {
        (VoteValue::Yes, VoteValue::Yes) => Some(Label::Positive),
        (VoteValue::No, VoteValue::No) => Some(Label::Negative),
        _ => None,
    }
}

pub fn decide(phase1: [Vote; 2], phase2: Option<Vote>) -> Result<ClassificationVerdict, ContractViolation> {
    let (a, b) = (phase1[0].value, phase1[1].value);
    match (phase1_decides(a, b), &phase2) {
        (Some(label), None) => Ok(ClassificationVerdict { phase1, phase2: None, label, decided_in_phase: 1 }),
        (Some(_), Some(_)) => Err(ContractViolation::Phase2Unexpected(a)),
        (None, None) => Err(ContractViolation::Phase2Missing(a, b)),
        (None, Some(vote)) => {
            let label = match vote.value {
                VoteValue::Yes => Label::Positive,
                VoteValue::No => Label::Negative,
                VoteValue::Maybe => return Err(ContractViolation::Phase2Maybe),
            };
            Ok(ClassificationVerdict { phase1, phase2, label, decided_in_phase: 2 })
        }
    }
}

static ANSWER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").unwrap());

/// The last standalone Yes/No/Maybe token, case-insensitive.
pub fn parse_answer(response: &str) -> Option<VoteValue> {
    let last = ANSWER.find_iter(response).last()?;
    Some(match last.as_str().to_ascii_lowercase().as_str() {
        "yes" => VoteValue::Yes,
        "no" => VoteValue::No,
        _ => VoteValue::Maybe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub phase1_backends: [String; 2],
    pub phase2_backend: String,
    pub endpoint: Option<String>,
    pub temperature: f64,
    pub max_diff_bytes: usize,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            phase1_backends: ["qwen2.5:7b".into(), "qwen3:8b".into()],
            phase2_backend: "qwen3:8b".into(),
            endpoint: None,
            temperature: 0.0,
            max_diff_bytes: 64 * 1024,
            max_in_flight: 4,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.phase1_backends.iter().chain([&self.phase2_backend]).any(|b| b.trim().is_empty()) {
            return Err(ClassifyError::InvalidConfig("backend identifiers must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ClassifyError::InvalidConfig("temperature must be non-negative".into()));
        }
        if self.max_diff_bytes == 0 || self.max_in_flight == 0 {
            return Err(ClassifyError::InvalidConfig("max_diff_bytes and max_in_flight must be positive".into()));
        }
        Ok(())
    }
}

/// A versioned prompt template with `{{placeholder}}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(name: &str, text: &str) -> Self {
        Self { name: name.into(), text: text.into() }
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    pub fn render(&self, slots: &[(&str, &str)]) -> String {
        let mut out = self.text.clone();
        for (key, value) in slots {
            out = out.replace(&format!("{{{{{key}}}}}"), value);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub phase1: PromptTemplate,
    pub phase2: PromptTemplate,
    pub repair: PromptTemplate,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            phase1: PromptTemplate::new("phase1.v1", include_str!("../prompts/phase1.v1.txt")),
            phase2: PromptTemplate::new("phase2.v1", include_str!("../prompts/phase2.v1.txt")),
            repair: PromptTemplate::new("repair.v1", include_str!("../prompts/repair.v1.txt")),
        }
    }
}

/// Name and content hash of each template, for manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFingerprint {
    pub name: String,
    pub sha256: String,
}

impl PromptSet {
    pub fn fingerprints(&self) -> Vec<PromptFingerprint> {
        [&self.phase1, &self.phase2, &self.repair]
            .into_iter()
            .map(|t| PromptFingerprint { name: t.name.clone(), sha256: t.sha256() })
            .collect()
    }
}

const REMINDER_THREE: &str =
    "\n\nYour previous reply did not end with a usable answer. Reply with exactly one word: Yes, No, or Maybe.";
const REMINDER_TWO: &str =
    "\n\nYour previous reply did not end with a usable answer. Reply with exactly one word: Yes or No.";

fn issue_block(commit: &CommitRecord) -> String {
    match &commit.linked_issue_text {
        Some(text) => format!("\nLinked issue description:\n{text}\n"),
        None => String::new(),
    }
}

/// Truncates at a character boundary and appends an explicit marker.
pub fn truncate_diff(diff: &str, max_bytes: usize) -> String {
    if diff.len() <= max_bytes {
        return diff.to_owned();
    }
    let mut cut = max_bytes;
    while !diff.is_char_boundary(cut) {
        cut -= 1;
    }
    format!(
        "{}\n[... diff truncated: showing the first {cut} of {} bytes ...]\n",
        &diff[..cut],
        diff.len()
    )
}

pub struct Classifier<'a> {
    pub config: &'a BackendConfig,
    pub backend: &'a dyn ModelBackend,
    pub prompts: &'a PromptSet,
}

impl<'a> Classifier<'a> {
    pub fn new(config: &'a BackendConfig, backend: &'a dyn ModelBackend, prompts: &'a PromptSet) -> Self {
        Self { config, backend, prompts }
    }

    pub fn phase1_prompt(&self, commit: &CommitRecord) -> String {
        self.prompts
            .phase1
            .render(&[("message", &commit.message), ("issue_block", &issue_block(commit))])
    }

    pub fn phase2_prompt(&self, commit: &CommitRecord) -> String {
        self.prompts.phase2.render(&[
            ("message", &commit.message),
            ("issue_block", &issue_block(commit)),
            ("diff", &truncate_diff(&commit.diff, self.config.max_diff_bytes)),
        ])
    }

    fn ask(
        &self,
        commit: &CommitRecord,
        model: &str,
        purpose: Purpose,
        prompt: &str,
        reminder: &str,
        accept: impl Fn(VoteValue) -> bool,
    ) -> Result<Vote, ClassifyError> {
        let mut prompt = prompt.to_owned();
        let mut last = String::new();
        for attempt in 0..2 {
            if attempt == 1 {
                prompt.push_str(reminder);
            }
            let request = ModelRequest {
                model,
                prompt: &prompt,
                purpose,
                subject: &commit.sha,
                temperature: self.config.temperature,
            };
            last = self.backend.complete(&request)?;
            if let Some(value) = parse_answer(&last).filter(|v| accept(*v)) {
                return Ok(Vote { value, backend_id: model.to_owned(), raw_response: last });
            }
        }
        Err(ClassifyError::Unparseable { backend: model.to_owned(), sha: commit.sha.clone(), response: last })
    }

    /// Both phase-1 backends, queried concurrently.
    pub fn classify_phase1(&self, commit: &CommitRecord) -> Result<[Vote; 2], ClassifyError> {
        let prompt = self.phase1_prompt(commit);
        let [first, second] = &self.config.phase1_backends;
        let (a, b) = std::thread::scope(|s| {
            let other = s.spawn(|| self.ask(commit, second, Purpose::Phase1, &prompt, REMINDER_THREE, |_| true));
            let a = self.ask(commit, first, Purpose::Phase1, &prompt, REMINDER_THREE, |_| true);
            (a, other.join().expect("phase-1 worker panicked"))
        });
        Ok([a?, b?])
    }

    pub fn classify_phase2(&self, commit: &CommitRecord) -> Result<Vote, ClassifyError> {
        let prompt = self.phase2_prompt(commit);
        self.ask(
            commit,
            &self.config.phase2_backend,
            Purpose::Phase2,
            &prompt,
            REMINDER_TWO,
            |v| v != VoteValue::Maybe,
        )
    }

    pub fn classify(&self, commit: &CommitRecord) -> Result<ClassificationVerdict, ClassifyError> {
        let phase1 = self.classify_phase1(commit)?;
        let phase2 = match phase1_decides(phase1[0].value, phase1[1].value) {
            Some(_) => None,
            None => Some(self.classify_phase2(commit)?),
        };
        Ok(decide(phase1, phase2)?)
    }
}
