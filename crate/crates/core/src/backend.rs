//! Model backends: an HTTP chat-completion client and a scripted stub that
//! replays responses keyed by commit sha.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENDPOINT_ENV: &str = "LLM_ENDPOINT";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("model backend transport failure: {0}")]
    Transport(String),
    #[error("model backend returned an unusable payload: {0}")]
    Payload(String),
    #[error("no scripted response for {subject} ({key})")]
    NoScript { subject: String, key: String },
    #[error("backend configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Phase1,
    Phase2,
    Repair,
}

impl Purpose {
    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Phase1 => "phase1",
            Purpose::Phase2 => "phase2",
            Purpose::Repair => "repair",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub purpose: Purpose,
    /// Commit sha the request is about.
    pub subject: &'a str,
    pub temperature: f64,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError>;
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self { free: Mutex::new(limit.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// OpenAI-compatible `/v1/chat/completions` client (Ollama, vLLM, llama.cpp server).
pub struct HttpChatBackend {
    agent: ureq::Agent,
    url: String,
    limiter: InFlight,
}

impl HttpChatBackend {
    pub fn new(endpoint: &str, timeout: Duration, max_in_flight: usize) -> Result<Self, BackendError> {
        let base = endpoint.trim_end_matches('/');
        if base.is_empty() {
            return Err(BackendError::Config("empty model endpoint".into()));
        }
        let url = if base.ends_with("/chat/completions") {
            base.to_owned()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        };
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        Ok(Self { agent, url, limiter: InFlight::new(max_in_flight) })
    }

    pub fn from_env(timeout: Duration, max_in_flight: usize) -> Result<Self, BackendError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| BackendError::Config(format!("{ENDPOINT_ENV} is not set")))?;
        Self::new(&endpoint, timeout, max_in_flight)
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl ModelBackend for HttpChatBackend {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        let _slot = self.limiter.acquire();
        let payload = serde_json::json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "stream": false,
        });
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(&payload)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Payload(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Payload(body.to_string()))
    }
}

/// A scripted answer: a single string, or a sequence consumed one per call
/// (the last element repeats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scripted {
    One(String),
    Sequence(Vec<String>),
}

impl Scripted {
    fn nth(&self, i: usize) -> Option<&str> {
        match self {
            Scripted::One(s) => Some(s),
            Scripted::Sequence(v) => v.get(i).or(v.last()).map(String::as_str),
        }
    }
}

/// Fixture file format for [`ScriptedBackend`].
///
/// Keys inside a commit entry are tried in order `"<purpose>:<model>"`,
/// `"<purpose>"`; commit keys may be sha prefixes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub default: Option<String>,
    #[serde(default)]
    pub commits: BTreeMap<String, BTreeMap<String, Scripted>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedPrompt {
    pub subject: String,
    pub model: String,
    pub purpose: Purpose,
    pub prompt: String,
}

/// Deterministic backend for tests and offline runs. Records every prompt.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    script: ScriptFile,
    calls: Mutex<BTreeMap<(String, String), usize>>,
    captured: Mutex<Vec<CapturedPrompt>>,
}

impl ScriptedBackend {
    pub fn new(script: ScriptFile) -> Self {
        Self { script, ..Default::default() }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    pub fn captured(&self) -> Vec<CapturedPrompt> {
        self.captured.lock().unwrap().clone()
    }

    fn entry_for(&self, subject: &str) -> Option<&BTreeMap<String, Scripted>> {
        self.script.commits.get(subject).or_else(|| {
            self.script
                .commits
                .iter()
                .find(|(k, _)| !k.is_empty() && subject.starts_with(k.as_str()))
                .map(|(_, v)| v)
        })
    }
}

impl ModelBackend for ScriptedBackend {
    fn complete(&self, request: &ModelRequest<'_>) -> Result<String, BackendError> {
        self.captured.lock().unwrap().push(CapturedPrompt {
            subject: request.subject.to_owned(),
            model: request.model.to_owned(),
            purpose: request.purpose,
            prompt: request.prompt.to_owned(),
        });
        let specific = format!("{}:{}", request.purpose.as_str(), request.model);
        let general = request.purpose.as_str().to_owned();
        let found = self.entry_for(request.subject).and_then(|entry| {
            entry
                .get(&specific)
                .map(|s| (specific.clone(), s))
                .or_else(|| entry.get(&general).map(|s| (general.clone(), s)))
        });
        let Some((key, scripted)) = found else {
            return self.script.default.clone().ok_or_else(|| BackendError::NoScript {
                subject: request.subject.to_owned(),
                key: specific,
            });
        };
        let mut calls = self.calls.lock().unwrap();
        let counter = calls.entry((request.subject.to_owned(), key)).or_insert(0);
        let answer = scripted.nth(*counter).unwrap_or_default().to_owned();
        *counter += 1;
        Ok(answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(model: &'a str, purpose: Purpose, subject: &'a str) -> ModelRequest<'a> {
        ModelRequest { model, prompt: "p", purpose, subject, temperature: 0.0 }
    }

    #[test]
    fn scripted_lookup_order_and_sequences() {
        let script: ScriptFile = serde_json::from_value(serde_json::json!({
            "commits": {
                "abc": {
                    "phase1:m1": "Yes",
                    "phase1": ["hmm", "No"],
                    "phase2": "Yes"
                }
            }
        }))
        .unwrap();
        let b = ScriptedBackend::new(script);
        assert_eq!(b.complete(&req("m1", Purpose::Phase1, "abcdef")).unwrap(), "Yes");
        assert_eq!(b.complete(&req("m2", Purpose::Phase1, "abcdef")).unwrap(), "hmm");
        assert_eq!(b.complete(&req("m2", Purpose::Phase1, "abcdef")).unwrap(), "No");
        assert_eq!(b.complete(&req("m2", Purpose::Phase1, "abcdef")).unwrap(), "No");
        assert!(matches!(
            b.complete(&req("m2", Purpose::Repair, "zzz")),
            Err(BackendError::NoScript { .. })
        ));
        assert_eq!(b.captured().len(), 5);
    }

    #[test]
    fn scripted_default_fallback() {
        let b = ScriptedBackend::new(ScriptFile { default: Some("No".into()), ..Default::default() });
        assert_eq!(b.complete(&req("m", Purpose::Phase2, "x")).unwrap(), "No");
    }

    #[test]
    fn endpoint_normalization() {
        let t = Duration::from_secs(1);
        assert_eq!(HttpChatBackend::new("http://h:1/", t, 1).unwrap().url(), "http://h:1/v1/chat/completions");
        assert_eq!(HttpChatBackend::new("http://h:1/v1", t, 1).unwrap().url(), "http://h:1/v1/chat/completions");
        assert!(HttpChatBackend::new("", t, 1).is_err());
    }
}
