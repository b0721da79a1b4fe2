//! Code-hosting REST client: pluggable transport, on-disk response cache,
//! rate-limit handling, and issue lookup.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::atomic_write;
use crate::harvest::{IssueRef, IssueResolver};

pub const DEFAULT_API_BASE: &str = "https://api.github.com";
pub const TOKEN_ENV: &str = "GITHUB_TOKEN";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApiError {
    #[error("authentication failed: {0} (set {TOKEN_ENV} to a valid token)")]
    Authentication(String),
    #[error("rate limit exhausted; retry after {retry_after:?}")]
    RateLimited { retry_after: Duration },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("{url} returned HTTP {status}")]
    Status { url: String, status: u16 },
    #[error("could not decode response from {url}: {detail}")]
    Decode { url: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    /// Lower-cased header names.
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, ApiError>;
}

/// Live HTTPS transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn get(&self, url: &str, headers: &[(String, String)]) -> Result<HttpResponse, ApiError> {
        let mut req = self.agent.get(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.call().map_err(|e| ApiError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_ascii_lowercase(), v.to_str().ok()?.to_owned())))
            .collect();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, headers, body })
    }
}

/// One recorded request/response pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub url: String,
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub headers: BTreeMap<String, String>,
    /// JSON body; strings are served verbatim.
    pub body: serde_json::Value,
}

fn ok_status() -> u16 {
    200
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Transcript {
    pub responses: Vec<TranscriptEntry>,
}

/// Replays a recorded transcript; unknown URLs answer 404.
#[derive(Debug, Default)]
pub struct FixtureTransport {
    responses: BTreeMap<String, HttpResponse>,
    requests: Mutex<Vec<String>>,
}

impl FixtureTransport {
    pub fn new(transcript: Transcript) -> Self {
        let responses = transcript
            .responses
            .into_iter()
            .map(|e| {
                let body = match e.body {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                (e.url, HttpResponse { status: e.status, headers: e.headers, body })
            })
            .collect();
        Self { responses, requests: Mutex::new(Vec::new()) }
    }

    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path).map_err(|e| ApiError::Transport(format!("{}: {e}", path.display())))?;
        let transcript: Transcript = serde_json::from_str(&text).map_err(|e| ApiError::Decode {
            url: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(Self::new(transcript))
    }

    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl HttpTransport for FixtureTransport {
    fn get(&self, url: &str, _headers: &[(String, String)]) -> Result<HttpResponse, ApiError> {
        self.requests.lock().unwrap().push(url.to_owned());
        Ok(self.responses.get(url).cloned().unwrap_or(HttpResponse {
            status: 404,
            headers: BTreeMap::new(),
            body: r#"{"message":"Not Found"}"#.into(),
        }))
    }
}

/// Successful response bodies on disk, keyed by a hash of the full request URL.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path_for(&self, url: &str) -> PathBuf {
        let key = hex::encode(Sha256::digest(url.as_bytes()));
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, url: &str) -> Option<String> {
        let text = std::fs::read_to_string(self.path_for(url)).ok()?;
        let cached: CachedBody = serde_json::from_str(&text).ok()?;
        (cached.url == url).then_some(cached.body)
    }

    pub fn put(&self, url: &str, body: &str) -> std::io::Result<()> {
        let record = CachedBody { url: url.to_owned(), body: body.to_owned() };
        atomic_write(&self.path_for(url), serde_json::to_string(&record)?.as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct CachedBody {
    url: String,
    body: String,
}

pub struct GithubClient {
    transport: Box<dyn HttpTransport>,
    token: Option<String>,
    base_url: String,
    cache: Option<ResponseCache>,
    /// Requests to the host are serialized.
    gate: Mutex<()>,
    max_backoff: Duration,
    max_attempts: u32,
}

impl GithubClient {
    pub fn new(transport: Box<dyn HttpTransport>, token: Option<String>) -> Self {
        Self {
            transport,
            token,
            base_url: DEFAULT_API_BASE.into(),
            cache: None,
            gate: Mutex::new(()),
            max_backoff: Duration::from_secs(60),
            max_attempts: 3,
        }
    }

    /// Live client; fails when no token is present in the environment.
    pub fn from_env(timeout: Duration) -> Result<Self, ApiError> {
        let token = std::env::var(TOKEN_ENV)
            .ok()
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| ApiError::Authentication(format!("{TOKEN_ENV} is not set")))?;
        Ok(Self::new(Box::new(UreqTransport::new(timeout)), Some(token)))
    }

    pub fn with_base_url(mut self, base: impl Into<String>) -> Self {
        self.base_url = base.into().trim_end_matches('/').to_owned();
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Longest rate-limit wait that is slept through instead of reported.
    pub fn with_max_backoff(mut self, backoff: Duration) -> Self {
        self.max_backoff = backoff;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn get_json(&self, url: &str) -> Result<serde_json::Value, ApiError> {
        let body = self.get_body(url)?;
        serde_json::from_str(&body).map_err(|e| ApiError::Decode { url: url.into(), detail: e.to_string() })
    }

    fn get_body(&self, url: &str) -> Result<String, ApiError> {
        if let Some(body) = self.cache.as_ref().and_then(|c| c.get(url)) {
            return Ok(body);
        }
        let _serial = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        let mut headers = vec![
            ("Accept".to_owned(), "application/vnd.github+json".to_owned()),
            ("User-Agent".to_owned(), "perfmine".to_owned()),
        ];
        if let Some(token) = &self.token {
            headers.push(("Authorization".into(), format!("Bearer {token}")));
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            let resp = self.transport.get(url, &headers)?;
            match resp.status {
                200..=299 => {
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(url, &resp.body) {
                            log::warn!("failed to cache {url}: {e}");
                        }
                    }
                    return Ok(resp.body);
                }
                401 => return Err(ApiError::Authentication(format!("{url} rejected the credentials"))),
                403 | 429 => {
                    let Some(wait) = rate_limit_wait(&resp) else {
                        return Err(if resp.status == 403 {
                            ApiError::Authentication(format!("{url} returned 403"))
                        } else {
                            ApiError::Status { url: url.into(), status: resp.status }
                        });
                    };
                    if wait > self.max_backoff || attempt >= self.max_attempts {
                        return Err(ApiError::RateLimited { retry_after: wait });
                    }
                    log::info!("rate limited; sleeping {wait:?}");
                    std::thread::sleep(wait);
                }
                status => return Err(ApiError::Status { url: url.into(), status }),
            }
        }
    }
}

fn rate_limit_wait(resp: &HttpResponse) -> Option<Duration> {
    if let Some(secs) = resp.headers.get("retry-after").and_then(|v| v.trim().parse::<u64>().ok()) {
        return Some(Duration::from_secs(secs));
    }
    if resp.headers.get("x-ratelimit-remaining").map(|v| v.trim()) == Some("0") {
        let reset = resp
            .headers
            .get("x-ratelimit-reset")
            .and_then(|v| v.trim().parse::<i64>().ok())
            .unwrap_or(0);
        let now = chrono::Utc::now().timestamp();
        return Some(Duration::from_secs((reset - now).max(1) as u64));
    }
    None
}

impl IssueResolver for GithubClient {
    fn issue_body(&self, issue: &IssueRef) -> Option<String> {
        let url = format!("{}/repos/{}/{}/issues/{}", self.base_url, issue.owner, issue.name, issue.number);
        match self.get_json(&url) {
            Ok(v) => {
                let title = v["title"].as_str().unwrap_or_default();
                let body = v["body"].as_str().unwrap_or_default();
                let text = format!("{title}\n\n{body}").trim().to_owned();
                (!text.is_empty()).then_some(text)
            }
            Err(e) => {
                log::debug!("issue {}/{}#{} unresolved: {e}", issue.owner, issue.name, issue.number);
                None
            }
        }
    }
}
