//! Repository discovery: search the hosting API, then gate each candidate on
//! root CMake configuration, registered tests, and a passing head build.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::git::Git;
use crate::harvest::is_full_sha;
use crate::hosting::{ApiError, GithubClient};

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error("invalid discovery configuration: {0}")]
    InvalidConfig(String),
    #[error("checkout of {repo} failed: {detail}")]
    Checkout { repo: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    #[default]
    Untested,
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoDescriptor {
    pub owner: String,
    pub name: String,
    pub stars: u64,
    pub primary_language: String,
    pub default_branch: String,
    #[serde(default)]
    pub head_sha: Option<String>,
    #[serde(default)]
    pub has_root_cmake: bool,
    #[serde(default)]
    pub has_cmake_tests: bool,
    #[serde(default)]
    pub head_tests_pass: TestStatus,
    /// Where the repository is cloned from.
    pub clone_url: String,
    #[serde(default)]
    pub fork: bool,
    #[serde(default)]
    pub archived: bool,
}

impl RepoDescriptor {
    pub fn full_name(&self) -> String {
        format!("{}/{}", self.owner, self.name)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (label, part) in [("owner", &self.owner), ("name", &self.name)] {
            if !valid_component(part) {
                return Err(format!("{label} `{part}` is empty or contains a path separator"));
            }
        }
        if let Some(sha) = &self.head_sha {
            if !is_full_sha(sha) {
                return Err(format!("head_sha `{sha}` is not a 40-character lowercase hex string"));
            }
        }
        Ok(())
    }

    /// All five requirements: stars and language (checked against `config`)
    /// plus the three gate fields.
    pub fn passes_gate(&self, config: &DiscoveryConfig) -> bool {
        self.stars >= config.min_stars
            && self.primary_language == config.language
            && self.has_root_cmake
            && self.has_cmake_tests
            && self.head_tests_pass == TestStatus::Pass
    }
}

fn valid_component(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\'])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub min_stars: u64,
    pub language: String,
    pub page_limit: u32,
    pub per_page: u32,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    pub include_forks: bool,
    pub include_archived: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            min_stars: 300,
            language: "C++".into(),
            page_limit: 10,
            per_page: 100,
            request_timeout: Duration::from_secs(30),
            include_forks: false,
            include_archived: true,
        }
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_secs())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs(u64::deserialize(d)?))
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.page_limit < 1 {
            return Err(DiscoveryError::InvalidConfig("page_limit must be at least 1".into()));
        }
        if !(1..=100).contains(&self.per_page) {
            return Err(DiscoveryError::InvalidConfig("per_page must lie in 1..=100".into()));
        }
        if self.language.trim().is_empty() {
            return Err(DiscoveryError::InvalidConfig("language is empty".into()));
        }
        Ok(())
    }

    fn query(&self) -> String {
        let mut q = format!("language:{} stars:>={}", self.language, self.min_stars);
        if !self.include_forks {
            q.push_str(" fork:false");
        }
        if !self.include_archived {
            q.push_str(" archived:false");
        }
        q
    }
}

/// The search URL for one result page (1-based).
pub fn search_url(base: &str, config: &DiscoveryConfig, page: u32) -> String {
    let mut url = url::Url::parse(&format!("{base}/search/repositories")).expect("valid base url");
    url.query_pairs_mut()
        .append_pair("q", &config.query())
        .append_pair("sort", "stars")
        .append_pair("order", "desc")
        .append_pair("per_page", &config.per_page.to_string())
        .append_pair("page", &page.to_string());
    url.to_string()
}

fn parse_item(item: &serde_json::Value) -> Option<RepoDescriptor> {
    let descriptor = RepoDescriptor {
        owner: item["owner"]["login"].as_str()?.to_owned(),
        name: item["name"].as_str()?.to_owned(),
        stars: item["stargazers_count"].as_u64()?,
        primary_language: item["language"].as_str().unwrap_or_default().to_owned(),
        default_branch: item["default_branch"].as_str().unwrap_or("main").to_owned(),
        head_sha: None,
        has_root_cmake: false,
        has_cmake_tests: false,
        head_tests_pass: TestStatus::Untested,
        clone_url: item["clone_url"].as_str()?.to_owned(),
        fork: item["fork"].as_bool().unwrap_or(false),
        archived: item["archived"].as_bool().unwrap_or(false),
    };
    descriptor.validate().ok()?;
    Some(descriptor)
}

/// Searches for candidate repositories, sorted by owner then name.
pub fn search_repositories(
    config: &DiscoveryConfig,
    api: &GithubClient,
) -> Result<Vec<RepoDescriptor>, DiscoveryError> {
    config.validate()?;
    let mut found: BTreeMap<(String, String), RepoDescriptor> = BTreeMap::new();
    for page in 1..=config.page_limit {
        let body = api.get_json(&search_url(api.base_url(), config, page))?;
        let items = body["items"].as_array().cloned().unwrap_or_default();
        for item in &items {
            let Some(repo) = parse_item(item) else {
                log::warn!("skipping malformed search item: {item}");
                continue;
            };
            let keep = repo.stars >= config.min_stars
                && repo.primary_language == config.language
                && (config.include_forks || !repo.fork)
                && (config.include_archived || !repo.archived);
            if keep {
                found.entry((repo.owner.clone(), repo.name.clone())).or_insert(repo);
            }
        }
        if items.len() < config.per_page as usize {
            break;
        }
    }
    Ok(found.into_values().collect())
}

/// Result of configuring, listing, building, and testing the head revision once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadProbe {
    /// Tests enumerated by the test runner after configuration, if it got that far.
    pub listed_tests: Option<usize>,
    pub tests_pass: bool,
}

/// One build-and-test run of a repository head, supplied by the build orchestrator.
pub trait HeadProber {
    fn probe(&self, repo: &RepoDescriptor, worktree: &Path) -> Result<HeadProbe, String>;
}

/// Populates the gate fields from a clean checkout of the repository head.
pub fn gate_repository(
    mut repo: RepoDescriptor,
    worktree: &Path,
    prober: &dyn HeadProber,
) -> Result<RepoDescriptor, DiscoveryError> {
    let checkout = |detail: String| DiscoveryError::Checkout { repo: repo.full_name(), detail };
    let head = Git::new(worktree).head_sha().map_err(|e| checkout(e.to_string()))?;
    match &repo.head_sha {
        Some(expected) if *expected != head => {
            return Err(checkout(format!("worktree is at {head}, expected {expected}")));
        }
        _ => repo.head_sha = Some(head),
    }
    repo.has_root_cmake = worktree.join("CMakeLists.txt").is_file();
    if !repo.has_root_cmake {
        repo.has_cmake_tests = false;
        repo.head_tests_pass = TestStatus::Untested;
        return Ok(repo);
    }
    match prober.probe(&repo, worktree) {
        Ok(probe) => {
            let listed = probe.listed_tests.unwrap_or(0);
            repo.has_cmake_tests = listed > 0;
            repo.head_tests_pass = if listed > 0 && probe.tests_pass { TestStatus::Pass } else { TestStatus::Fail };
        }
        Err(e) => {
            log::info!("{}: head build-and-test failed: {e}", repo.full_name());
            repo.head_tests_pass = TestStatus::Fail;
        }
    }
    Ok(repo)
}
