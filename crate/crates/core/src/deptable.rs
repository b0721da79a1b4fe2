//! Table mapping missing-dependency error signatures to packages.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

const DEFAULT_TABLE: &str = include_str!("../data/dependency-signatures.toml");

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read dependency table {path}: {detail}")]
    Read { path: String, detail: String },
    #[error("invalid dependency table: {0}")]
    Parse(String),
    #[error("invalid signature pattern {pattern:?}: {detail}")]
    Pattern { pattern: String, detail: String },
}

#[derive(Debug, Deserialize)]
struct RawSignature {
    pattern: String,
    packages: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    #[serde(default)]
    headers: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    cmake_packages: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    libraries: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    signature: Vec<RawSignature>,
}

#[derive(Debug, Clone)]
pub struct DependencyTable {
    headers: BTreeMap<String, Vec<String>>,
    cmake_packages: BTreeMap<String, Vec<String>>,
    libraries: BTreeMap<String, Vec<String>>,
    signatures: Vec<(Regex, Vec<String>)>,
}

static MISSING_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"fatal error: ([^\s:]+): No such file or directory").unwrap());
static MISSING_CMAKE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"Could NOT find ([A-Za-z0-9_.+-]+)|package configuration file provided by\s+"([A-Za-z0-9_.+-]+)""#).unwrap()
});
static MISSING_LIB: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"cannot find -l([A-Za-z0-9_.+-]+)").unwrap());

fn push_unique(out: &mut Vec<String>, packages: &[String]) {
    for p in packages {
        if !out.contains(p) {
            out.push(p.clone());
        }
    }
}

impl Default for DependencyTable {
    fn default() -> Self {
        Self::parse(DEFAULT_TABLE).expect("shipped dependency table is valid")
    }
}

impl DependencyTable {
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let raw: RawTable = toml::from_str(text).map_err(|e| TableError::Parse(e.to_string()))?;
        let signatures = raw
            .signature
            .into_iter()
            .map(|s| {
                Regex::new(&s.pattern)
                    .map(|re| (re, s.packages))
                    .map_err(|e| TableError::Pattern { pattern: s.pattern.clone(), detail: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { headers: raw.headers, cmake_packages: raw.cmake_packages, libraries: raw.libraries, signatures })
    }

    pub fn load(path: &Path) -> Result<Self, TableError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TableError::Read { path: path.display().to_string(), detail: e.to_string() })?;
        Self::parse(&text)
    }

    fn header_packages(&self, header: &str) -> Option<&Vec<String>> {
        if let Some(p) = self.headers.get(header) {
            return Some(p);
        }
        // Longest directory prefix wins.
        self.headers
            .iter()
            .filter(|(k, _)| k.ends_with('/') && header.starts_with(k.as_str()))
            .max_by_key(|(k, _)| k.len())
            .map(|(_, v)| v)
    }

    /// Packages suggested by the signatures found in `log`, in order of first
    /// appearance in the log.
    pub fn suggest(&self, log: &str) -> Vec<String> {
        let mut hits: Vec<(usize, &Vec<String>)> = Vec::new();
        for c in MISSING_HEADER.captures_iter(log) {
            if let Some(p) = self.header_packages(&c[1]) {
                hits.push((c.get(0).unwrap().start(), p));
            }
        }
        for c in MISSING_CMAKE.captures_iter(log) {
            let name = c.get(1).or(c.get(2)).unwrap().as_str();
            if let Some(p) = self.cmake_packages.get(name) {
                hits.push((c.get(0).unwrap().start(), p));
            }
        }
        for c in MISSING_LIB.captures_iter(log) {
            if let Some(p) = self.libraries.get(&c[1]) {
                hits.push((c.get(0).unwrap().start(), p));
            }
        }
        for (re, packages) in &self.signatures {
            if let Some(m) = re.find(log) {
                hits.push((m.start(), packages));
            }
        }
        hits.sort_by_key(|(at, _)| *at);
        let mut out = Vec::new();
        for (_, packages) in hits {
            push_unique(&mut out, packages);
        }
        out
    }
}

static PACKAGE_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z0-9][a-z0-9+.-]+$").unwrap());

/// Package names from a free-form model reply, one per line. Bullets and
/// backticks are stripped; anything that is not a plausible package name is
/// ignored, and `NONE` yields nothing.
pub fn parse_package_reply(reply: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in reply.lines() {
        let cleaned = line.trim().trim_start_matches(['-', '*', '•']).trim().trim_matches('`').trim();
        if cleaned.eq_ignore_ascii_case("none") {
            continue;
        }
        // Either a bare name or an install command listing several.
        let tokens: Vec<&str> = match cleaned.trim_start_matches("sudo ").strip_prefix("apt-get install") {
            Some(rest) => rest.split_whitespace().filter(|t| !t.starts_with('-')).collect(),
            None if !cleaned.contains(char::is_whitespace) => vec![cleaned],
            None => continue,
        };
        for token in tokens {
            let token = token.trim_matches([',', '`', '.']);
            if PACKAGE_NAME.is_match(token) {
                push_unique(&mut out, &[token.to_owned()]);
            }
        }
    }
    out
}
