//! Parsing ctest's machine-readable outputs.

use std::sync::LazyLock;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

/// Smallest wall time recorded for a test. ctest reports sub-resolution
/// durations as zero, which the timing model does not allow.
pub const MIN_RECORDED_MS: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum CtestError {
    #[error("malformed ctest JUnit report: {0}")]
    Junit(String),
    #[error("malformed ctest test listing: {0}")]
    Listing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub wall_ms: f64,
}

fn floor_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).max(MIN_RECORDED_MS)
}

fn attr(e: &BytesStart, key: &str) -> Result<Option<String>, CtestError> {
    match e.try_get_attribute(key).map_err(|err| CtestError::Junit(err.to_string()))? {
        Some(a) => {
            let v = a.normalized_value(XmlVersion::Implicit1_0).map_err(|err| CtestError::Junit(err.to_string()))?;
            Ok(Some(v.into_owned()))
        }
        None => Ok(None),
    }
}

/// Parses the report written by `ctest --output-junit`.
pub fn parse_junit(xml: &str) -> Result<Vec<CaseResult>, CtestError> {
    let mut reader = Reader::from_str(xml);
    let mut cases: Vec<CaseResult> = Vec::new();
    let mut open_case = false;
    loop {
        let event = reader.read_event().map_err(|e| CtestError::Junit(e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) if e.name().as_ref() == "testcase" => {
                let name = attr(e, "name")?.ok_or_else(|| CtestError::Junit("testcase without a name".into()))?;
                let time = attr(e, "time")?.unwrap_or_default();
                let seconds: f64 = time
                    .parse()
                    .map_err(|_| CtestError::Junit(format!("bad time {time:?} for {name}")))?;
                let status = attr(e, "status")?.unwrap_or_else(|| "run".into());
                cases.push(CaseResult { name, passed: status == "run", wall_ms: floor_ms(seconds) });
                open_case = matches!(event, Event::Start(_));
            }
            Event::Start(ref e) | Event::Empty(ref e)
                if open_case && matches!(e.name().as_ref(), "failure" | "error" | "skipped") =>
            {
                if let Some(last) = cases.last_mut() {
                    last.passed = false;
                }
            }
            Event::End(ref e) if e.name().as_ref() == "testcase" => open_case = false,
            Event::Eof => break,
            _ => {}
        }
    }
    Ok(cases)
}

static RESULT_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^\s*\d+/\d+\s+Test\s+#\d+:\s+(\S+)\s[\s.]*?(\*{3})?([A-Za-z][^\n]*?)\s+([0-9]+(?:\.[0-9]+)?)\s+sec\s*$")
        .expect("valid regex")
});

/// Parses ctest's console summary lines. Resolution is whatever ctest
/// printed, typically 10 ms.
pub fn parse_console(stdout: &str) -> Vec<CaseResult> {
    RESULT_LINE
        .captures_iter(stdout)
        .map(|c| {
            let passed = c.get(2).is_none() && c[3].trim() == "Passed";
            CaseResult { name: c[1].to_owned(), passed, wall_ms: floor_ms(c[4].parse().unwrap_or(0.0)) }
        })
        .collect()
}

#[derive(Deserialize)]
struct Listing {
    #[serde(default)]
    tests: Vec<ListedTest>,
}

#[derive(Deserialize)]
struct ListedTest {
    name: String,
}

/// Test names from `ctest --show-only=json-v1`.
pub fn parse_test_list(json: &str) -> Result<Vec<String>, CtestError> {
    let listing: Listing = serde_json::from_str(json).map_err(|e| CtestError::Listing(e.to_string()))?;
    Ok(listing.tests.into_iter().map(|t| t.name).collect())
}
