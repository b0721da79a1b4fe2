#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use perfmine::backend::{ScriptFile, Scripted, ScriptedBackend};
use perfmine::classifier::{decide, PromptSet, Vote, VoteValue};
use perfmine::deptable::DependencyTable;
use perfmine::discovery::{search_url, DiscoveryConfig, RepoDescriptor, TestStatus};
use perfmine::harvest::{ChangeKind, CommitRecord, FileChange};
use perfmine::hosting::{FixtureTransport, GithubClient, Transcript, TranscriptEntry, DEFAULT_API_BASE};
use perfmine::orchestrator::{image_tag, BuildPlan};
use perfmine::pipeline::{cmd_mine, MineServices, MineSummary, PipelineConfig};
use perfmine::runtime::FakeRuntime;
use perfmine::stats::{judge, StatConfig, TimingSeries};
use perfmine::store::{patch_file_for, patch_id, BenchmarkEntry, BuildRecord, MeasurementNotes, TimingEvidence, Verification, SCHEMA_VERSION};

pub const OWNER: &str = "acme";
pub const NAME: &str = "sorter";
pub const PLANTED_TEST: &str = "bench_sort";

pub fn git(dir: &Path, args: &[&str]) -> String {
    git_at(dir, args, None)
}

/// Runs git with author and committer dates pinned to `date` (RFC 3339).
pub fn git_at(dir: &Path, args: &[&str], date: Option<&str>) -> String {
    let mut cmd = Command::new("git");
    cmd.current_dir(dir)
        .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com", "-c", "commit.gpgsign=false"])
        .args(args)
        .env("GIT_CONFIG_NOSYSTEM", "1");
    if let Some(d) = date {
        cmd.env("GIT_AUTHOR_DATE", d).env("GIT_COMMITTER_DATE", d);
    }
    let out = cmd.output().expect("git runs");
    assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().trim().to_owned()
}

pub fn write(root: &Path, rel: &str, text: &str) {
    let path = root.join(rel);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

fn commit_all(dir: &Path, message: &str, date: &str) -> String {
    git(dir, &["add", "-A"]);
    git_at(dir, &["commit", "-q", "-m", message], Some(date));
    git(dir, &["rev-parse", "HEAD"])
}

pub const CMAKE_LISTS: &str = "cmake_minimum_required(VERSION 3.16)
project(sorter CXX)
set(CMAKE_CXX_STANDARD 17)
enable_testing()
add_executable(bench_sort src/sort.cpp tests/bench_sort.cpp)
add_test(NAME bench_sort COMMAND bench_sort)
add_executable(unit_basic tests/unit_basic.cpp)
add_test(NAME unit_basic COMMAND unit_basic)
";

pub fn sort_source(cost_ms: u32, body: &str) -> String {
    format!(
        "// perfmine-fake: test={PLANTED_TEST} cost_ms={cost_ms}\n#include <vector>\n\nvoid sort_values(std::vector<int>& v) {{\n{body}}}\n"
    )
}

const SLOW_BODY: &str = "    for (size_t i = 0; i < v.size(); ++i)\n        for (size_t j = i + 1; j < v.size(); ++j)\n            if (v[j] < v[i]) std::swap(v[i], v[j]);\n";
const FAST_BODY: &str = "    std::sort(v.begin(), v.end());\n";

/// The mining fixture: a root commit followed by five commits, one that
/// exercises each structural rule and one performance fix.
pub struct FixtureRepo {
    pub dir: PathBuf,
    pub root: String,
    pub out_of_window: String,
    pub non_cpp: String,
    pub touches_tests: String,
    pub oversized: String,
    pub perf: String,
}

impl FixtureRepo {
    pub fn create(dir: &Path) -> FixtureRepo {
        std::fs::create_dir_all(dir).unwrap();
        git(dir, &["init", "-q", "-b", "main"]);
        write(dir, "CMakeLists.txt", CMAKE_LISTS);
        write(dir, "README.md", "# sorter\n");
        write(dir, "src/sort.cpp", &sort_source(50, SLOW_BODY));
        write(dir, "tests/bench_sort.cpp", "int main() { return 0; }\n");
        write(dir, "tests/unit_basic.cpp", "// perfmine-fake: test=unit_basic cost_ms=5\nint main() { return 0; }\n");
        let root = commit_all(dir, "Initial import", "2019-03-01T10:00:00Z");

        write(dir, "src/sort.cpp", &sort_source(50, &format!("    // keep insertion order for equal keys\n{SLOW_BODY}")));
        let out_of_window = commit_all(dir, "Document tie handling", "2019-09-01T10:00:00Z");

        write(dir, "README.md", "# sorter\n\nSorting helpers.\n");
        let non_cpp = commit_all(dir, "Expand the readme", "2021-03-01T10:00:00Z");

        write(dir, "tests/unit_basic.cpp", "// perfmine-fake: test=unit_basic cost_ms=5\n// checks empty input\nint main() { return 0; }\n");
        let touches_tests = commit_all(dir, "Cover empty input", "2021-06-01T10:00:00Z");

        for i in 1..=21 {
            write(dir, &format!("src/gen/part{i:02}.cpp"), &format!("int part{i}() {{ return {i}; }}\n"));
        }
        let oversized = commit_all(dir, "Add generated parts", "2022-01-01T10:00:00Z");

        write(dir, "src/sort.cpp", &sort_source(40, &format!("    // keep insertion order for equal keys\n{FAST_BODY}")));
        let perf = commit_all(dir, "Replace quadratic sort with std::sort", "2023-05-01T10:00:00Z");

        FixtureRepo { dir: dir.to_owned(), root, out_of_window, non_cpp, touches_tests, oversized, perf }
    }

    pub fn patch_id(&self) -> String {
        patch_id(OWNER, NAME, &self.perf)
    }
}

fn search_item(owner: &str, name: &str, stars: u64, clone_url: &str) -> serde_json::Value {
    serde_json::json!({
        "owner": {"login": owner},
        "name": name,
        "stargazers_count": stars,
        "language": "C++",
        "default_branch": "main",
        "clone_url": clone_url,
        "fork": false,
        "archived": false,
    })
}

/// Search results for the fixture repository, plus a 299-star repository
/// that discovery must drop.
pub fn transcript(repo: &Path, config: &DiscoveryConfig) -> Transcript {
    let items = vec![
        search_item(OWNER, NAME, 306, &repo.display().to_string()),
        search_item(OWNER, "almost", 299, "/nonexistent"),
    ];
    Transcript {
        responses: vec![TranscriptEntry {
            url: search_url(DEFAULT_API_BASE, config, 1),
            status: 200,
            headers: Default::default(),
            body: serde_json::json!({ "total_count": items.len(), "items": items }),
        }],
    }
}

/// Both phase-1 voters say Yes for the performance commit and No otherwise.
pub fn script(perf_sha: &str) -> ScriptFile {
    let mut script = ScriptFile { default: Some("No".into()), ..Default::default() };
    script
        .commits
        .insert(perf_sha.to_owned(), [("phase1".to_owned(), Scripted::One("Yes".into()))].into_iter().collect());
    script
}

pub fn fixture_config(out: &Path) -> PipelineConfig {
    PipelineConfig { out_dir: out.to_owned(), ..Default::default() }
}

pub struct Mined {
    pub fixture: FixtureRepo,
    pub summary: MineSummary,
    pub out: PathBuf,
    pub backend: ScriptedBackend,
}

/// Builds the fixture repository under `work` and mines it with the
/// scripted backend and the fake runtime into `work/out`.
pub fn mine_fixture(work: &Path) -> Mined {
    let fixture = FixtureRepo::create(&work.join("upstream"));
    let out = work.join("out");
    let config = fixture_config(&out);
    let github = GithubClient::new(Box::new(FixtureTransport::new(transcript(&fixture.dir, &config.discovery))), None);
    let backend = ScriptedBackend::new(script(&fixture.perf));
    let runtime = FakeRuntime::new(out.join(".fake-runtime"));
    let table = DependencyTable::default();
    let prompts = PromptSet::default();
    let services = MineServices { github: &github, backend: &backend, runtime: &runtime, table: &table, prompts: &prompts };
    let summary = cmd_mine(&config, &services).expect("fixture mine succeeds");
    Mined { fixture, summary, out, backend }
}

fn fake_sha(seed: usize, salt: u8) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(format!("{seed}:{salt}").as_bytes())[..20])
}

/// A schema-valid entry without a backing image, for store tests.
pub fn synthetic_entry(owner: &str, name: &str, seed: usize, files: usize, significant: bool) -> BenchmarkEntry {
    let sha = fake_sha(seed, 1);
    let id = patch_id(owner, name, &sha);
    let changes = (0..files)
        .map(|i| FileChange {
            path: format!("src/f{i}.cpp"),
            change_kind: ChangeKind::Modified,
            old_path: None,
            lines_added: 3,
            lines_deleted: 1,
        })
        .collect();
    let pre: Vec<f64> = (0..30).map(|i| 100.0 + i as f64 * 0.1).collect();
    let post: Vec<f64> = if significant {
        pre.iter().map(|v| v * 0.8).collect()
    } else {
        pre.iter().map(|v| v * 0.99).collect()
    };
    let series = TimingSeries { test_name: "bench".into(), pre_ms: pre, post_ms: post };
    let stats = StatConfig::default();
    let result = judge(&series, &stats).unwrap();
    assert_eq!(result.significant, significant);
    let yes = Vote::new(VoteValue::Yes, "a");
    BenchmarkEntry {
        schema_version: SCHEMA_VERSION,
        patch_id: id.clone(),
        repo: RepoDescriptor {
            owner: owner.into(),
            name: name.into(),
            stars: 306,
            primary_language: "C++".into(),
            default_branch: "main".into(),
            head_sha: Some(fake_sha(seed, 3)),
            has_root_cmake: true,
            has_cmake_tests: true,
            head_tests_pass: TestStatus::Pass,
            clone_url: format!("https://example.com/{owner}/{name}.git"),
            fork: false,
            archived: false,
        },
        commit: CommitRecord {
            sha,
            parent_sha: fake_sha(seed, 2),
            author_timestamp: "2022-02-02T00:00:00Z".parse().unwrap(),
            message: "Speed up lookups".into(),
            linked_issue_text: None,
            changes,
            diff: String::new(),
        },
        patch_file: patch_file_for(&id),
        classification: decide([yes.clone(), Vote::new(VoteValue::Yes, "b")], None).unwrap(),
        build: BuildRecord { plan: BuildPlan::for_project(None, &[]), image: image_tag(&id) },
        timing: vec![TimingEvidence::new(&series, result)],
        has_significant_test: significant,
        measurement: MeasurementNotes {
            runs_requested: 31,
            runs_recorded: 30,
            warmup_discarded: true,
            invocation: "whole_suite".into(),
            per_test_source: "ctest_junit".into(),
            stat_config: stats,
        },
        prompts: PromptSet::default().fingerprints(),
        verified: Verification::Unreviewed,
        review_note: None,
    }
}

pub const MINIMAL_CMAKE: &str = "cmake_minimum_required(VERSION 3.16)\nproject(demo CXX)\nenable_testing()\n";

/// A two-commit repository; returns the second commit, ready to orchestrate.
pub fn project_repo(dir: &Path, before: &[(&str, &str)], after: &[(&str, &str)]) -> CommitRecord {
    std::fs::create_dir_all(dir).unwrap();
    git(dir, &["init", "-q", "-b", "main"]);
    write(dir, "CMakeLists.txt", MINIMAL_CMAKE);
    for (path, text) in before {
        write(dir, path, text);
    }
    commit_all(dir, "Base", "2022-01-01T00:00:00Z");
    for (path, text) in after {
        write(dir, path, text);
    }
    commit_all(dir, "Change", "2022-02-01T00:00:00Z");
    let walk = perfmine::harvest::scan_history(dir, "HEAD", perfmine::harvest::DateSource::Author).unwrap();
    walk.last().expect("two commits").unwrap()
}

pub fn descriptor(dir: &Path) -> RepoDescriptor {
    RepoDescriptor {
        owner: OWNER.into(),
        name: "demo".into(),
        stars: 500,
        primary_language: "C++".into(),
        default_branch: "main".into(),
        head_sha: None,
        has_root_cmake: true,
        has_cmake_tests: true,
        head_tests_pass: TestStatus::Pass,
        clone_url: dir.display().to_string(),
        fork: false,
        archived: false,
    }
}

pub const SPIN_CMAKE: &str = "cmake_minimum_required(VERSION 3.16)
project(spin CXX)
set(CMAKE_CXX_STANDARD 17)
enable_testing()
add_executable(spin_test spin.cpp)
add_test(NAME spin_test COMMAND spin_test)
";

/// A test that busy-waits for `ms` milliseconds.
pub fn spin_source(ms: u32) -> String {
    format!(
        "#include <chrono>\nint main() {{\n    auto end = std::chrono::steady_clock::now() + std::chrono::milliseconds({ms});\n    volatile unsigned long n = 0;\n    while (std::chrono::steady_clock::now() < end) ++n;\n    return n == 0;\n}}\n"
    )
}

/// A real CMake project whose patched version spins 20% less.
pub fn spin_repo(dir: &Path) -> CommitRecord {
    std::fs::create_dir_all(dir).unwrap();
    git(dir, &["init", "-q", "-b", "main"]);
    write(dir, "CMakeLists.txt", SPIN_CMAKE);
    write(dir, "spin.cpp", &spin_source(50));
    commit_all(dir, "Base", "2022-01-01T00:00:00Z");
    write(dir, "spin.cpp", &spin_source(40));
    commit_all(dir, "Spin less", "2022-02-01T00:00:00Z");
    let walk = perfmine::harvest::scan_history(dir, "HEAD", perfmine::harvest::DateSource::Author).unwrap();
    walk.last().unwrap().unwrap()
}
