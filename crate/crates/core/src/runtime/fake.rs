//! In-process fake runtime.
//!
//! Source checkout, copying and patching run for real with host git, so
//! diffs apply exactly as they would in a container. Configure, build,
//! install and test steps are simulated from directives embedded in the
//! project's sources:
//!
//! ```text
//! // perfmine-fake: test=bench_sort cost_ms=50
//! // perfmine-fake: test=flaky fail_run=17
//! // perfmine-fake: test=broken fail=always
//! // perfmine-fake: requires=zlib.h package=zlib1g-dev
//! // perfmine-fake: requires_cmake=ZLIB package=zlib1g-dev
//! // perfmine-fake: requires_lib=fmt package=libfmt-dev
//! ```
//!
//! Costs for the same test add up across directives. Timings get a small
//! deterministic jitter. Only packages named by some directive in the
//! container's trees can be installed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dir::{run_host_script, ContainerMeta, DirStore};
use super::{ContainerHandle, ContainerRuntime, ExecOutput, ResourceLimits, RuntimeError, Step};
use crate::IMAGE_PREFIX;

pub const FAKE_DIRECTIVE: &str = "perfmine-fake:";

const SCANNED_EXTENSIONS: &[&str] = &["cpp", "cc", "cxx", "c++", "hpp", "hh", "hxx", "h", "ipp", "inl", "tpp", "cmake", "txt"];
const CONFIG_MARKER: &str = ".fake-config.json";
const BUILD_MARKER: &str = ".fake-build.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FakeTest {
    cost_ms: f64,
    fail_runs: BTreeSet<u32>,
    always_fail: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum RequirementKind {
    Header,
    CMakePackage,
    Library,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Requirement {
    kind: RequirementKind,
    name: String,
    package: String,
    file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct FakeProject {
    tests: BTreeMap<String, FakeTest>,
    requirements: Vec<Requirement>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigMarker {
    source_dir: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BuildMarker {
    tests: BTreeMap<String, FakeTest>,
    runs_done: u32,
}

fn scan_project(root: &Path) -> FakeProject {
    let mut project = FakeProject::default();
    let mut stack = vec![root.to_path_buf()];
    let mut files = Vec::new();
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for entry in entries.flatten() {
            let path = entry.path();
            let name = entry.file_name();
            if name == ".git" {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| SCANNED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            {
                files.push(path);
            }
        }
    }
    files.sort();
    for file in files {
        let Ok(text) = std::fs::read_to_string(&file) else { continue };
        let rel = file.strip_prefix(root).unwrap_or(&file).display().to_string();
        for line in text.lines() {
            let Some(idx) = line.find(FAKE_DIRECTIVE) else { continue };
            let fields: BTreeMap<&str, &str> = line[idx + FAKE_DIRECTIVE.len()..]
                .split_whitespace()
                .filter_map(|tok| tok.split_once('='))
                .collect();
            if let Some(test) = fields.get("test") {
                let entry = project.tests.entry(test.to_string()).or_default();
                if let Some(cost) = fields.get("cost_ms").and_then(|c| c.parse::<f64>().ok()) {
                    entry.cost_ms += cost;
                }
                if let Some(run) = fields.get("fail_run").and_then(|r| r.parse().ok()) {
                    entry.fail_runs.insert(run);
                }
                if fields.get("fail") == Some(&"always") {
                    entry.always_fail = true;
                }
            }
            let package = fields.get("package").map(|p| p.to_string());
            for (key, kind) in [
                ("requires", RequirementKind::Header),
                ("requires_cmake", RequirementKind::CMakePackage),
                ("requires_lib", RequirementKind::Library),
            ] {
                if let (Some(name), Some(package)) = (fields.get(key), &package) {
                    project.requirements.push(Requirement {
                        kind,
                        name: name.to_string(),
                        package: package.clone(),
                        file: rel.clone(),
                    });
                }
            }
        }
    }
    project
}

fn jitter(seed: &str, test: &str, run: u32, amplitude: f64) -> f64 {
    let digest = Sha256::digest(format!("{seed}\0{test}\0{run}").as_bytes());
    let raw = u64::from_le_bytes(digest[..8].try_into().unwrap());
    let unit = raw as f64 / u64::MAX as f64; // [0, 1]
    1.0 + amplitude * (2.0 * unit - 1.0)
}

fn output(exit_code: i32, stdout: String, stderr: String, elapsed: Duration) -> ExecOutput {
    ExecOutput { exit_code, stdout, stderr, elapsed }
}

#[derive(Debug, Clone)]
pub struct FakeRuntime {
    store: DirStore,
    jitter: f64,
    offline: bool,
}

impl FakeRuntime {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { store: DirStore::new(root), jitter: 0.01, offline: false }
    }

    /// A runtime that reports itself unreachable on every call.
    pub fn unreachable(root: impl Into<PathBuf>) -> Self {
        Self { offline: true, ..Self::new(root) }
    }

    /// Relative timing jitter amplitude (default 0.01, i.e. ±1%).
    pub fn with_jitter(mut self, amplitude: f64) -> Self {
        self.jitter = amplitude;
        self
    }

    pub fn store(&self) -> &DirStore {
        &self.store
    }

    fn socket(&self) -> String {
        format!("fake://{}", self.store.root().display())
    }

    fn check_online(&self) -> Result<(), RuntimeError> {
        if self.offline {
            return Err(RuntimeError::Unreachable {
                runtime: "fake".into(),
                socket: self.socket(),
                detail: "runtime configured as unreachable".into(),
            });
        }
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, path: &Path) -> Option<T> {
        serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), RuntimeError> {
        std::fs::create_dir_all(path.parent().expect("marker parent"))?;
        std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
        Ok(())
    }

    /// Packages some directive in any tree under /work refers to.
    fn catalog(&self, c: &ContainerHandle) -> BTreeSet<String> {
        scan_project(&self.store.host_path(c, super::WORK_ROOT))
            .requirements
            .into_iter()
            .map(|r| r.package)
            .collect()
    }

    fn missing(&self, meta: &ContainerMeta, project: &FakeProject, kind: RequirementKind) -> Vec<Requirement> {
        project
            .requirements
            .iter()
            .filter(|r| r.kind == kind && !meta.installed.contains(&r.package))
            .cloned()
            .collect()
    }

    fn configure(&self, c: &ContainerHandle, source_dir: &str, build_dir: &str) -> Result<ExecOutput, RuntimeError> {
        let src = self.store.host_path(c, source_dir);
        if !src.join("CMakeLists.txt").is_file() {
            return Ok(output(
                1,
                String::new(),
                format!("CMake Error: The source directory \"{source_dir}\" does not appear to contain CMakeLists.txt."),
                Duration::ZERO,
            ));
        }
        let meta = self.store.meta(c)?;
        let project = scan_project(&src);
        let missing = self.missing(&meta, &project, RequirementKind::CMakePackage);
        if !missing.is_empty() {
            let errs: Vec<String> = missing
                .iter()
                .map(|r| {
                    format!(
                        "CMake Error at /usr/share/cmake/Modules/FindPackageHandleStandardArgs.cmake:230 (message):\n  Could NOT find {} (missing: {}_LIBRARY {}_INCLUDE_DIR)",
                        r.name,
                        r.name.to_ascii_uppercase(),
                        r.name.to_ascii_uppercase()
                    )
                })
                .collect();
            return Ok(output(1, "-- Configuring incomplete, errors occurred!".into(), errs.join("\n"), Duration::ZERO));
        }
        let build = self.store.host_path(c, build_dir);
        let _ = std::fs::remove_file(build.join(BUILD_MARKER));
        self.write_json(&build.join(CONFIG_MARKER), &ConfigMarker { source_dir: source_dir.to_owned() })?;
        Ok(output(0, format!("-- Configuring done\n-- Generating done\n-- Build files have been written to: {build_dir}"), String::new(), Duration::ZERO))
    }

    fn build(&self, c: &ContainerHandle, build_dir: &str) -> Result<ExecOutput, RuntimeError> {
        let build = self.store.host_path(c, build_dir);
        let Some(config) = self.read_json::<ConfigMarker>(&build.join(CONFIG_MARKER)) else {
            return Ok(output(1, String::new(), format!("Error: {build_dir} is not a CMake build directory"), Duration::ZERO));
        };
        let meta = self.store.meta(c)?;
        let project = scan_project(&self.store.host_path(c, &config.source_dir));
        let mut errors = Vec::new();
        for r in self.missing(&meta, &project, RequirementKind::Header) {
            errors.push(format!("{}:1:10: fatal error: {}: No such file or directory\ncompilation terminated.", r.file, r.name));
        }
        for r in self.missing(&meta, &project, RequirementKind::Library) {
            errors.push(format!("/usr/bin/ld: cannot find -l{}: No such file or directory\ncollect2: error: ld returned 1 exit status", r.name));
        }
        if !errors.is_empty() {
            return Ok(output(2, String::new(), format!("{}\ngmake: *** [Makefile:146: all] Error 2", errors.join("\n")), Duration::ZERO));
        }
        self.write_json(&build.join(BUILD_MARKER), &BuildMarker { tests: project.tests.clone(), runs_done: 0 })?;
        Ok(output(0, format!("[100%] Built target {} test(s)", project.tests.len()), String::new(), Duration::ZERO))
    }

    fn list_tests(&self, c: &ContainerHandle, build_dir: &str) -> Result<ExecOutput, RuntimeError> {
        let build = self.store.host_path(c, build_dir);
        let Some(config) = self.read_json::<ConfigMarker>(&build.join(CONFIG_MARKER)) else {
            return Ok(output(1, String::new(), "No test configuration file found!".into(), Duration::ZERO));
        };
        let project = scan_project(&self.store.host_path(c, &config.source_dir));
        let tests: Vec<serde_json::Value> = project.tests.keys().map(|n| serde_json::json!({ "name": n })).collect();
        let body = serde_json::json!({"kind": "ctestInfo", "version": {"major": 1, "minor": 0}, "tests": tests});
        Ok(output(0, body.to_string(), String::new(), Duration::ZERO))
    }

    fn run_tests(&self, c: &ContainerHandle, build_dir: &str, junit_file: &str) -> Result<ExecOutput, RuntimeError> {
        let marker_path = self.store.host_path(c, build_dir).join(BUILD_MARKER);
        let Some(mut marker) = self.read_json::<BuildMarker>(&marker_path) else {
            return Ok(output(8, String::new(), "Could not find executable: project not built".into(), Duration::ZERO));
        };
        marker.runs_done += 1;
        let run = marker.runs_done;
        self.write_json(&marker_path, &marker)?;

        let total = marker.tests.len();
        let mut lines = vec![format!("Test project {build_dir}")];
        let mut failed = Vec::new();
        let mut elapsed_ms = 0.0;
        let mut junit = vec![format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<testsuite name=\"(empty)\" tests=\"{total}\">")];
        for (i, (name, test)) in marker.tests.iter().enumerate() {
            let ms = test.cost_ms.max(0.001) * jitter(build_dir, name, run, self.jitter);
            elapsed_ms += ms;
            let fails = test.always_fail || test.fail_runs.contains(&run);
            let escaped = quick_xml::escape::escape(name.as_str());
            junit.push(format!(
                "\t<testcase name=\"{escaped}\" classname=\"{escaped}\" time=\"{}\" status=\"{}\"/>",
                ms / 1000.0,
                if fails { "fail" } else { "run" }
            ));
            let status = if fails { "***Failed" } else { "   Passed" };
            if fails {
                failed.push(format!("\t{} - {} (Failed)", i + 1, name));
            }
            lines.push(format!("    Start {}: {}", i + 1, name));
            lines.push(format!("{}/{} Test #{}: {} {} {} {:.6} sec", i + 1, total, i + 1, name, ".".repeat(8), status, ms / 1000.0));
        }
        let pct = (100 * (total - failed.len())).checked_div(total).unwrap_or(100);
        lines.push(String::new());
        lines.push(format!("{pct}% tests passed, {} tests failed out of {total}", failed.len()));
        if !failed.is_empty() {
            lines.push(String::new());
            lines.push("The following tests FAILED:".into());
            lines.extend(failed.iter().cloned());
        }
        junit.push("</testsuite>".into());
        self.store.write_file(c, junit_file, junit.join("\n").as_bytes())?;
        let code = if failed.is_empty() { 0 } else { 8 };
        Ok(output(code, lines.join("\n"), String::new(), Duration::from_secs_f64(elapsed_ms / 1000.0)))
    }

    fn install(&self, c: &ContainerHandle, packages: &[String]) -> Result<ExecOutput, RuntimeError> {
        let catalog = self.catalog(c);
        if let Some(unknown) = packages.iter().find(|p| !catalog.contains(*p)) {
            return Ok(output(100, String::new(), format!("E: Unable to locate package {unknown}"), Duration::ZERO));
        }
        let mut meta = self.store.meta(c)?;
        for p in packages {
            if !meta.installed.contains(p) {
                meta.installed.push(p.clone());
            }
        }
        self.store.save_meta(c, &meta)?;
        Ok(output(0, format!("Setting up {}", packages.join(" ")), String::new(), Duration::ZERO))
    }

    /// Packages installed in a container so far.
    pub fn installed(&self, c: &ContainerHandle) -> Result<Vec<String>, RuntimeError> {
        Ok(self.store.meta(c)?.installed)
    }
}

impl ContainerRuntime for FakeRuntime {
    fn name(&self) -> &str {
        "fake"
    }

    fn ping(&self) -> Result<(), RuntimeError> {
        self.check_online()?;
        std::fs::create_dir_all(self.store.root())?;
        Ok(())
    }

    fn ensure_image(&self, image: &str) -> Result<(), RuntimeError> {
        self.check_online()?;
        if self.image_exists(image)? {
            Ok(())
        } else {
            Err(RuntimeError::ImagePull { image: image.to_owned(), detail: "no such snapshot in the fake runtime".into() })
        }
    }

    fn image_exists(&self, image: &str) -> Result<bool, RuntimeError> {
        self.check_online()?;
        Ok(!image.starts_with(IMAGE_PREFIX) || self.store.has_image(image))
    }

    fn create(&self, image: &str, _limits: &ResourceLimits) -> Result<ContainerHandle, RuntimeError> {
        self.ensure_image(image)?;
        self.store.create(image)
    }

    fn exec(&self, c: &ContainerHandle, step: &Step) -> Result<ExecOutput, RuntimeError> {
        self.check_online()?;
        match step {
            Step::Bootstrap => Ok(output(0, String::new(), String::new(), Duration::ZERO)),
            Step::Install { packages } => self.install(c, packages),
            Step::Configure { source_dir, build_dir, .. } => self.configure(c, source_dir, build_dir),
            Step::Build { build_dir, .. } => self.build(c, build_dir),
            Step::ListTests { build_dir } => self.list_tests(c, build_dir),
            Step::RunTests { build_dir, junit_file } => self.run_tests(c, build_dir, junit_file),
            Step::Clone { .. } | Step::RecordSha { .. } | Step::CopyTree { .. } | Step::ApplyPatch { .. } => {
                run_host_script(&step.render(&|p: &str| self.store.map(c, p)))
            }
        }
    }

    fn write_file(&self, c: &ContainerHandle, path: &str, contents: &[u8]) -> Result<(), RuntimeError> {
        self.check_online()?;
        self.store.write_file(c, path, contents)
    }

    fn read_file(&self, c: &ContainerHandle, path: &str) -> Result<Vec<u8>, RuntimeError> {
        self.check_online()?;
        self.store.read_file(c, path)
    }

    fn export_dir(&self, c: &ContainerHandle, path: &str, host_dest: &Path) -> Result<(), RuntimeError> {
        self.store.export_dir(c, path, host_dest)
    }

    fn commit(&self, c: &ContainerHandle, tag: &str) -> Result<String, RuntimeError> {
        self.check_online()?;
        self.store.commit(c, tag)
    }

    fn remove(&self, c: &ContainerHandle) -> Result<(), RuntimeError> {
        self.store.remove(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, text: &str) {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    }

    #[test]
    fn scans_directives() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "CMakeLists.txt", "project(x)\n# perfmine-fake: requires_cmake=ZLIB package=zlib1g-dev\n");
        write(tmp.path(), "src/a.cpp", "// perfmine-fake: test=t1 cost_ms=10\n// perfmine-fake: test=t1 cost_ms=5 fail_run=3\n");
        write(tmp.path(), "src/b.hpp", "#include <zlib.h> // perfmine-fake: requires=zlib.h package=zlib1g-dev\n");
        write(tmp.path(), ".git/x.cpp", "// perfmine-fake: test=hidden cost_ms=1\n");
        let p = scan_project(tmp.path());
        assert_eq!(p.tests.len(), 1);
        assert_eq!(p.tests["t1"].cost_ms, 15.0);
        assert!(p.tests["t1"].fail_runs.contains(&3));
        assert_eq!(p.requirements.len(), 2);
    }

    #[test]
    fn jitter_is_bounded_and_deterministic() {
        for run in 0..100 {
            let j = jitter("s", "t", run, 0.01);
            assert!((0.99..=1.01).contains(&j));
            assert_eq!(j, jitter("s", "t", run, 0.01));
        }
    }

    #[test]
    fn unreachable_names_socket() {
        let tmp = tempfile::tempdir().unwrap();
        let rt = FakeRuntime::unreachable(tmp.path());
        match rt.ping() {
            Err(RuntimeError::Unreachable { socket, .. }) => assert!(socket.starts_with("fake://")),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }
}
