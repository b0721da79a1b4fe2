//! Building and timing the original and patched versions of a commit.
//!
//! One container holds both trees. They are built one after the other so
//! the second build starts from the packages the first one needed, and any
//! package added while building the patched tree triggers a rebuild of the
//! original so both are built from the same plan.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, ModelRequest, Purpose};
use crate::classifier::PromptTemplate;
use crate::ctest::{parse_console, parse_junit, parse_test_list, CaseResult};
use crate::deptable::{parse_package_reply, DependencyTable};
use crate::discovery::{HeadProbe, HeadProber, RepoDescriptor};
use crate::harvest::CommitRecord;
use crate::runtime::{ContainerHandle, ContainerRuntime, ExecOutput, ResourceLimits, RuntimeError, Step, LOGS_DIR, META_DIR};
use crate::IMAGE_PREFIX;

pub const DEFAULT_RUNS: usize = 31;
pub const DEFAULT_MAX_REPAIR_ROUNDS: usize = 3;
pub const FALLBACK_IMAGE: &str = "gcc:14";

/// Pinned toolchains by the newest C++ standard they are picked for.
const TOOLCHAINS: &[(u32, &str, &str)] = &[(14, "gcc:9", "gcc 9"), (17, "gcc:11", "gcc 11"), (20, "gcc:13", "gcc 13"), (u32::MAX, "gcc:14", "gcc 14")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Version {
    Original,
    Patched,
    /// A submitted patch under evaluation.
    Candidate,
    /// The repository's default-branch head, built for the discovery gate.
    Head,
}

impl Version {
    pub fn as_str(self) -> &'static str {
        match self {
            Version::Original => "original",
            Version::Patched => "patched",
            Version::Candidate => "candidate",
            Version::Head => "head",
        }
    }

    pub fn source_dir(self) -> String {
        format!("/work/{}", self.as_str())
    }

    pub fn build_dir(self) -> String {
        format!("/work/build/{}", self.as_str())
    }

    pub fn log_dir(self, log_root: &str) -> String {
        format!("{log_root}/{}", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildPlan {
    pub base_image: String,
    pub compiler_version: String,
    pub configure_args: Vec<String>,
    /// Every package installed, in installation order.
    pub install_packages: Vec<String>,
    pub repair_rounds_used: usize,
}

impl BuildPlan {
    /// A plan without repairs for the toolchain `cmake_lists` asks for.
    pub fn for_project(cmake_lists: Option<&str>, configure_args: &[String]) -> Self {
        let (base_image, compiler_version) = select_base_image(cmake_lists);
        Self {
            base_image: base_image.to_owned(),
            compiler_version: compiler_version.to_owned(),
            configure_args: configure_args.to_vec(),
            install_packages: Vec::new(),
            repair_rounds_used: 0,
        }
    }

    /// Whether two plans would produce the same build environment.
    pub fn same_arguments(&self, other: &BuildPlan) -> bool {
        self.base_image == other.base_image
            && self.configure_args == other.configure_args
            && self.install_packages == other.install_packages
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.base_image.trim().is_empty() {
            return Err("build plan has no base image".into());
        }
        let unique: BTreeSet<&String> = self.install_packages.iter().collect();
        if unique.len() != self.install_packages.len() {
            return Err("build plan lists a package twice".into());
        }
        Ok(())
    }
}

static STD_SETTING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)CMAKE_CXX_STANDARD\s+\x22?(\d+)|cxx_std_(\d+)").unwrap());

/// Newest C++ standard declared in a CMakeLists.txt.
pub fn declared_cxx_standard(cmake_lists: &str) -> Option<u32> {
    STD_SETTING
        .captures_iter(cmake_lists)
        .filter_map(|c| c.get(1).or(c.get(2))?.as_str().parse::<u32>().ok())
        // 98 predates 11 and is the only two-digit standard out of order.
        .map(|n| if n == 98 { 3 } else { n })
        .max()
}

/// Image and compiler label for a project, falling back to the newest toolchain.
pub fn select_base_image(cmake_lists: Option<&str>) -> (&'static str, &'static str) {
    let Some(std) = cmake_lists.and_then(declared_cxx_standard) else {
        return (FALLBACK_IMAGE, "gcc 14");
    };
    let (_, image, compiler) = TOOLCHAINS.iter().find(|(max, _, _)| std <= *max).expect("last toolchain is unbounded");
    (image, compiler)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub runs: usize,
    pub max_repair_rounds: usize,
    pub limits: ResourceLimits,
    pub jobs: usize,
    pub configure_args: Vec<String>,
    /// Bytes of build log sent to the repair model and kept in errors.
    pub log_tail_bytes: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            max_repair_rounds: DEFAULT_MAX_REPAIR_ROUNDS,
            limits: ResourceLimits::default(),
            jobs: 2,
            configure_args: vec!["-DCMAKE_BUILD_TYPE=Release".into(), "-DBUILD_TESTING=ON".into()],
            log_tail_bytes: 8 * 1024,
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.runs < 2 {
            return Err(OrchestratorError::Config("runs must be at least 2 (the first run is a warm-up)".into()));
        }
        if self.max_repair_rounds == 0 || self.jobs == 0 {
            return Err(OrchestratorError::Config("max_repair_rounds and jobs must be positive".into()));
        }
        if self.limits.cpus.is_some_and(|c| !(c > 0.0)) {
            return Err(OrchestratorError::Config("container cpus must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid orchestration config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("{step} failed with exit code {exit_code}: {output_tail}")]
    StepFailed { step: String, exit_code: i32, output_tail: String },
    #[error("build of {version:?} still failing after {rounds} repair round(s):\n{log_tail}")]
    RepairBudgetExhausted { version: Version, rounds: usize, log_tail: String },
    #[error("build of {version:?} failed with no known remedy:\n{log_tail}")]
    Unrepairable { version: Version, log_tail: String },
    #[error("test runner failed for {version:?}: {detail}")]
    TestRunner { version: Version, detail: String },
    #[error("original and patched versions were built from different plans")]
    PlanDivergence { original: Box<BuildPlan>, patched: Box<BuildPlan> },
    #[error("repair model failed: {0}")]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub name: String,
    /// Pass/fail for each recorded (post warm-up) run.
    pub passed: Vec<bool>,
    pub wall_ms: Vec<f64>,
}

impl TestRecord {
    pub fn all_passed(&self) -> bool {
        self.passed.iter().all(|p| *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub version: Version,
    pub build_ok: bool,
    pub tests: Vec<TestRecord>,
    pub runs_requested: usize,
    pub runs_recorded: usize,
    /// Wall time of each recorded whole-suite invocation.
    pub suite_wall_ms: Vec<f64>,
    pub qualified: bool,
    pub disqualified_reason: Option<String>,
    /// Container the runs executed in.
    pub session: String,
}

impl RunOutcome {
    pub fn test(&self, name: &str) -> Option<&TestRecord> {
        self.tests.iter().find(|t| t.name == name)
    }
}

/// Model used for repair rounds once the heuristics run dry.
#[derive(Clone, Copy)]
pub struct RepairModel<'a> {
    pub backend: &'a dyn ModelBackend,
    pub model: &'a str,
    pub prompt: &'a PromptTemplate,
    pub temperature: f64,
}

/// A live container plus the plan its builds follow.
#[derive(Debug)]
pub struct Session {
    pub container: ContainerHandle,
    pub plan: BuildPlan,
    /// Plan in force at each version's last successful build.
    built: Vec<(Version, BuildPlan)>,
    log_seq: usize,
    /// Container directory this session's logs go to.
    log_root: String,
    subject: String,
}

impl Session {
    pub fn id(&self) -> &str {
        &self.container.id
    }

    pub fn log_root(&self) -> &str {
        &self.log_root
    }

    pub fn built_plan(&self, version: Version) -> Option<&BuildPlan> {
        self.built.iter().rev().find(|(v, _)| *v == version).map(|(_, p)| p)
    }

    fn mark_built(&mut self, version: Version) {
        self.built.push((version, self.plan.clone()));
    }
}

fn tail(text: &str, max_bytes: usize) -> String {
    if text.len() <= max_bytes {
        return text.to_owned();
    }
    let mut start = text.len() - max_bytes;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_owned()
}

pub struct Orchestrator<'a> {
    runtime: &'a dyn ContainerRuntime,
    config: &'a OrchestratorConfig,
    table: &'a DependencyTable,
    repair: Option<RepairModel<'a>>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(runtime: &'a dyn ContainerRuntime, config: &'a OrchestratorConfig, table: &'a DependencyTable) -> Self {
        Self { runtime, config, table, repair: None }
    }

    pub fn with_repair_model(mut self, model: RepairModel<'a>) -> Self {
        self.repair = Some(model);
        self
    }

    pub fn config(&self) -> &OrchestratorConfig {
        self.config
    }

    pub fn runtime(&self) -> &dyn ContainerRuntime {
        self.runtime
    }

    fn exec_checked(&self, s: &Session, step: &Step, label: &str) -> Result<ExecOutput, OrchestratorError> {
        let out = self.runtime.exec(&s.container, step)?;
        if !out.success() {
            return Err(OrchestratorError::StepFailed {
                step: label.to_owned(),
                exit_code: out.exit_code,
                output_tail: tail(&out.combined(), self.config.log_tail_bytes),
            });
        }
        Ok(out)
    }

    fn log(&self, s: &mut Session, version: Version, name: &str, body: &str) -> Result<(), OrchestratorError> {
        s.log_seq += 1;
        let path = format!("{}/{:03}-{name}", version.log_dir(&s.log_root), s.log_seq);
        self.runtime.write_file(&s.container, &path, body.as_bytes())?;
        Ok(())
    }

    fn open(&self, image: &str, plan: BuildPlan, subject: &str, log_root: Option<&str>) -> Result<Session, OrchestratorError> {
        self.runtime.ping()?;
        let container = self.runtime.create(image, &self.config.limits)?;
        let log_root = log_root.map(str::to_owned).unwrap_or_else(|| LOGS_DIR.to_owned());
        Ok(Session { container, plan, built: Vec::new(), log_seq: 0, log_root, subject: subject.to_owned() })
    }

    /// Removes the session's container.
    pub fn close(&self, s: Session) -> Result<(), OrchestratorError> {
        self.runtime.remove(&s.container)?;
        Ok(())
    }

    fn with_cleanup<T>(&self, s: Session, f: impl FnOnce(&mut Session) -> Result<T, OrchestratorError>) -> Result<(Session, T), OrchestratorError> {
        let mut s = s;
        match f(&mut s) {
            Ok(v) => Ok((s, v)),
            Err(e) => {
                if let Err(cleanup) = self.runtime.remove(&s.container) {
                    log::warn!("failed to remove container {}: {cleanup}", s.container.id);
                }
                Err(e)
            }
        }
    }

    fn checkout(&self, s: &Session, source: &str, version: Version, rev: &str) -> Result<(), OrchestratorError> {
        let dir = version.source_dir();
        self.exec_checked(s, &Step::Clone { source: source.to_owned(), dest: dir.clone(), rev: rev.to_owned() }, &format!("checkout of {rev}"))?;
        let sha_file = format!("{META_DIR}/{}.sha", version.as_str());
        self.exec_checked(s, &Step::RecordSha { repo_dir: dir, out_file: sha_file.clone() }, "record sha")?;
        let recorded = String::from_utf8_lossy(&self.runtime.read_file(&s.container, &sha_file)?).trim().to_owned();
        if rev.len() == 40 && recorded != rev {
            return Err(OrchestratorError::StepFailed {
                step: format!("checkout of {rev}"),
                exit_code: 0,
                output_tail: format!("{} is at {recorded}", version.source_dir()),
            });
        }
        Ok(())
    }

    /// Starts a container holding `/work/original` at the commit's parent and
    /// `/work/patched` at the commit. `source` is anything `git clone`
    /// accepts; `cmake_lists` is the parent's root CMakeLists.txt, used to
    /// pick the toolchain image.
    pub fn prepare_environment(
        &self,
        commit: &CommitRecord,
        repo: &RepoDescriptor,
        source: &str,
        cmake_lists: Option<&str>,
    ) -> Result<Session, OrchestratorError> {
        let parent = commit.parent_sha.as_str();
        if parent.is_empty() {
            return Err(OrchestratorError::Precondition(format!("commit {} has no parent", commit.sha)));
        }
        let plan = BuildPlan::for_project(cmake_lists, &self.config.configure_args);
        let image = plan.base_image.clone();
        let s = self.open(&image, plan, &commit.sha, None)?;
        log::info!("{}: preparing {} in container {}", repo.full_name(), commit.sha, s.container.id);
        let (s, ()) = self.with_cleanup(s, |s| {
            self.exec_checked(s, &Step::Bootstrap, "bootstrap")?;
            self.checkout(s, source, Version::Original, parent)?;
            self.checkout(s, source, Version::Patched, &commit.sha)
        })?;
        Ok(s)
    }

    /// Starts a container from a snapshot image whose environment `plan`
    /// describes. Logs go under `log_root` so the image's own logs stay intact.
    pub fn open_snapshot(&self, image: &str, plan: &BuildPlan, subject: &str, log_root: &str) -> Result<Session, OrchestratorError> {
        self.open(image, plan.clone(), subject, Some(log_root))
    }

    fn configure_and_build(&self, s: &mut Session, version: Version) -> Result<ExecOutput, OrchestratorError> {
        let configure = Step::Configure {
            source_dir: version.source_dir(),
            build_dir: version.build_dir(),
            args: s.plan.configure_args.clone(),
        };
        let cfg = self.runtime.exec(&s.container, &configure)?;
        self.log(s, version, "configure.log", &cfg.combined())?;
        if !cfg.success() {
            return Ok(cfg);
        }
        let build = self.runtime.exec(&s.container, &Step::Build { build_dir: version.build_dir(), jobs: self.config.jobs })?;
        self.log(s, version, "build.log", &build.combined())?;
        Ok(ExecOutput { stdout: format!("{}\n{}", cfg.stdout, build.stdout), ..build })
    }

    /// Configures and builds once with the current plan, without repair.
    pub fn build_once(&self, s: &mut Session, version: Version) -> Result<ExecOutput, OrchestratorError> {
        let out = self.configure_and_build(s, version)?;
        if out.success() {
            s.mark_built(version);
        }
        Ok(out)
    }

    fn ask_model(&self, s: &mut Session, version: Version, log_tail: &str) -> Result<Vec<String>, OrchestratorError> {
        let Some(repair) = self.repair else { return Ok(Vec::new()) };
        let prompt = repair.prompt.render(&[("build_log", log_tail)]);
        let reply = repair.backend.complete(&ModelRequest {
            model: repair.model,
            prompt: &prompt,
            purpose: Purpose::Repair,
            subject: &s.subject,
            temperature: repair.temperature,
        })?;
        self.log(s, version, "repair-reply.txt", &reply)?;
        Ok(parse_package_reply(&reply))
    }

    /// Builds `version`, installing packages between attempts: first those
    /// the dependency table maps from the log, then those the repair model
    /// names. Every attempted install consumes a round.
    pub fn build_with_repair(&self, s: &mut Session, version: Version, max_rounds: usize) -> Result<(), OrchestratorError> {
        let mut rounds = 0;
        let mut out = self.configure_and_build(s, version)?;
        loop {
            if out.success() {
                s.mark_built(version);
                return Ok(());
            }
            let log_tail = tail(&out.combined(), self.config.log_tail_bytes);
            if rounds >= max_rounds {
                return Err(OrchestratorError::RepairBudgetExhausted { version, rounds, log_tail });
            }
            let installed = &s.plan.install_packages;
            let mut packages: Vec<String> =
                self.table.suggest(&log_tail).into_iter().filter(|p| !installed.contains(p)).collect();
            let mut origin = "heuristic";
            if packages.is_empty() {
                packages = self.ask_model(s, version, &log_tail)?;
                packages.retain(|p| !s.plan.install_packages.contains(p));
                origin = "model";
            }
            if packages.is_empty() {
                return Err(OrchestratorError::Unrepairable { version, log_tail });
            }
            rounds += 1;
            s.plan.repair_rounds_used += 1;
            log::info!("{}: repair round {rounds} for {version:?} ({origin}): {}", s.subject, packages.join(" "));
            let install = self.runtime.exec(&s.container, &Step::Install { packages: packages.clone() })?;
            self.log(s, version, "install.log", &install.combined())?;
            if install.success() {
                s.plan.install_packages.extend(packages);
                out = self.configure_and_build(s, version)?;
            }
        }
    }

    /// Builds both versions from one plan. If the patched build needed more
    /// packages, the original is rebuilt so both match.
    pub fn build_both(&self, s: &mut Session) -> Result<(), OrchestratorError> {
        let rounds = self.config.max_repair_rounds;
        self.build_with_repair(s, Version::Original, rounds)?;
        self.build_with_repair(s, Version::Patched, rounds)?;
        let original = s.built_plan(Version::Original).cloned().expect("original built");
        if !original.same_arguments(&s.plan) {
            let out = self.build_once(s, Version::Original)?;
            if !out.success() {
                return Err(OrchestratorError::StepFailed {
                    step: "rebuild of original with the patched plan".into(),
                    exit_code: out.exit_code,
                    output_tail: tail(&out.combined(), self.config.log_tail_bytes),
                });
            }
        }
        self.check_symmetry(s)
    }

    pub fn check_symmetry(&self, s: &Session) -> Result<(), OrchestratorError> {
        match (s.built_plan(Version::Original), s.built_plan(Version::Patched)) {
            (Some(o), Some(p)) if o.same_arguments(p) => Ok(()),
            (Some(o), Some(p)) => Err(OrchestratorError::PlanDivergence { original: Box::new(o.clone()), patched: Box::new(p.clone()) }),
            _ => Err(OrchestratorError::Precondition("both versions must be built".into())),
        }
    }

    fn read_cases(&self, s: &Session, junit_file: &str, out: &ExecOutput) -> Vec<CaseResult> {
        match self.runtime.read_file(&s.container, junit_file) {
            Ok(bytes) => match parse_junit(&String::from_utf8_lossy(&bytes)) {
                Ok(cases) => cases,
                Err(e) => {
                    log::warn!("{}: {e}; falling back to console output", s.subject);
                    parse_console(&out.stdout)
                }
            },
            Err(_) => parse_console(&out.stdout),
        }
    }

    /// Runs the whole suite `runs` times. The first run is a warm-up and is
    /// not recorded. Any failing test, in any run, disqualifies the version
    /// and stops further runs.
    pub fn run_tests_repeatedly(&self, s: &mut Session, version: Version, runs: usize) -> Result<RunOutcome, OrchestratorError> {
        if runs == 0 {
            return Err(OrchestratorError::Precondition("runs must be positive".into()));
        }
        if s.built_plan(version).is_none() {
            return Err(OrchestratorError::Precondition(format!("{version:?} has not been built")));
        }
        let mut outcome = RunOutcome {
            version,
            build_ok: true,
            tests: Vec::new(),
            runs_requested: runs,
            runs_recorded: 0,
            suite_wall_ms: Vec::new(),
            qualified: false,
            disqualified_reason: None,
            session: s.container.id.clone(),
        };
        let mut names: Option<Vec<String>> = None;
        for run in 1..=runs {
            let junit_file = format!("{}/run-{run:02}.junit.xml", version.log_dir(&s.log_root));
            let step = Step::RunTests { build_dir: version.build_dir(), junit_file: junit_file.clone() };
            let out = self.runtime.exec(&s.container, &step)?;
            self.log(s, version, &format!("run-{run:02}.log"), &out.combined())?;
            let cases = self.read_cases(s, &junit_file, &out);
            if cases.is_empty() {
                if out.success() {
                    outcome.disqualified_reason = Some("no tests registered".into());
                    break;
                }
                return Err(OrchestratorError::TestRunner { version, detail: tail(&out.combined(), self.config.log_tail_bytes) });
            }
            let run_names: Vec<String> = cases.iter().map(|c| c.name.clone()).collect();
            match &names {
                Some(expected) if *expected != run_names => {
                    outcome.disqualified_reason = Some(format!("run {run}: the set of tests changed"));
                    break;
                }
                None => names = Some(run_names),
                _ => {}
            }
            let failed: Vec<&str> = cases.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            let reason = if !failed.is_empty() {
                Some(format!("run {run}{}: failed {}", if run == 1 { " (warm-up)" } else { "" }, failed.join(", ")))
            } else if !out.success() {
                Some(format!("run {run}: test runner exited with code {}", out.exit_code))
            } else {
                None
            };
            if run > 1 {
                if outcome.tests.is_empty() {
                    outcome.tests = cases.iter().map(|c| TestRecord { name: c.name.clone(), passed: Vec::new(), wall_ms: Vec::new() }).collect();
                }
                for (record, case) in outcome.tests.iter_mut().zip(&cases) {
                    record.passed.push(case.passed);
                    record.wall_ms.push(case.wall_ms);
                }
                outcome.runs_recorded += 1;
                outcome.suite_wall_ms.push((out.elapsed.as_secs_f64() * 1000.0).max(crate::ctest::MIN_RECORDED_MS));
            }
            if reason.is_some() {
                outcome.disqualified_reason = reason;
                break;
            }
        }
        outcome.qualified = outcome.disqualified_reason.is_none() && outcome.runs_recorded + 1 == runs;
        Ok(outcome)
    }

    /// Commits the container as `perfmine/<entry_id>`. Both versions must
    /// have qualified.
    pub fn snapshot_image(&self, s: &Session, entry_id: &str, outcomes: &[&RunOutcome]) -> Result<String, OrchestratorError> {
        for version in [Version::Original, Version::Patched] {
            match outcomes.iter().find(|o| o.version == version) {
                Some(o) if o.qualified => {}
                Some(o) => {
                    return Err(OrchestratorError::Precondition(format!(
                        "{version:?} is disqualified: {}",
                        o.disqualified_reason.as_deref().unwrap_or("incomplete runs")
                    )))
                }
                None => return Err(OrchestratorError::Precondition(format!("no run outcome for {version:?}"))),
            }
        }
        let tag = image_tag(entry_id);
        Ok(self.runtime.commit(&s.container, &tag)?)
    }

    /// Copies the session's logs to `host_dir`.
    pub fn mirror_logs(&self, s: &Session, host_dir: &Path) -> Result<(), OrchestratorError> {
        self.runtime.export_dir(&s.container, &s.log_root, host_dir)?;
        Ok(())
    }
}

/// Image tag for an entry. Registries reject upper-case repository names.
pub fn image_tag(entry_id: &str) -> String {
    format!("{IMAGE_PREFIX}{}", entry_id.to_ascii_lowercase())
}

/// Runs the discovery gate's build-and-test check at the repository head.
pub struct OrchestratorProber<'a> {
    pub orchestrator: &'a Orchestrator<'a>,
}

impl HeadProber for OrchestratorProber<'_> {
    fn probe(&self, repo: &RepoDescriptor, worktree: &Path) -> Result<HeadProbe, String> {
        let o = self.orchestrator;
        let cmake = std::fs::read_to_string(worktree.join("CMakeLists.txt")).ok();
        let plan = BuildPlan::for_project(cmake.as_deref(), &o.config.configure_args);
        let image = plan.base_image.clone();
        let subject = repo.head_sha.clone().unwrap_or_else(|| repo.full_name());
        let s = o.open(&image, plan, &subject, None).map_err(|e| e.to_string())?;
        let result = o.with_cleanup(s, |s| {
            o.exec_checked(s, &Step::Bootstrap, "bootstrap")?;
            let rev = repo.head_sha.clone().unwrap_or_else(|| "HEAD".into());
            o.checkout(s, &worktree.display().to_string(), Version::Head, &rev)?;
            o.build_with_repair(s, Version::Head, o.config.max_repair_rounds)?;
            let listing = o.exec_checked(s, &Step::ListTests { build_dir: Version::Head.build_dir() }, "list tests")?;
            let listed = parse_test_list(&listing.stdout).map_err(|e| OrchestratorError::TestRunner { version: Version::Head, detail: e.to_string() })?;
            let junit_file = format!("{}/probe.junit.xml", Version::Head.log_dir(&s.log_root));
            let out = o.runtime.exec(&s.container, &Step::RunTests { build_dir: Version::Head.build_dir(), junit_file: junit_file.clone() })?;
            let cases = o.read_cases(s, &junit_file, &out);
            let pass = out.success() && !cases.is_empty() && cases.iter().all(|c| c.passed);
            Ok(HeadProbe { listed_tests: Some(listed.len()), tests_pass: pass })
        });
        match result {
            Ok((s, probe)) => {
                o.close(s).map_err(|e| e.to_string())?;
                Ok(probe)
            }
            Err(e) => Err(e.to_string()),
        }
    }
}
