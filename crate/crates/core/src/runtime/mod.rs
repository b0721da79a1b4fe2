//! Container runtime seam.
//!
//! The orchestrator speaks in [`Step`]s addressed to container-logical paths
//! under `/work`. Each runtime renders them to a shell script (the docker CLI
//! runtime and the local runtime) or simulates them (the fake runtime).

mod dir;
mod docker;
mod fake;
mod local;

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dir::DirStore;
pub use docker::DockerRuntime;
pub use fake::{FakeRuntime, FAKE_DIRECTIVE};
pub use local::LocalRuntime;

pub const WORK_ROOT: &str = "/work";
pub const LOGS_DIR: &str = "/work/logs";
pub const META_DIR: &str = "/work/meta";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("container runtime `{runtime}` is unreachable at {socket}: {detail}")]
    Unreachable { runtime: String, socket: String, detail: String },
    #[error("failed to pull image {image}: {detail}")]
    ImagePull { image: String, detail: String },
    #[error("image {0} not found")]
    ImageNotFound(String),
    #[error("container operation `{op}` failed: {detail}")]
    Operation { op: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceLimits {
    pub cpus: Option<f64>,
    /// Docker memory syntax, e.g. `4g`.
    pub memory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerHandle {
    pub id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutput {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }

    /// stdout followed by stderr.
    pub fn combined(&self) -> String {
        if self.stderr.is_empty() {
            self.stdout.clone()
        } else {
            format!("{}\n{}", self.stdout, self.stderr)
        }
    }
}

/// One unit of work inside a container. Paths are container-logical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    /// Ensures git and cmake are available in a fresh base image.
    Bootstrap,
    Clone { source: String, dest: String, rev: String },
    RecordSha { repo_dir: String, out_file: String },
    CopyTree { from: String, to: String },
    ApplyPatch { dir: String, patch_file: String },
    Install { packages: Vec<String> },
    Configure { source_dir: String, build_dir: String, args: Vec<String> },
    Build { build_dir: String, jobs: usize },
    ListTests { build_dir: String },
    /// Runs the whole suite once, writing a JUnit report to `junit_file`.
    RunTests { build_dir: String, junit_file: String },
}

pub fn shell_quote(s: &str) -> String {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_./:=+@%,".contains(&b)) {
        return s.to_owned();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

impl Step {
    /// Renders the step as a POSIX shell script. `path` is applied to every
    /// path argument and must leave paths outside `/work` untouched.
    pub fn render(&self, path: &dyn Fn(&str) -> String) -> String {
        let q = |p: &str| shell_quote(&path(p));
        match self {
            Step::Bootstrap => "if ! command -v git >/dev/null 2>&1 || ! command -v cmake >/dev/null 2>&1; then \
                 apt-get update -qq && DEBIAN_FRONTEND=noninteractive apt-get install -y -qq git cmake; fi"
                .to_owned(),
            Step::Clone { source, dest, rev } => {
                format!(
                    "rm -rf {d} && mkdir -p \"$(dirname {d})\" && git clone --quiet {src} {d} && git -C {d} checkout --quiet --detach {rev}",
                    src = q(source),
                    d = q(dest),
                    rev = shell_quote(rev),
                )
            }
            Step::RecordSha { repo_dir, out_file } => format!(
                "mkdir -p \"$(dirname {o})\" && git -C {r} rev-parse HEAD > {o}",
                o = q(out_file),
                r = q(repo_dir)
            ),
            Step::CopyTree { from, to } => format!("rm -rf {t} && cp -a {f} {t}", f = q(from), t = q(to)),
            Step::ApplyPatch { dir, patch_file } => {
                format!("git -C {} apply --whitespace=nowarn {}", q(dir), q(patch_file))
            }
            Step::Install { packages } => {
                let pkgs: Vec<String> = packages.iter().map(|p| shell_quote(p)).collect();
                format!(
                    "apt-get update -qq && DEBIAN_FRONTEND=noninteractive apt-get install -y -qq {}",
                    pkgs.join(" ")
                )
            }
            Step::Configure { source_dir, build_dir, args } => {
                let extra: Vec<String> = args.iter().map(|a| shell_quote(a)).collect();
                format!(
                    "mkdir -p {b} && rm -f {b}/CMakeCache.txt && cmake -S {s} -B {b} {}",
                    extra.join(" "),
                    s = q(source_dir),
                    b = q(build_dir)
                )
                .trim_end()
                .to_owned()
            }
            Step::Build { build_dir, jobs } => format!("cmake --build {} --parallel {}", q(build_dir), jobs.max(&1)),
            Step::ListTests { build_dir } => format!("cd {} && ctest --show-only=json-v1", q(build_dir)),
            Step::RunTests { build_dir, junit_file } => {
                format!("cd {} && ctest --output-junit {}", q(build_dir), q(junit_file))
            }
        }
    }
}

pub trait ContainerRuntime: Send + Sync {
    fn name(&self) -> &str;

    /// Confirms the runtime is reachable.
    fn ping(&self) -> Result<(), RuntimeError>;

    /// Pulls `image` if it is not present locally.
    fn ensure_image(&self, image: &str) -> Result<(), RuntimeError>;

    fn image_exists(&self, image: &str) -> Result<bool, RuntimeError>;

    fn create(&self, image: &str, limits: &ResourceLimits) -> Result<ContainerHandle, RuntimeError>;

    fn exec(&self, container: &ContainerHandle, step: &Step) -> Result<ExecOutput, RuntimeError>;

    fn write_file(&self, container: &ContainerHandle, path: &str, contents: &[u8]) -> Result<(), RuntimeError>;

    fn read_file(&self, container: &ContainerHandle, path: &str) -> Result<Vec<u8>, RuntimeError>;

    /// Copies a container directory to the host.
    fn export_dir(&self, container: &ContainerHandle, path: &str, host_dest: &Path) -> Result<(), RuntimeError>;

    /// Commits the container as `tag`, replacing any previous image with that tag.
    fn commit(&self, container: &ContainerHandle, tag: &str) -> Result<String, RuntimeError>;

    fn remove(&self, container: &ContainerHandle) -> Result<(), RuntimeError>;
}
