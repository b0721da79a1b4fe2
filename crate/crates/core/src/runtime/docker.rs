//! Docker (or podman) through its command-line client.

use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{ContainerHandle, ContainerRuntime, ExecOutput, ResourceLimits, RuntimeError, Step};

const DEFAULT_SOCKET: &str = "unix:///var/run/docker.sock";
const SOURCES_DIR: &str = "/work/.sources";

#[derive(Debug, Clone)]
pub struct DockerRuntime {
    program: String,
}

impl Default for DockerRuntime {
    fn default() -> Self {
        Self::new("docker")
    }
}

pub(crate) fn create_args(image: &str, limits: &ResourceLimits) -> Vec<String> {
    let mut args = vec!["run".to_owned(), "-d".to_owned()];
    if let Some(cpus) = limits.cpus {
        args.push(format!("--cpus={cpus}"));
    }
    if let Some(mem) = &limits.memory {
        args.push(format!("--memory={mem}"));
    }
    args.extend([image.to_owned(), "sleep".to_owned(), "infinity".to_owned()]);
    args
}

pub(crate) fn exec_args(id: &str, script: &str) -> Vec<String> {
    ["exec", id, "sh", "-c", script].iter().map(|s| s.to_string()).collect()
}

/// Container-side location a host-path clone source is copied to.
pub(crate) fn staged_source(host_path: &str) -> String {
    let digest = Sha256::digest(host_path.as_bytes());
    format!("{SOURCES_DIR}/{}", &hex::encode(digest)[..16])
}

fn socket() -> String {
    std::env::var("DOCKER_HOST").unwrap_or_else(|_| DEFAULT_SOCKET.to_owned())
}

impl DockerRuntime {
    pub fn new(program: impl Into<String>) -> Self {
        Self { program: program.into() }
    }

    fn run(&self, args: &[String], stdin: Option<&[u8]>) -> Result<ExecOutput, RuntimeError> {
        let started = Instant::now();
        let mut cmd = Command::new(&self.program);
        cmd.args(args).stdout(Stdio::piped()).stderr(Stdio::piped());
        cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() });
        let mut child = cmd.spawn().map_err(|e| RuntimeError::Unreachable {
            runtime: self.program.clone(),
            socket: socket(),
            detail: format!("cannot run `{}`: {e}", self.program),
        })?;
        if let Some(bytes) = stdin {
            child.stdin.take().expect("piped stdin").write_all(bytes)?;
        }
        let out = child.wait_with_output()?;
        Ok(ExecOutput {
            exit_code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            elapsed: started.elapsed(),
        })
    }

    fn checked(&self, op: &str, args: &[String], stdin: Option<&[u8]>) -> Result<ExecOutput, RuntimeError> {
        let out = self.run(args, stdin)?;
        if out.success() {
            Ok(out)
        } else {
            Err(RuntimeError::Operation { op: op.to_owned(), detail: out.stderr.trim().to_owned() })
        }
    }
}

fn strs(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl ContainerRuntime for DockerRuntime {
    fn name(&self) -> &str {
        &self.program
    }

    fn ping(&self) -> Result<(), RuntimeError> {
        let out = self.run(&strs(&["version", "--format", "{{.Server.Version}}"]), None)?;
        if out.success() {
            Ok(())
        } else {
            Err(RuntimeError::Unreachable { runtime: self.program.clone(), socket: socket(), detail: out.stderr.trim().to_owned() })
        }
    }

    fn ensure_image(&self, image: &str) -> Result<(), RuntimeError> {
        if self.image_exists(image)? {
            return Ok(());
        }
        let out = self.run(&strs(&["pull", image]), None)?;
        if out.success() {
            Ok(())
        } else {
            Err(RuntimeError::ImagePull { image: image.to_owned(), detail: out.stderr.trim().to_owned() })
        }
    }

    fn image_exists(&self, image: &str) -> Result<bool, RuntimeError> {
        Ok(self.run(&strs(&["image", "inspect", image]), None)?.success())
    }

    fn create(&self, image: &str, limits: &ResourceLimits) -> Result<ContainerHandle, RuntimeError> {
        self.ensure_image(image)?;
        let out = self.checked("create", &create_args(image, limits), None)?;
        Ok(ContainerHandle { id: out.stdout.trim().to_owned(), image: image.to_owned() })
    }

    fn exec(&self, c: &ContainerHandle, step: &Step) -> Result<ExecOutput, RuntimeError> {
        let step = match step {
            Step::Clone { source, dest, rev } if Path::new(source).is_dir() => {
                let staged = staged_source(source);
                self.checked("mkdir", &exec_args(&c.id, &format!("mkdir -p {SOURCES_DIR}")), None)?;
                self.checked("cp", &strs(&["cp", &format!("{source}/."), &format!("{}:{staged}", c.id)]), None)?;
                Step::Clone { source: staged, dest: dest.clone(), rev: rev.clone() }
            }
            other => other.clone(),
        };
        self.run(&exec_args(&c.id, &step.render(&|p: &str| p.to_owned())), None)
    }

    fn write_file(&self, c: &ContainerHandle, path: &str, contents: &[u8]) -> Result<(), RuntimeError> {
        let q = super::shell_quote(path);
        let script = format!("mkdir -p \"$(dirname {q})\" && cat > {q}");
        let mut args = vec!["exec".to_owned(), "-i".to_owned()];
        args.extend(exec_args(&c.id, &script).into_iter().skip(1));
        self.checked("write_file", &args, Some(contents))?;
        Ok(())
    }

    fn read_file(&self, c: &ContainerHandle, path: &str) -> Result<Vec<u8>, RuntimeError> {
        let out = Command::new(&self.program).args(["exec", &c.id, "cat", path]).output()?;
        if out.status.success() {
            Ok(out.stdout)
        } else {
            Err(RuntimeError::Operation { op: "read_file".into(), detail: String::from_utf8_lossy(&out.stderr).trim().to_owned() })
        }
    }

    fn export_dir(&self, c: &ContainerHandle, path: &str, host_dest: &Path) -> Result<(), RuntimeError> {
        std::fs::create_dir_all(host_dest)?;
        let src = format!("{}:{}/.", c.id, path.trim_end_matches('/'));
        self.checked("export", &strs(&["cp", &src, &host_dest.display().to_string()]), None)?;
        Ok(())
    }

    fn commit(&self, c: &ContainerHandle, tag: &str) -> Result<String, RuntimeError> {
        self.checked("commit", &strs(&["commit", &c.id, tag]), None)?;
        Ok(tag.to_owned())
    }

    fn remove(&self, c: &ContainerHandle) -> Result<(), RuntimeError> {
        self.checked("remove", &strs(&["rm", "-f", &c.id]), None)?;
        Ok(())
    }
}
