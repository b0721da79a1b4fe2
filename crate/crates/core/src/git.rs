//! Thin wrapper over the `git` executable.

use std::path::{Path, PathBuf};
use std::process::Command;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GitError {
    #[error("failed to spawn git: {0}")]
    Spawn(#[from] std::io::Error),
    #[error("`git {args}` failed ({status}): {stderr}")]
    Failed { args: String, status: String, stderr: String },
    #[error("git produced non-UTF-8 output for `git {0}`")]
    Encoding(String),
}

#[derive(Debug, Clone)]
pub struct Git {
    dir: PathBuf,
}

impl Git {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run<I, S>(&self, args: I) -> Result<String, GitError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let args: Vec<String> = args.into_iter().map(|a| a.as_ref().to_owned()).collect();
        let output = Command::new("git")
            .arg("-C")
            .arg(&self.dir)
            .args(&args)
            .env("GIT_TERMINAL_PROMPT", "0")
            .output()?;
        if !output.status.success() {
            return Err(GitError::Failed {
                args: args.join(" "),
                status: output
                    .status
                    .code()
                    .map(|c| format!("exit {c}"))
                    .unwrap_or_else(|| "signal".into()),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
            });
        }
        String::from_utf8(output.stdout).map_err(|_| GitError::Encoding(args.join(" ")))
    }

    /// Clones `source` into `dest` (which must not exist yet).
    pub fn clone_into(source: &str, dest: &Path) -> Result<Git, GitError> {
        let output = Command::new("git")
            .args(["clone", "--quiet", source])
            .arg(dest)
            .env("GIT_TERMINAL_PROMPT", "0")
            .output()?;
        if !output.status.success() {
            return Err(GitError::Failed {
                args: format!("clone {source}"),
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_owned(),
            });
        }
        Ok(Git::new(dest))
    }

    pub fn head_sha(&self) -> Result<String, GitError> {
        Ok(self.run(["rev-parse", "HEAD"])?.trim().to_owned())
    }

    pub fn is_shallow(&self) -> Result<bool, GitError> {
        Ok(self.run(["rev-parse", "--is-shallow-repository"])?.trim() == "true")
    }
}
