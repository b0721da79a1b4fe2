//! Runs steps directly on the host toolchain inside per-container directories.
//!
//! No isolation and no package installation: the host's compiler, cmake and
//! ctest stand in for the base image. Useful for exercising the real build
//! path where no container daemon is available.

use std::path::{Path, PathBuf};

use super::dir::{run_host_script, DirStore};
use super::{ContainerHandle, ContainerRuntime, ExecOutput, ResourceLimits, RuntimeError, Step};
use crate::IMAGE_PREFIX;

#[derive(Debug, Clone)]
pub struct LocalRuntime {
    store: DirStore,
}

impl LocalRuntime {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { store: DirStore::new(root) }
    }

    pub fn store(&self) -> &DirStore {
        &self.store
    }
}

fn tool_available(tool: &str) -> bool {
    std::process::Command::new(tool)
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

impl ContainerRuntime for LocalRuntime {
    fn name(&self) -> &str {
        "local"
    }

    fn ping(&self) -> Result<(), RuntimeError> {
        std::fs::create_dir_all(self.store.root())?;
        Ok(())
    }

    fn ensure_image(&self, image: &str) -> Result<(), RuntimeError> {
        if self.image_exists(image)? {
            Ok(())
        } else {
            Err(RuntimeError::ImageNotFound(image.to_owned()))
        }
    }

    fn image_exists(&self, image: &str) -> Result<bool, RuntimeError> {
        // Base images are served by the host toolchain.
        Ok(!image.starts_with(IMAGE_PREFIX) || self.store.has_image(image))
    }

    fn create(&self, image: &str, _limits: &ResourceLimits) -> Result<ContainerHandle, RuntimeError> {
        self.ensure_image(image)?;
        self.store.create(image)
    }

    fn exec(&self, c: &ContainerHandle, step: &Step) -> Result<ExecOutput, RuntimeError> {
        match step {
            Step::Bootstrap => {
                let missing: Vec<&str> = ["git", "cmake", "ctest"].into_iter().filter(|t| !tool_available(t)).collect();
                Ok(ExecOutput {
                    exit_code: if missing.is_empty() { 0 } else { 127 },
                    stdout: String::new(),
                    stderr: if missing.is_empty() { String::new() } else { format!("missing host tools: {}", missing.join(", ")) },
                    elapsed: Default::default(),
                })
            }
            Step::Install { packages } if !packages.is_empty() => Ok(ExecOutput {
                exit_code: 100,
                stdout: String::new(),
                stderr: format!("E: the local runtime cannot install packages ({})", packages.join(" ")),
                elapsed: Default::default(),
            }),
            other => run_host_script(&other.render(&|p: &str| self.store.map(c, p))),
        }
    }

    fn write_file(&self, c: &ContainerHandle, path: &str, contents: &[u8]) -> Result<(), RuntimeError> {
        self.store.write_file(c, path, contents)
    }

    fn read_file(&self, c: &ContainerHandle, path: &str) -> Result<Vec<u8>, RuntimeError> {
        self.store.read_file(c, path)
    }

    fn export_dir(&self, c: &ContainerHandle, path: &str, host_dest: &Path) -> Result<(), RuntimeError> {
        self.store.export_dir(c, path, host_dest)
    }

    fn commit(&self, c: &ContainerHandle, tag: &str) -> Result<String, RuntimeError> {
        self.store.commit(c, tag)
    }

    fn remove(&self, c: &ContainerHandle) -> Result<(), RuntimeError> {
        self.store.remove(c)
    }
}
