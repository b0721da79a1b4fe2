//! Host-directory containers and images, shared by the local and fake runtimes.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{ContainerHandle, ExecOutput, RuntimeError};
use crate::fsutil::copy_tree;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub(crate) struct ContainerMeta {
    /// Base image the container (or its ancestor) was created from.
    pub base_image: String,
    pub installed: Vec<String>,
}

/// Layout: `<root>/containers/<id>/{fs,meta.json}` and `<root>/images/<tag>/...`.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn container_dir(&self, c: &ContainerHandle) -> PathBuf {
        self.root.join("containers").join(&c.id)
    }

    pub fn image_dir(&self, tag: &str) -> PathBuf {
        let safe: String = tag
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || "._-".contains(ch) { ch } else { '+' })
            .collect();
        self.root.join("images").join(safe)
    }

    pub fn has_image(&self, tag: &str) -> bool {
        self.image_dir(tag).join("meta.json").is_file()
    }

    pub fn fs_root(&self, c: &ContainerHandle) -> PathBuf {
        self.container_dir(c).join("fs")
    }

    /// Maps a container-absolute path onto the host; other paths pass through.
    pub fn map(&self, c: &ContainerHandle, logical: &str) -> String {
        if logical == super::WORK_ROOT || logical.starts_with("/work/") {
            format!("{}{}", self.fs_root(c).display(), logical)
        } else {
            logical.to_owned()
        }
    }

    pub fn host_path(&self, c: &ContainerHandle, logical: &str) -> PathBuf {
        PathBuf::from(self.map(c, logical))
    }

    pub(crate) fn meta(&self, c: &ContainerHandle) -> Result<ContainerMeta, RuntimeError> {
        let text = std::fs::read_to_string(self.container_dir(c).join("meta.json"))?;
        serde_json::from_str(&text).map_err(|e| RuntimeError::Operation { op: "read meta".into(), detail: e.to_string() })
    }

    pub(crate) fn save_meta(&self, c: &ContainerHandle, meta: &ContainerMeta) -> Result<(), RuntimeError> {
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        crate::fsutil::atomic_write(&self.container_dir(c).join("meta.json"), text.as_bytes())?;
        Ok(())
    }

    pub fn create(&self, image: &str) -> Result<ContainerHandle, RuntimeError> {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
        let id = format!("c{}-{:x}-{}", std::process::id(), nanos, NEXT_ID.fetch_add(1, Ordering::Relaxed));
        let handle = ContainerHandle { id, image: image.to_owned() };
        let dir = self.container_dir(&handle);
        if self.has_image(image) {
            copy_tree(&self.image_dir(image), &dir)?;
        } else {
            std::fs::create_dir_all(dir.join("fs/work"))?;
            self.save_meta(&handle, &ContainerMeta { base_image: image.to_owned(), installed: Vec::new() })?;
        }
        Ok(handle)
    }

    pub fn commit(&self, c: &ContainerHandle, tag: &str) -> Result<String, RuntimeError> {
        let target = self.image_dir(tag);
        let parent = target.parent().expect("images dir");
        std::fs::create_dir_all(parent)?;
        let staging = tempfile::tempdir_in(parent)?;
        let staged = staging.path().join("image");
        copy_tree(&self.container_dir(c), &staged)?;
        if target.exists() {
            std::fs::remove_dir_all(&target)?;
        }
        std::fs::rename(&staged, &target)?;
        Ok(tag.to_owned())
    }

    pub fn remove(&self, c: &ContainerHandle) -> Result<(), RuntimeError> {
        let dir = self.container_dir(c);
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        Ok(())
    }

    pub fn write_file(&self, c: &ContainerHandle, path: &str, contents: &[u8]) -> Result<(), RuntimeError> {
        let host = self.host_path(c, path);
        if let Some(parent) = host.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(host, contents)?;
        Ok(())
    }

    pub fn read_file(&self, c: &ContainerHandle, path: &str) -> Result<Vec<u8>, RuntimeError> {
        Ok(std::fs::read(self.host_path(c, path))?)
    }

    pub fn export_dir(&self, c: &ContainerHandle, path: &str, dest: &Path) -> Result<(), RuntimeError> {
        let src = self.host_path(c, path);
        if src.is_dir() {
            copy_tree(&src, dest)?;
        }
        Ok(())
    }
}

/// Runs `script` with `sh -c` on the host.
pub(crate) fn run_host_script(script: &str) -> Result<ExecOutput, RuntimeError> {
    let started = Instant::now();
    let output = Command::new("sh")
        .arg("-c")
        .arg(script)
        .env("GIT_TERMINAL_PROMPT", "0")
        .output()?;
    Ok(ExecOutput {
        exit_code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
        elapsed: started.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_commit_and_recreate() {
        let tmp = tempfile::tempdir().unwrap();
        let store = DirStore::new(tmp.path());
        let c = store.create("gcc:13").unwrap();
        store.write_file(&c, "/work/logs/a.log", b"hello").unwrap();
        assert_eq!(store.commit(&c, "perfmine/x__y__1").unwrap(), "perfmine/x__y__1");
        store.write_file(&c, "/work/logs/a.log", b"second").unwrap();
        store.commit(&c, "perfmine/x__y__1").unwrap();
        let images: Vec<_> = std::fs::read_dir(tmp.path().join("images")).unwrap().collect();
        assert_eq!(images.len(), 1);

        let d = store.create("perfmine/x__y__1").unwrap();
        assert_eq!(store.read_file(&d, "/work/logs/a.log").unwrap(), b"second");
        assert_eq!(store.meta(&d).unwrap().base_image, "gcc:13");
        store.remove(&c).unwrap();
        store.remove(&d).unwrap();
    }

    #[test]
    fn maps_only_work_paths() {
        let store = DirStore::new("/srv/rt");
        let c = ContainerHandle { id: "c1".into(), image: "i".into() };
        assert_eq!(store.map(&c, "/work/original"), "/srv/rt/containers/c1/fs/work/original");
        assert_eq!(store.map(&c, "/tmp/repo"), "/tmp/repo");
        assert_eq!(store.map(&c, "/workspace"), "/workspace");
    }
}
