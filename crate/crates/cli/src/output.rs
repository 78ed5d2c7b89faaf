//! Output directory handling: an exclusive lock for the duration of a run,
//! atomic artifact writes and a manifest hashing every artifact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".neq.lock";

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, BTreeMap<String, String>>,
    pub inputs: Vec<FileEntry>,
    pub artifacts: Vec<FileEntry>,
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileEntry { path: path.display().to_string(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().context("artifact path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// A locked output directory. Artifacts written through it are removed
/// again unless [`OutDir::commit`] is reached.
pub struct OutDir {
    root: PathBuf,
    lock: Option<File>,
    written: Vec<(String, FileEntry)>,
    committed: bool,
}

impl OutDir {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        let lock_path = root.join(LOCK);
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .with_context(|| format!("cannot open {}", lock_path.display()))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => {
                bail!("output directory {} is in use by another run", root.display())
            }
            Err(fs::TryLockError::Error(e)) => return Err(e).context("cannot lock output directory"),
        }
        Ok(Self { root: root.to_path_buf(), lock: Some(lock), written: Vec::new(), committed: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes an artifact and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        let entry = FileEntry { path: name.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        self.written.retain(|(n, _)| n != name);
        self.written.push((name.to_string(), entry));
        Ok(())
    }

    /// Writes a file produced by `fill` into a temporary path first.
    pub fn write_with(&mut self, name: &str, fill: impl FnOnce(&Path) -> neq_core::Result<()>) -> Result<()> {
        let tmp = self.path(&format!(".{name}.build"));
        let result = fill(&tmp).with_context(|| format!("cannot write {name}"));
        let bytes = result.and_then(|()| fs::read(&tmp).context("cannot read back artifact"));
        let _ = fs::remove_file(&tmp);
        self.write(name, &bytes?)
    }

    /// Writes the manifest listing every artifact, then releases the
    /// directory for good.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<()> {
        manifest.artifacts = self.written.iter().map(|(_, e)| e.clone()).collect();
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        write_atomic(&self.path(MANIFEST), &json)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        if !self.committed {
            for (name, _) in &self.written {
                let _ = fs::remove_file(self.root.join(name));
            }
        }
        if let Some(lock) = self.lock.take() {
            let _ = lock.unlock();
            let _ = fs::remove_file(self.root.join(LOCK));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            command: "t".into(),
            version: "0".into(),
            seed: 1,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
            notes: BTreeMap::new(),
        }
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn uncommitted_artifacts_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = OutDir::open(dir.path()).unwrap();
            out.write("a.csv", b"x").unwrap();
            assert!(dir.path().join("a.csv").exists());
        }
        assert!(!dir.path().join("a.csv").exists());
        assert!(!dir.path().join(LOCK).exists());
    }

    #[test]
    fn commit_keeps_artifacts_and_lists_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutDir::open(dir.path()).unwrap();
        out.write("a.csv", b"abc").unwrap();
        out.commit(manifest()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["artifacts"][0]["path"], "a.csv");
        assert_eq!(v["artifacts"][0]["sha256"], sha256_hex(b"abc"));
        assert_eq!(fs::read(dir.path().join("a.csv")).unwrap(), b"abc");
    }

    #[test]
    fn second_open_is_refused_while_locked() {
        let dir = tempfile::tempdir().unwrap();
        let first = OutDir::open(dir.path()).unwrap();
        let err = OutDir::open(dir.path()).err().unwrap();
        assert!(err.to_string().contains("in use"));
        drop(first);
        OutDir::open(dir.path()).unwrap();
    }
}
