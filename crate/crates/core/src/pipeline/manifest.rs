use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";

/// Record of one completed stage. Every file of the stage directory other
/// than the manifest itself is listed in `artifacts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub stage: String,
    pub config: serde_json::Value,
    /// Hashes of the manifests of the stages this one consumed, keyed by
    /// their path relative to the run root.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the stage directory, mapped to its hash.
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Set when the stage finished without producing its main artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if e.file_type()?.is_dir() {
            walk(&p, base, out)?;
        } else {
            out.push(
                p.strip_prefix(base)
                    .map_err(|e| Error::Format(e.to_string()))?
                    .to_path_buf(),
            );
        }
    }
    Ok(())
}

/// Every file below `dir`, relative to it, in sorted order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.is_dir() {
        walk(dir, dir, &mut out)?;
    }
    Ok(out)
}

fn rel_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// What a stage should do given what is already on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StageStatus {
    /// Finished with the same configuration and inputs.
    Done(RunManifest),
    /// Nothing usable on disk; start from scratch.
    Fresh,
    /// Partial output present and `--resume` given.
    Resume,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageFlags {
    pub force: bool,
    pub resume: bool,
}

/// One stage directory under the run root.
#[derive(Debug, Clone)]
pub struct Stage {
    pub root: PathBuf,
    /// Path relative to the run root, with `/` separators.
    pub name: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
}

impl Stage {
    pub fn new<T: Serialize>(root: &Path, name: &str, config: &T) -> Result<Self> {
        Ok(Self {
            root: root.to_path_buf(),
            name: name.to_string(),
            config: serde_json::to_value(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir().join(MANIFEST)
    }

    /// Records a completed upstream stage as an input; errors if it is not complete.
    pub fn require(&mut self, upstream: &str, hint: &str) -> Result<RunManifest> {
        let path = self.root.join(upstream).join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingPrerequisite(format!(
                "{upstream} has not been produced; {hint}"
            )));
        }
        let m: RunManifest = read_json(&path)?;
        self.inputs.insert(format!("{upstream}/{MANIFEST}"), file_hash(&path)?);
        Ok(m)
    }

    /// Decides between skipping, resuming and starting over. With `force`
    /// any existing output is deleted.
    pub fn begin(&self, flags: StageFlags) -> Result<StageStatus> {
        let dir = self.dir();
        let path = self.manifest_path();
        if flags.force {
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            return Ok(StageStatus::Fresh);
        }
        if path.is_file() {
            let m: RunManifest = read_json(&path)?;
            if m.config != self.config {
                return Err(Error::StageConflict(format!(
                    "{} was completed with a different configuration; pass --force to redo it",
                    self.name
                )));
            }
            if m.inputs != self.inputs {
                return Err(Error::StageConflict(format!(
                    "{} was built from different upstream artifacts; pass --force to redo it",
                    self.name
                )));
            }
            return Ok(StageStatus::Done(m));
        }
        if list_files(&dir)?.is_empty() {
            return Ok(StageStatus::Fresh);
        }
        if flags.resume {
            return Ok(StageStatus::Resume);
        }
        Err(Error::StageConflict(format!(
            "{} holds partial output; pass --resume to continue or --force to restart",
            self.name
        )))
    }

    /// Hashes every file in the stage directory and writes the manifest last.
    pub fn finish(&self, timings: BTreeMap<String, f64>, failure: Option<String>) -> Result<RunManifest> {
        let dir = self.dir();
        fs::create_dir_all(&dir)?;
        let mut artifacts = BTreeMap::new();
        for rel in list_files(&dir)? {
            let key = rel_string(&rel);
            if key == MANIFEST {
                continue;
            }
            artifacts.insert(key, file_hash(&dir.join(&rel))?);
        }
        let m = RunManifest {
            stage: self.name.clone(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            artifacts,
            timings,
            failure,
        };
        write_json(&self.manifest_path(), &m)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_blob_layout() {
        // sha256 of "blob 0\0"
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_ne!(content_hash(b"a"), content_hash(b"b"));
    }

    #[test]
    fn lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let st = Stage::new(tmp.path(), "s", &1).unwrap();
        let flags = StageFlags::default();
        assert_eq!(st.begin(flags).unwrap(), StageStatus::Fresh);
        fs::create_dir_all(st.dir().join("sub")).unwrap();
        fs::write(st.dir().join("sub/a.txt"), "x").unwrap();
        assert!(matches!(st.begin(flags), Err(Error::StageConflict(_))));
        let resume = StageFlags {
            resume: true,
            force: false,
        };
        assert_eq!(st.begin(resume).unwrap(), StageStatus::Resume);
        let m = st.finish(BTreeMap::new(), None).unwrap();
        assert_eq!(m.artifacts.keys().collect::<Vec<_>>(), ["sub/a.txt"]);
        assert!(matches!(st.begin(flags).unwrap(), StageStatus::Done(_)));

        let other = Stage::new(tmp.path(), "s", &2).unwrap();
        assert!(matches!(other.begin(flags), Err(Error::StageConflict(_))));
        let force = StageFlags {
            force: true,
            resume: false,
        };
        assert_eq!(other.begin(force).unwrap(), StageStatus::Fresh);
        assert!(!st.dir().exists());

        let mut down = Stage::new(tmp.path(), "t", &0).unwrap();
        assert!(matches!(down.require("s", "run s"), Err(Error::MissingPrerequisite(_))));
    }
}
