//! Run manifests: what a command was asked to do and what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const RUN_MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, with path values made absolute.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub output_dir: PathBuf,
    /// SHA-256 of every file under `output_dir`, keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(Error::json(path))?;
        if m.format_version != RUN_MANIFEST_VERSION {
            return Err(Error::integrity(path, format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save_atomic(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::json(path))?;
        write_atomic(path, text.as_bytes())
    }

    /// Artifacts whose checksums differ between two runs, including files
    /// present in only one of them.
    pub fn diff_artifacts(&self, other: &RunManifest) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.artifacts {
            if other.artifacts.get(k) != Some(v) {
                out.push(k.clone());
            }
        }
        for k in other.artifacts.keys() {
            if !self.artifacts.contains_key(k) {
                out.push(k.clone());
            }
        }
        out
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums of all regular files below `dir`, skipping `exclude` names at
/// the top level.
pub fn checksum_tree(dir: &Path, exclude: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(Error::io(&d))? {
            let entry = entry.map_err(Error::io(&d))?;
            let path = entry.path();
            let rel = path.strip_prefix(dir).expect("below root");
            if d == dir && exclude.iter().any(|e| rel.as_os_str() == *e) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dir: &Path) -> RunManifest {
        RunManifest {
            format_version: RUN_MANIFEST_VERSION,
            tool_version: "0".into(),
            command: "synth".into(),
            args: vec!["synth".into(), "--n".into(), "3".into()],
            config: serde_json::json!({"n": 3}),
            seed: Some(7),
            inputs: vec![],
            output_dir: dir.to_path_buf(),
            artifacts: checksum_tree(dir, &[RUN_MANIFEST_FILE]).unwrap(),
            duration_secs: 0.5,
        }
    }

    #[test]
    fn tree_checksums_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a/b")).unwrap();
        fs::write(dir.path().join("a/b/x.txt"), b"abc").unwrap();
        fs::write(dir.path().join("top"), b"").unwrap();
        fs::write(dir.path().join(RUN_MANIFEST_FILE), b"ignored").unwrap();
        let m = sample(dir.path());
        assert_eq!(m.artifacts.len(), 2);
        assert_eq!(
            m.artifacts["a/b/x.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            m.artifacts["top"],
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );

        let path = dir.path().join(RUN_MANIFEST_FILE);
        m.save_atomic(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
        assert!(!dir.path().join(format!(".{RUN_MANIFEST_FILE}.tmp")).exists());
    }

    #[test]
    fn diff_reports_both_directions() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        fs::write(dir.path().join("y"), b"2").unwrap();
        let a = sample(dir.path());
        let mut b = a.clone();
        assert!(a.diff_artifacts(&b).is_empty());
        b.artifacts.insert("x".into(), "00".into());
        b.artifacts.remove("y");
        b.artifacts.insert("z".into(), "00".into());
        assert_eq!(a.diff_artifacts(&b), vec!["x", "y", "z"]);
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = sample(dir.path());
        m.format_version = 99;
        let path = dir.path().join("m.json");
        m.save_atomic(&path).unwrap();
        assert!(matches!(RunManifest::load(&path), Err(Error::Integrity { .. })));
    }
}
