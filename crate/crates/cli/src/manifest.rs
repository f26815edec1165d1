//! Run manifests: what a command did and every file it left behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the stage directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub stages: Vec<StageRecord>,
    pub input_dir: Option<PathBuf>,
    pub input_fingerprint: Option<String>,
    /// Hash over the sorted file inventory below.
    pub output_fingerprint: String,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("walked below root").to_path_buf());
        }
    }
    Ok(())
}

/// Hashes every file below `dir` except the run manifest, sorted by path.
pub fn inventory(dir: &Path) -> Result<Vec<FileEntry>> {
    let mut paths = Vec::new();
    walk(dir, dir, &mut paths)?;
    let mut files: Vec<FileEntry> = paths
        .into_iter()
        .filter(|p| p.as_os_str() != RUN_MANIFEST)
        .map(|rel| {
            let full = dir.join(&rel);
            let bytes = fs::read(&full).map_err(|e| CliError::io(&full, e))?;
            Ok(FileEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(files)
}

pub fn fingerprint(files: &[FileEntry]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.path.as_bytes());
        h.update([0]);
        h.update(f.sha256.as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

/// Fingerprint of a stage directory's current contents.
pub fn dir_fingerprint(dir: &Path) -> Result<String> {
    Ok(fingerprint(&inventory(dir)?))
}

pub struct ManifestBuilder {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<(String, u64)>,
    pub stages: Vec<StageRecord>,
    pub input_dir: Option<PathBuf>,
    pub input_fingerprint: Option<String>,
    started: u64,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_hash: String) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_hash,
            seeds: Vec::new(),
            stages: Vec::new(),
            input_dir: None,
            input_fingerprint: None,
            started: unix_now(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.push((name.to_string(), value));
        self
    }

    pub fn stage<T: Serialize>(&mut self, name: &str, params: &T) {
        self.stages.push(StageRecord {
            name: name.to_string(),
            params: serde_json::to_value(params).expect("stage params serialize"),
        });
    }

    pub fn input(&mut self, dir: &Path) -> Result<()> {
        self.input_fingerprint = Some(dir_fingerprint(dir)?);
        self.input_dir = Some(dir.to_path_buf());
        Ok(())
    }

    /// Inventories `dir` and writes its run manifest.
    pub fn finish(self, dir: &Path) -> Result<RunManifest> {
        let files = inventory(dir)?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            config_hash: self.config_hash,
            seeds: self.seeds,
            stages: self.stages,
            input_dir: self.input_dir,
            input_fingerprint: self.input_fingerprint,
            output_fingerprint: fingerprint(&files),
            started_unix_s: self.started,
            finished_unix_s: unix_now(),
            files,
        };
        let path = dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inventory_lists_every_file_but_itself() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a/b")).unwrap();
        fs::write(dir.path().join("a/b/x.csv"), "1\n").unwrap();
        fs::write(dir.path().join("top.json"), "{}").unwrap();
        let m = ManifestBuilder::new("test", "h".into()).finish(dir.path()).unwrap();
        let paths: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["a/b/x.csv", "top.json"]);
        assert_eq!(m.files[0].bytes, 2);
        // rewriting the manifest does not change the fingerprint
        assert_eq!(dir_fingerprint(dir.path()).unwrap(), m.output_fingerprint);
        assert_eq!(read_manifest(dir.path()).unwrap().files, m.files);
    }

    #[test]
    fn fingerprint_tracks_content_and_names() {
        let a = FileEntry {
            path: "x".into(),
            bytes: 1,
            sha256: "00".into(),
        };
        let b = FileEntry {
            path: "y".into(),
            ..a.clone()
        };
        assert_ne!(fingerprint(&[a.clone()]), fingerprint(&[b]));
        assert_eq!(fingerprint(&[a.clone()]), fingerprint(&[a]));
    }
}
