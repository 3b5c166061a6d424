//! Run manifests: effective config, seed, hashed artifacts and the
//! manifests of the inputs each run consumed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// Training step whose EMA weights were kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_step: Option<usize>,
    /// Network evaluations per forecast member.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe: Option<usize>,
    pub parents: Vec<ArtifactRef>,
    pub artifacts: Vec<ArtifactRef>,
    pub config: RunConfig,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn artifact(root: &Path, path: &Path) -> CliResult<ArtifactRef> {
    Ok(ArtifactRef { path: relative(root, path), sha256: hash_file(path)? })
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest { command: command.to_string(), seed: config.seed, selected_step: None, nfe: None, parents: Vec::new(), artifacts: Vec::new(), config: config.clone() }
    }

    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> CliResult<()> {
        self.artifacts.push(artifact(root, path)?);
        Ok(())
    }

    pub fn add_parent(&mut self, root: &Path, manifest_path: &Path) -> CliResult<()> {
        self.parents.push(artifact(root, manifest_path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = toml::to_string(self).map_err(|e| CliError::data(e.to_string()))?;
        write_file(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    /// Checks that every listed artifact still hashes to its recorded value.
    pub fn verify(&self, root: &Path) -> CliResult<()> {
        for a in &self.artifacts {
            let p = root.join(&a.path);
            if hash_file(&p)? != a.sha256 {
                return Err(CliError::data(format!("{} does not match its manifest hash", p.display())));
            }
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Path of the manifest for a stage directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.toml")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        write_file(&root.join("a/x.bin"), b"payload").unwrap();
        let mut m = Manifest::new("generate", &RunConfig::default());
        m.add_artifact(root, &root.join("a/x.bin")).unwrap();
        assert_eq!(m.artifacts[0].path, "a/x.bin");
        let p = manifest_path(root);
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back, m);
        back.verify(root).unwrap();
        write_file(&root.join("a/x.bin"), b"changed").unwrap();
        assert!(back.verify(root).is_err());
    }
}
