//! Atomic output writing and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Effective configuration with absolute input paths.
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, config: &RunConfig) -> Self {
        Manifest {
            tool: "thermosleep".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let h = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// True when `text` looks like a manifest rather than a TOML config.
    pub fn sniff(text: &str) -> bool {
        text.trim_start().starts_with('{')
    }

    /// Check the inputs recorded in a manifest are still the same bytes.
    pub fn verify_inputs(&self) -> Result<(), thermosleep::Error> {
        for (path, want) in &self.inputs {
            let got = hash_file(Path::new(path)).map_err(|e| thermosleep::Error::Validation(format!("{e:#}")))?;
            if &got != want {
                return Err(thermosleep::Error::Validation(format!(
                    "input {path} changed since the manifest was written"
                )));
            }
        }
        Ok(())
    }
}

/// Writes files into the output directory via temp file plus rename and
/// records their hashes.
pub struct OutDir {
    dir: PathBuf,
    pub written: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)
            .with_context(|| format!("creating temp file in {}", self.dir.display()))?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        // temp files are created owner-only; outputs should be ordinary files
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
        }
        tmp.persist(self.path(name))
            .with_context(|| format!("writing {}", self.path(name).display()))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Render with a writer-taking function and store the result.
    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> thermosleep::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Write the manifest last so it lists every other output.
    pub fn finish(mut self, mut manifest: Manifest) -> Result<()> {
        manifest.outputs = self.written.clone();
        self.write_json(MANIFEST_NAME, &manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn atomic_write_records_hash() {
        let d = tempfile::tempdir().unwrap();
        let mut out = OutDir::create(d.path()).unwrap();
        out.write("a.txt", b"abc").unwrap();
        assert_eq!(fs::read(d.path().join("a.txt")).unwrap(), b"abc");
        assert_eq!(out.written["a.txt"], sha256_hex(b"abc"));
        let n = fs::read_dir(d.path()).unwrap().count();
        assert_eq!(n, 1, "no temp files left behind");
    }
}
