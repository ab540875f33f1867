//! Run manifest: input digests, config hash and the artifacts a run wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use survsmooth::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub sha256: String,
}

/// Hashed part of the manifest. Paths and timings stay out of it so that
/// identical inputs give identical hashes wherever they live.
#[derive(Debug, Clone, Serialize)]
struct HashedContent<'a> {
    command: &'a str,
    version: &'a str,
    core_version: &'a str,
    config: &'a Value,
    inputs: Vec<(&'a str, &'a str)>,
}

#[derive(Debug, Serialize)]
struct ManifestFile<'a> {
    manifest_hash: &'a str,
    command: &'a str,
    version: &'a str,
    core_version: &'a str,
    config: &'a Value,
    config_hash: &'a str,
    inputs: &'a [InputRecord],
    out_dir: &'a Path,
    artifacts: &'a [ArtifactRecord],
    wall_time_seconds: f64,
}

#[derive(Serialize)]
struct Tagged<'a, T: Serialize> {
    manifest_hash: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub struct Run {
    command: String,
    config: Value,
    config_hash: String,
    inputs: Vec<InputRecord>,
    hash: String,
    out_dir: PathBuf,
    artifacts: Vec<ArtifactRecord>,
    started: Instant,
}

impl Run {
    /// Hashes the inputs and config and creates the output directory.
    pub fn start(command: &str, config: Value, inputs: &[(&str, &Path)], out_dir: &Path) -> Result<Self> {
        let started = Instant::now();
        let inputs = inputs
            .iter()
            .map(|(role, path)| {
                Ok(InputRecord {
                    role: role.to_string(),
                    path: path.to_path_buf(),
                    sha256: file_digest(path)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let config_hash = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        let version = env!("CARGO_PKG_VERSION");
        let hashed = HashedContent {
            command,
            version,
            core_version: survsmooth::VERSION,
            config: &config,
            inputs: inputs.iter().map(|i| (i.role.as_str(), i.sha256.as_str())).collect(),
        };
        let hash = sha256_hex(serde_json::to_string(&hashed)?.as_bytes());
        fs::create_dir_all(out_dir)?;
        Ok(Self {
            command: command.to_string(),
            config,
            config_hash,
            inputs,
            hash,
            out_dir: out_dir.to_path_buf(),
            artifacts: Vec::new(),
            started,
        })
    }

    fn record(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out_dir.join(file), bytes)?;
        self.artifacts.push(ArtifactRecord {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Pretty JSON with the manifest hash as its first field.
    pub fn write_json<T: Serialize>(&mut self, file: &str, body: &T) -> Result<()> {
        let tagged = Tagged {
            manifest_hash: &self.hash,
            body,
        };
        let mut bytes = serde_json::to_vec_pretty(&tagged)?;
        bytes.push(b'\n');
        self.record(file, &bytes)
    }

    /// CSV artifacts carry no header slot for the hash; the manifest lists
    /// them with their digests instead.
    pub fn write_csv<F>(&mut self, file: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut bytes = Vec::new();
        fill(&mut bytes)?;
        self.record(file, &bytes)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let m = ManifestFile {
            manifest_hash: &self.hash,
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            core_version: survsmooth::VERSION,
            config: &self.config,
            config_hash: &self.config_hash,
            inputs: &self.inputs,
            out_dir: &self.out_dir,
            artifacts: &self.artifacts,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        let mut bytes = serde_json::to_vec_pretty(&m)?;
        bytes.push(b'\n');
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, bytes)?;
        Ok(path)
    }
}
