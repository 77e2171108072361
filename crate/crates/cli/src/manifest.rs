use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance of one command run, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    /// Hash of the effective solver configuration, when one was used.
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub exit_code: u8,
}

pub struct Run {
    pub out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: None,
                seeds: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                timings: BTreeMap::new(),
                exit_code: 0,
            },
        })
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    pub fn config<T: Serialize>(&mut self, cfg: &T) -> Result<()> {
        self.manifest.config_hash = Some(sha256_hex(serde_json::to_string(cfg)?.as_bytes()));
        Ok(())
    }

    /// Records the hash of an input file.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.manifest.timings.entry(phase.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records an output written by a library function.
    pub fn wrote(&mut self, name: &str) {
        self.manifest.outputs.push(name.to_string());
    }

    pub fn finish(mut self, exit_code: u8) -> Result<()> {
        self.manifest.exit_code = exit_code;
        let path = self.out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
