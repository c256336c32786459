//! Run manifests: a digest of the effective configuration, the seed fan-out,
//! and every artifact the run produced with its content digest. Reruns with
//! the same toolchain, config, and seed reproduce all digests.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use flowmerge_core::error::{Error, Result};

pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    started: Instant,
    artifacts: Vec<(String, String)>,
    notes: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        write!(s, "{b:02x}").unwrap();
    }
    Ok(s)
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_digest: sha256_hex(config_text.as_bytes()),
            seed,
            started: Instant::now(),
            artifacts: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Record an artifact that already exists on disk.
    pub fn add_artifact(&mut self, out_dir: &Path, rel: &str) -> Result<()> {
        let digest = sha256_file(&out_dir.join(rel))?;
        self.artifacts.push((rel.to_string(), digest));
        Ok(())
    }

    /// Record a volatile artifact under a canonical digest computed from
    /// caller-provided bytes (e.g. a trace with timing columns stripped).
    pub fn add_canonical(&mut self, rel: &str, canonical_bytes: &[u8]) {
        self.artifacts
            .push((format!("{rel}#canonical"), sha256_hex(canonical_bytes)));
    }

    pub fn add_note(&mut self, key: &str, value: impl ToString) {
        self.notes.push((key.to_string(), value.to_string()));
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.toml");
        let mut s = String::new();
        writeln!(s, "command = {:?}", self.command).unwrap();
        writeln!(s, "config_digest = {:?}", self.config_digest).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "version = {:?}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(s, "wall_seconds = {}", self.started.elapsed().as_secs_f64()).unwrap();
        for (k, v) in &self.notes {
            writeln!(s, "note_{k} = {v:?}").unwrap();
        }
        writeln!(s, "\n[artifacts]").unwrap();
        for (rel, digest) in &self.artifacts {
            writeln!(s, "{rel:?} = {digest:?}").unwrap();
        }
        std::fs::write(&path, s)?;
        // Every listed artifact must exist (canonical entries reference the
        // file before the '#').
        for (rel, _) in &self.artifacts {
            let file = rel.split('#').next().unwrap();
            if !out_dir.join(file).exists() {
                return Err(Error::state(format!("manifest lists missing artifact {file}")));
            }
        }
        Ok(path)
    }
}
