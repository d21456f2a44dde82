//! Sidecar files recording how each artifact was produced.

use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use chrono::{DateTime, SecondsFormat, Utc};
use promptprf::CallCounts;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SIDECAR_SUFFIX: &str = ".provenance.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Full argument vector; re-running it reproduces the artifact.
    pub argv: Vec<String>,
    pub working_dir: String,
    pub config_digest: String,
    pub resolved_config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub started_at: String,
    pub finished_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub call_counts: Option<CallCounts>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Collects provenance while a command runs.
#[derive(Debug)]
pub struct Recorder {
    command: String,
    argv: Vec<String>,
    started: DateTime<Utc>,
    resolved: serde_json::Value,
    inputs: Vec<InputDigest>,
    pub call_counts: Option<CallCounts>,
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> anyhow::Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("provenance.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(SIDECAR_SUFFIX);
        PathBuf::from(s)
    }
}

impl Recorder {
    pub fn start(
        command: &str,
        argv: &[String],
        resolved: &impl Serialize,
    ) -> anyhow::Result<Self> {
        Ok(Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            started: Utc::now(),
            resolved: serde_json::to_value(resolved)?,
            inputs: Vec::new(),
            call_counts: None,
            notes: Vec::new(),
        })
    }

    pub fn config_digest(&self) -> String {
        sha256_hex(self.resolved.to_string().as_bytes())
    }

    /// Records a file input (for directories, every regular file inside, sorted).
    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && !p.to_string_lossy().ends_with("provenance.json"))
                .collect();
            files.sort();
            for f in files {
                self.input(&f)?;
            }
            return Ok(());
        }
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: file_digest(path)?,
        });
        Ok(())
    }

    fn finish(&self) -> Provenance {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            argv: self.argv.clone(),
            working_dir: std::env::current_dir()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            config_digest: self.config_digest(),
            resolved_config: self.resolved.clone(),
            inputs: self.inputs.clone(),
            started_at: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            call_counts: self.call_counts,
            notes: self.notes.clone(),
        }
    }

    /// Writes the sidecar next to `output`.
    pub fn write_for(&self, output: &Path) -> anyhow::Result<PathBuf> {
        let path = sidecar_path(output);
        let json = serde_json::to_string_pretty(&self.finish())?;
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn read_sidecar(output: &Path) -> anyhow::Result<serde_json::Value> {
    let path = sidecar_path(output);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
