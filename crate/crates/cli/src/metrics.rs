//! Append-only metrics log, one JSON record per line.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ProtocolSection, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Logical clock: the record's line number in its log, from 0.
    pub timestamp: u64,
    pub run_id: String,
    pub phase: Phase,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolSection>,
}

/// First 16 hex digits of the SHA-256 of the resolved config.
pub fn run_id(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub struct MetricsLog {
    path: PathBuf,
    run_id: String,
    next: u64,
}

impl MetricsLog {
    pub fn open(path: &Path, run_id: String) -> Result<Self> {
        let next = match std::fs::File::open(path) {
            Ok(f) => BufReader::new(f).lines().count() as u64,
            Err(_) => 0,
        };
        Ok(Self { path: path.to_path_buf(), run_id, next })
    }

    pub fn append(
        &mut self,
        phase: Phase,
        metrics: impl IntoIterator<Item = (&'static str, f64)>,
        tags: impl IntoIterator<Item = (&'static str, String)>,
        protocol: Option<&ProtocolSection>,
    ) -> Result<MetricRecord> {
        let rec = MetricRecord {
            timestamp: self.next,
            run_id: self.run_id.clone(),
            phase,
            metrics: metrics.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            tags: tags.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            protocol: protocol.cloned(),
        };
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .with_context(|| format!("opening {}", self.path.display()))?;
        f.write_all(line.as_bytes()).with_context(|| format!("writing {}", self.path.display()))?;
        self.next += 1;
        Ok(rec)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines().map(|l| serde_json::from_str(l).with_context(|| format!("bad record in {}", path.display()))).collect()
}
