//! CSV decision log shared by every pruning criterion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PruneDecision;
use crate::error::{LobsError, Result};
use crate::net::Network;

const HASH_PREFIX: &str = "# base_sha256=";

/// One row of the log, in application order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub stage: usize,
    pub layer: usize,
    pub q: usize,
    pub row: usize,
    pub col: usize,
    pub theta: f64,
    pub sensitivity: f64,
    /// Network-wide preserved / original parameters right after this decision.
    pub cumulative_cr: f64,
    pub criterion: String,
}

impl DecisionRecord {
    pub fn from_decision(d: &PruneDecision, stage: usize, layer: usize, criterion: &str) -> Self {
        DecisionRecord {
            stage,
            layer,
            q: d.q,
            row: d.row,
            col: d.col,
            theta: d.theta,
            sensitivity: d.sensitivity,
            cumulative_cr: f64::NAN,
            criterion: criterion.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionLog {
    /// Hex SHA-256 of the serialized model the log starts from.
    pub base_sha256: String,
    pub records: Vec<DecisionRecord>,
}

impl DecisionLog {
    /// Fills in `cumulative_cr` by walking the records from `base`.
    pub fn new(base_sha256: String, base: &Network, mut records: Vec<DecisionRecord>) -> Self {
        let total = base.param_count() as f64;
        let mut active = base.active_count();
        for r in &mut records {
            active = active.saturating_sub(1);
            r.cumulative_cr = active as f64 / total;
        }
        DecisionLog { base_sha256, records }
    }

    /// The first `len` records.
    pub fn prefix(&self, len: usize) -> DecisionLog {
        DecisionLog {
            base_sha256: self.base_sha256.clone(),
            records: self.records[..len.min(self.records.len())].to_vec(),
        }
    }
}

pub fn write_decision_log(log: &DecisionLog, mut out: impl Write) -> Result<()> {
    writeln!(out, "{HASH_PREFIX}{}", log.base_sha256).map_err(|e| LobsError::io("<decision log>", e))?;
    let mut w = csv::Writer::from_writer(out);
    if log.records.is_empty() {
        w.write_record([
            "stage", "layer", "q", "row", "col", "theta", "sensitivity", "cumulative_cr", "criterion",
        ])?;
    }
    for r in &log.records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LobsError::io("<decision log>", e))?;
    Ok(())
}

pub fn read_decision_log(input: impl Read) -> Result<DecisionLog> {
    let mut reader = BufReader::new(input);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| LobsError::io("<decision log>", e))?;
    let base_sha256 = first
        .trim_end()
        .strip_prefix(HASH_PREFIX)
        .ok_or_else(|| LobsError::Replay(format!("decision log must start with `{HASH_PREFIX}<hex>`")))?
        .to_string();
    let mut r = csv::Reader::from_reader(reader);
    let records = r.deserialize().collect::<std::result::Result<Vec<DecisionRecord>, _>>()?;
    Ok(DecisionLog { base_sha256, records })
}

impl DecisionLog {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| LobsError::io(path, e))?;
        write_decision_log(self, BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<DecisionLog> {
        let f = File::open(path).map_err(|e| LobsError::io(path, e))?;
        read_decision_log(f)
    }
}
