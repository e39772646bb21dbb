//! Per-step metrics log and the wall-time breakdown derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NpdError, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rollout,
    Annotate,
    Ifd,
    Filter,
    Pack,
    Train,
    /// Policy lag at the moment the generator is re-snapshotted.
    Sync,
}

impl Phase {
    /// Phases that consume wall time, in breakdown order.
    pub const TIMED: [Phase; 6] = [
        Phase::Rollout,
        Phase::Annotate,
        Phase::Ifd,
        Phase::Filter,
        Phase::Pack,
        Phase::Train,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Phase::Rollout => "Student Rollout",
            Phase::Annotate => "Teacher Annotation",
            Phase::Ifd => "Delta-IFD Computation",
            Phase::Filter => "Filtering",
            Phase::Pack => "Packing",
            Phase::Train => "Training",
            Phase::Sync => "Sync",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub loss_total: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_kd: Option<f64>,
    pub lr: Option<f64>,
    pub kl_lag: Option<f64>,
    pub zone_degenerate_frac: Option<f64>,
    pub zone_proximal_frac: Option<f64>,
    pub zone_disconnect_frac: Option<f64>,
    pub zone_unconfirmed_frac: Option<f64>,
    pub wall_ms: f64,
}

impl MetricRow {
    pub fn new(step: u64, epoch: usize, phase: Phase) -> Self {
        MetricRow {
            step,
            epoch,
            phase,
            loss_total: None,
            loss_ce: None,
            loss_kd: None,
            lr: None,
            kl_lag: None,
            zone_degenerate_frac: None,
            zone_proximal_frac: None,
            zone_disconnect_frac: None,
            zone_unconfirmed_frac: None,
            wall_ms: 0.0,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> NpdError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    NpdError::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

pub fn encode_metrics(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| NpdError::Format(format!("metrics row: {e}")))?;
    }
    w.into_inner().map_err(|e| NpdError::Format(format!("metrics: {e}")))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    io::atomic_write(path, &encode_metrics(rows)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let bytes = io::read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseShare {
    pub phase: Phase,
    pub wall_ms: f64,
    pub percent: f64,
}

/// Total wall time per timed phase and its share of the sum. Every timed
/// phase appears, with zero time if it never ran.
pub fn phase_breakdown(rows: &[MetricRow]) -> Vec<PhaseShare> {
    let mut totals: BTreeMap<Phase, f64> = Phase::TIMED.iter().map(|&p| (p, 0.0)).collect();
    for r in rows {
        if let Some(t) = totals.get_mut(&r.phase) {
            *t += r.wall_ms;
        }
    }
    let sum: f64 = totals.values().sum();
    Phase::TIMED
        .iter()
        .map(|&phase| {
            let wall_ms = totals[&phase];
            PhaseShare {
                phase,
                wall_ms,
                percent: if sum > 0.0 { 100.0 * wall_ms / sum } else { 0.0 },
            }
        })
        .collect()
}
