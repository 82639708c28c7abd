use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{recall_counts, train_toy, TrainConfig};
use crate::data::Scene;
use crate::detector::{detect, ModelConfig};
use crate::error::{Error, Result};
use crate::ssa::{ExchangeOp, Selection};

/// One ablation axis; the others stay at the base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    ShiftRatio,
    Selection,
    Exchange,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [Self::ShiftRatio, Self::Selection, Self::Exchange];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ShiftRatio => "shift_ratio",
            Self::Selection => "selection",
            Self::Exchange => "exchange",
        }
    }

    /// Grid values in report order.
    pub fn values(self) -> Vec<String> {
        match self {
            Self::ShiftRatio => RATIOS.iter().map(|(s, _)| s.to_string()).collect(),
            Self::Selection => Selection::ALL.iter().map(|s| s.as_str().to_string()).collect(),
            Self::Exchange => ExchangeOp::ALL.iter().map(|s| s.as_str().to_string()).collect(),
        }
    }

    /// `base` with this axis set to `value` in every stage.
    pub fn apply(self, base: &ModelConfig, value: &str) -> Result<ModelConfig> {
        let mut c = base.clone();
        for stage in &mut c.stages {
            match self {
                Self::ShiftRatio => {
                    stage.shift_ratio = parse_ratio(value)?;
                }
                Self::Selection => stage.selection = value.parse()?,
                Self::Exchange => stage.exchange = value.parse()?,
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| Error::UnknownVariant {
            kind: "ablation axis",
            value: s.to_string(),
        })
    }
}

const RATIOS: [(&str, f64); 5] = [("0", 0.0), ("1/16", 1.0 / 16.0), ("1/8", 0.125), ("1/4", 0.25), ("1/2", 0.5)];

/// Parses `"a/b"` or a decimal.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let bad = || Error::InvalidArgument(format!("ratio {s:?}"));
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(bad());
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    /// Recall at IoU3D 0.5 on the training scenes.
    pub recall: Option<f64>,
    /// Mean total loss of the last epoch.
    pub loss: Option<f64>,
    pub status: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_cell(axis: AblationAxis, value: &str, base: &ModelConfig, train: &TrainConfig, scenes: &[(String, Scene)]) -> Result<(f64, f64)> {
    let config = axis.apply(base, value)?;
    let out = train_toy(scenes, &config, train)?;
    let (mut hit, mut total) = (0, 0);
    for (_, s) in scenes {
        let dets = detect(&s.cloud, &out.model, train.seed)?;
        let (h, t) = recall_counts(&dets, &s.objects, 0.5)?;
        hit += h;
        total += t;
    }
    let recall = if total == 0 { 1.0 } else { hit as f64 / total as f64 };
    Ok((recall, out.curve.last().map_or(f64::NAN, |l| l.total)))
}

/// Trains and evaluates every `(axis, value)` cell with the same seed and
/// budget. A failing cell is recorded with its reason and the sweep goes
/// on. Cells run on up to `jobs` threads; row order is the grid order.
pub fn run_ablation(
    axes: &[AblationAxis],
    base: &ModelConfig,
    train: &TrainConfig,
    scenes: &[(String, Scene)],
    jobs: usize,
) -> Result<AblationReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let train = TrainConfig {
        checkpoint: None,
        log_csv: None,
        ..train.clone()
    };
    let cells: Vec<(AblationAxis, String)> =
        axes.iter().flat_map(|&a| a.values().into_iter().map(move |v| (a, v))).collect();
    let results: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some((axis, value)) = cells.get(k) else { break };
        log::info!("ablation cell {axis}={value}");
        let row = match run_cell(*axis, value, base, &train, scenes) {
            Ok((recall, loss)) => AblationRow {
                axis: axis.to_string(),
                value: value.clone(),
                recall: Some(recall),
                loss: Some(loss),
                status: "ok".into(),
                error: String::new(),
            },
            Err(e) => {
                log::warn!("ablation cell {axis}={value} failed: {e}");
                AblationRow {
                    axis: axis.to_string(),
                    value: value.clone(),
                    recall: None,
                    loss: None,
                    status: "failed".into(),
                    error: e.to_string(),
                }
            }
        };
        results.lock().expect("no panics while holding the lock")[k] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(cells.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let rows = results
        .into_inner()
        .expect("no panics while holding the lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    Ok(AblationReport { rows })
}
