use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a cluster exchanges information with its paired partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeOp {
    /// Cross-cluster shifting: splice the partner's first `s` channels in.
    Cs,
    None,
    Concat,
    Avg,
    Attn,
}

impl ExchangeOp {
    pub const ALL: [ExchangeOp; 5] = [
        ExchangeOp::None,
        ExchangeOp::Concat,
        ExchangeOp::Avg,
        ExchangeOp::Attn,
        ExchangeOp::Cs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExchangeOp::Cs => "cs",
            ExchangeOp::None => "none",
            ExchangeOp::Concat => "concat",
            ExchangeOp::Avg => "avg",
            ExchangeOp::Attn => "attn",
        }
    }
}

impl fmt::Display for ExchangeOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExchangeOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExchangeOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant {
                kind: "exchange op",
                value: s.to_string(),
            })
    }
}

/// Rule for choosing the exchange partner among sampled candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Farthest,
    Nearest,
    /// Largest mean feature value over channels.
    FeatsScale,
    /// Most valid neighbours in the candidate's own grouping.
    PointsNum,
}

impl Selection {
    pub const ALL: [Selection; 4] = [
        Selection::FeatsScale,
        Selection::Nearest,
        Selection::PointsNum,
        Selection::Farthest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Farthest => "farthest",
            Selection::Nearest => "nearest",
            Selection::FeatsScale => "feats_scale",
            Selection::PointsNum => "points_num",
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Selection::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant {
                kind: "selection strategy",
                value: s.to_string(),
            })
    }
}

/// One grouping scale: ball radius, neighbour budget and the widths of the
/// per-neighbour MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub radius: f64,
    pub k: usize,
    pub mlp: Vec<usize>,
}

impl ScaleConfig {
    pub fn new(radius: f64, k: usize, mlp: &[usize]) -> Self {
        Self {
            radius,
            k,
            mlp: mlp.to_vec(),
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.mlp.last().unwrap_or(&0)
    }
}

pub const DEFAULT_SHIFT_RATIO: f64 = 1.0 / 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsaConfig {
    pub scales: Vec<ScaleConfig>,
    #[serde(default = "default_shift_ratio")]
    pub shift_ratio: f64,
    /// Partner search radius; `None` means twice the largest scale radius.
    #[serde(default)]
    pub r_prime: Option<f64>,
    /// Partner candidate budget (self included); `None` reuses the last
    /// scale's `k`.
    #[serde(default)]
    pub candidate_k: Option<usize>,
    /// Widths of the scale-aggregation MLP.
    pub agg: Vec<usize>,
    #[serde(default = "default_exchange")]
    pub exchange: ExchangeOp,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

fn default_shift_ratio() -> f64 {
    DEFAULT_SHIFT_RATIO
}

fn default_exchange() -> ExchangeOp {
    ExchangeOp::Cs
}

fn default_selection() -> Selection {
    Selection::Farthest
}

impl SsaConfig {
    pub fn new(scales: Vec<ScaleConfig>, agg: &[usize]) -> Self {
        Self {
            scales,
            shift_ratio: DEFAULT_SHIFT_RATIO,
            r_prime: None,
            candidate_k: None,
            agg: agg.to_vec(),
            exchange: ExchangeOp::Cs,
            selection: Selection::Farthest,
        }
    }

    pub fn max_radius(&self) -> f64 {
        self.scales.iter().map(|s| s.radius).fold(0.0, f64::max)
    }

    pub fn r_prime(&self) -> f64 {
        self.r_prime.unwrap_or(2.0 * self.max_radius())
    }

    pub fn candidate_k(&self) -> usize {
        self.candidate_k
            .unwrap_or_else(|| self.scales.last().map_or(1, |s| s.k))
    }

    /// `round(shift_ratio * c)` clamped to `[0, c]`.
    pub fn shift_channels(&self, c: usize) -> usize {
        ((self.shift_ratio * c as f64).round().max(0.0) as usize).min(c)
    }

    pub fn out_channels(&self) -> usize {
        *self.agg.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.scales.is_empty() {
            return bad("ssa needs at least one scale".into());
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !(s.radius > 0.0 && s.radius.is_finite()) || s.k == 0 || s.mlp.is_empty() {
                return bad(format!("scale {i}: need radius > 0, k >= 1, non-empty mlp"));
            }
            if s.mlp.contains(&0) {
                return bad(format!("scale {i}: zero-width layer"));
            }
        }
        if self.agg.is_empty() || self.agg.contains(&0) {
            return bad("aggregation widths must be non-empty and positive".into());
        }
        if !(0.0..=1.0).contains(&self.shift_ratio) {
            return bad(format!("shift ratio {} outside [0, 1]", self.shift_ratio));
        }
        if !(self.r_prime() >= self.max_radius()) {
            return bad(format!(
                "r_prime {} smaller than largest scale radius {}",
                self.r_prime(),
                self.max_radius()
            ));
        }
        if self.candidate_k() == 0 {
            return bad("candidate_k must be >= 1".into());
        }
        Ok(())
    }
}
