use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detector::{detect, Model};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub params: usize,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, variant: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times full inference (sampling, backbone, heads, decoding, NMS) of each
/// variant over `scenes`. Each repetition runs every scene once; `warmup`
/// repetitions are discarded. Variants are interleaved per repetition so
/// slow drifts of the machine affect them alike.
pub fn latency_bench(
    variants: &[(String, Model)],
    scenes: &[PointCloud],
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions < 10 {
        return Err(Error::InvalidArgument(format!("{repetitions} repetitions, need at least 10")));
    }
    if scenes.is_empty() || variants.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let mut samples = vec![Vec::with_capacity(repetitions); variants.len()];
    for rep in 0..warmup + repetitions {
        for (k, (_, model)) in variants.iter().enumerate() {
            let start = Instant::now();
            for cloud in scenes {
                std::hint::black_box(detect(cloud, model, seed)?);
            }
            let ms = start.elapsed().as_secs_f64() * 1e3 / scenes.len() as f64;
            if rep >= warmup {
                samples[k].push(ms);
            }
        }
    }
    let rows = variants
        .iter()
        .zip(samples)
        .map(|((name, model), mut s)| BenchRow {
            variant: name.clone(),
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            median_ms: median(&mut s),
            params: model.num_scalars(),
            repetitions,
        })
        .collect();
    Ok(BenchReport { rows })
}

/// Closed-form parameter count of the shift MLPs (`C -> C -> C` with
/// biases, `2C^2 + 2C`) summed over every scale of every stage.
pub fn shift_mlp_params(config: &crate::detector::ModelConfig) -> usize {
    config
        .stages
        .iter()
        .flat_map(|s| s.scales.iter())
        .map(|sc| {
            let c = sc.out_channels();
            2 * c * c + 2 * c
        })
        .sum()
}
