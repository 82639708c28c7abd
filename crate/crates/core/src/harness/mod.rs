//! Experiment harness: toy training, receptive-field probe, latency bench,
//! ablation sweeps, recall metric and run manifests.

mod ablation;
mod bench;
mod gradsuite;
mod manifest;
mod probe;
mod train;

pub use ablation::{parse_ratio, run_ablation, AblationAxis, AblationReport, AblationRow};
pub use bench::{latency_bench, shift_mlp_params, BenchReport, BenchRow};
pub use gradsuite::{end_to_end_gradcheck, gradient_suite, GradSuiteRow};
pub use manifest::{git_describe, write_atomic, RunManifest};
pub use probe::{final_positions, no_shift_twin, qualifying_clusters, receptive_field_probe, ClusterProbe, ProbeReport};
pub use train::{one_cycle_lr, train_toy, Adam, EpochLog, TrainConfig, TrainOutcome};

use crate::detector::{iou3d, Detection, Object};
use crate::error::Result;

/// Matched and total ground-truth counts: an object is matched when a
/// detection of its class overlaps it with IoU3D at or above `threshold`.
pub fn recall_counts(detections: &[Detection], objects: &[Object], threshold: f64) -> Result<(usize, usize)> {
    let mut matched = 0;
    for o in objects {
        for d in detections.iter().filter(|d| d.class_id == o.class_id) {
            if iou3d(&d.bbox, &o.bbox)? >= threshold {
                matched += 1;
                break;
            }
        }
    }
    Ok((matched, objects.len()))
}

#[cfg(test)]
mod tests;
