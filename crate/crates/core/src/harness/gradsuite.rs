use serde::{Deserialize, Serialize};

use crate::data::{generate_scene, SynthConfig};
use crate::detector::{BackbonePlan, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{scene_loss_and_grads, scene_loss_with_store};
use crate::rng::derive;
use crate::ssa::ExchangeOp;
use crate::tensor::{grad_check, GradCheckOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteRow {
    pub name: String,
    pub coords: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

/// Finite-difference check of the full training loss (two-stage backbone,
/// votes, candidate aggregation, heads and every loss term) of the small
/// model with exchange operator `op`, on a small synthetic scene. Every
/// `stride`-th parameter is checked.
pub fn end_to_end_gradcheck(op: ExchangeOp, seed: u64, stride: usize) -> Result<GradSuiteRow> {
    let scene = generate_scene(&SynthConfig::small(), derive(seed, &[0]))?;
    let mut config = ModelConfig::small();
    for s in &mut config.stages {
        s.exchange = op;
    }
    let model = Model::new(config, derive(seed, &[1]))?;
    let plan = BackbonePlan::build(scene.cloud.positions(), &model.config, seed)?;
    let (loss, grads) = scene_loss_and_grads(&model, &scene.cloud, &scene.objects, &plan, seed)?;
    if loss.num_positive == 0 {
        return Err(Error::InvalidArgument(format!("seed {seed}: scene has no positive candidate")));
    }
    let theta = model.store.flatten();
    let coords: Vec<usize> = (0..theta.len()).step_by(stride.max(1)).collect();
    let mut failure = None;
    let report = grad_check(&theta, &grads.flatten(), &coords, GradCheckOptions::default(), |t| {
        let mut s = model.store.clone();
        s.set_flat(t).expect("same layout");
        match scene_loss_with_store(&s, &model, &scene.cloud, &scene.objects, &plan, seed) {
            Ok((l, _)) => l.breakdown.total,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    log::info!("gradcheck {op}: max rel error {:.3e} over {} coords", report.max_rel_error, report.checked);
    Ok(GradSuiteRow {
        name: format!("end_to_end/{op}"),
        coords: report.checked,
        skipped_kinks: report.skipped_kinks,
        max_rel_error: report.max_rel_error,
    })
}

/// The full suite: every parameter with the default `cs` operator, then
/// every third parameter for each other exchange operator.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradSuiteRow>> {
    let mut rows = vec![end_to_end_gradcheck(ExchangeOp::Cs, seed, 1)?];
    for op in ExchangeOp::ALL.into_iter().filter(|&op| op != ExchangeOp::Cs) {
        rows.push(end_to_end_gradcheck(op, seed, 3)?);
    }
    Ok(rows)
}
