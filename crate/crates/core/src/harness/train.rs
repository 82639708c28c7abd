use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{write_cloud, write_labels, Scene};
use crate::detector::{BackbonePlan, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{scene_loss_and_grads, LossBreakdown};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Peak of the one-cycle schedule.
    pub peak_lr: f64,
    /// Fraction of steps spent warming up.
    pub pct_start: f64,
    /// Initial lr is `peak_lr / div_factor`.
    pub div_factor: f64,
    /// Final lr is the initial lr divided by this.
    pub final_div_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch loss CSV.
    pub log_csv: Option<PathBuf>,
    /// Where to dump the offending scene when the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            peak_lr: 0.01,
            pct_start: 0.4,
            div_factor: 10.0,
            final_div_factor: 1e4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            grad_clip: Some(10.0),
            seed: 0,
            checkpoint: None,
            log_csv: None,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Accepts a zero peak rate (frozen parameters) but not a negative one.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return bad(format!("peak lr {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.pct_start) || !(self.div_factor > 0.0) || !(self.final_div_factor > 0.0) {
            return bad("invalid one-cycle shape".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyperparameters".into());
        }
        Ok(())
    }
}

/// One-cycle learning rate: cosine warm-up from `peak/div` to `peak`, then
/// cosine annealing to `peak/(div*final_div)`.
pub fn one_cycle_lr(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let initial = config.peak_lr / config.div_factor;
    let last = initial / config.final_div_factor;
    let warm = ((config.pct_start * total as f64).round() as usize).max(1);
    let cos = |from: f64, to: f64, t: f64| to + (from - to) * (1.0 + (PI * t).cos()) / 2.0;
    if step < warm {
        cos(initial, config.peak_lr, step as f64 / warm as f64)
    } else {
        let span = (total - warm).max(1);
        cos(config.peak_lr, last, ((step - warm) as f64 / span as f64).min(1.0))
    }
}

/// Adam state over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, c: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + c.adam_eps);
        }
    }
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub offset: f64,
    pub cls: f64,
    pub loc: f64,
    pub size: f64,
    pub angle: f64,
    pub corner: f64,
    pub total: f64,
}

impl EpochLog {
    fn new(epoch: usize, lr: f64, b: &LossBreakdown) -> Self {
        Self {
            epoch,
            lr,
            offset: b.offset,
            cls: b.cls,
            loc: b.loc,
            size: b.size,
            angle: b.angle,
            corner: b.corner,
            total: b.total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<EpochLog>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.offset += b.offset / n;
        m.cls += b.cls / n;
        m.loc += b.loc / n;
        m.size += b.size / n;
        m.angle += b.angle / n;
        m.corner += b.corner / n;
        m.total += b.total / n;
    }
    m
}

fn dump_batch(dir: &PathBuf, id: &str, scene: &Scene, epoch: usize, b: &LossBreakdown) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_cloud(&dir.join(format!("{id}.bin")), &scene.cloud)?;
    write_labels(&dir.join(format!("{id}.json")), &scene.objects)?;
    let info = serde_json::json!({ "scene_id": id, "epoch": epoch, "loss": b });
    fs::write(dir.join(format!("{id}.diagnostic.json")), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Trains on `scenes` (one scene per step) with Adam and a one-cycle
/// schedule. The sampling plan of each scene is drawn once from the train
/// seed, so `detect` with the same seed replays it.
pub fn train_toy(scenes: &[(String, Scene)], model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyRequest);
    }
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let plans = scenes
        .iter()
        .map(|(_, s)| BackbonePlan::build(s.cloud.positions(), model_config, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let total_steps = config.epochs * scenes.len();
    let mut theta = model.store.flatten();
    let mut adam = Adam::new(theta.len());
    let mut curve = Vec::with_capacity(config.epochs);
    let mut csv = match &config.log_csv {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng::rng(rng::derive(config.seed, &[epoch as u64])));
        let mut losses = Vec::with_capacity(scenes.len());
        let mut lr = 0.0;
        for &i in &order {
            let (id, scene) = &scenes[i];
            let (loss, grads) = scene_loss_and_grads(&model, &scene.cloud, &scene.objects, &plans[i], config.seed)?;
            if !loss.breakdown.is_finite() || !grads.is_finite() {
                if let Some(dir) = &config.dump_dir {
                    dump_batch(dir, id, scene, epoch, &loss.breakdown)?;
                }
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, scene {id}: {:?}",
                    loss.breakdown
                )));
            }
            let mut g = grads.flatten();
            if let Some(clip) = config.grad_clip {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > clip {
                    g.iter_mut().for_each(|v| *v *= clip / norm);
                }
            }
            lr = one_cycle_lr(config, step, total_steps);
            if config.peak_lr > 0.0 {
                adam.step(&mut theta, &g, lr, config);
                model.store.set_flat(&theta)?;
            }
            losses.push(loss.breakdown);
            step += 1;
        }
        let log = EpochLog::new(epoch, lr, &mean_breakdown(&losses));
        log::info!("epoch {epoch}: total {:.5} lr {:.2e}", log.total, lr);
        if let Some(w) = csv.as_mut() {
            w.serialize(log)?;
            w.flush()?;
        }
        curve.push(log);
    }
    if let Some(path) = &config.checkpoint {
        model.save(path, serde_json::json!({ "seed": config.seed, "epochs": config.epochs }))?;
    }
    Ok(TrainOutcome { model, curve })
}
