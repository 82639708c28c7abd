use serde::{Deserialize, Serialize};

use crate::detector::{backbone_graph, BackbonePlan, Model};
use crate::error::{Error, Result};
use crate::geometry::{sq_dist, Pairing, Point3, PointCloud};
use crate::ssa::ExchangeOp;
use crate::tensor::{Graph, Matrix};

/// Receptive field of one final-stage cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProbe {
    pub position: Point3,
    /// Input points whose displacement changes the cluster's output.
    pub influential: Vec<usize>,
    /// Largest distance from the cluster to an influential point (0 when
    /// there is none).
    pub radius: f64,
    /// Final-stage partner of the cluster.
    pub partner: usize,
    /// Input points whose displacement changes the partner's shifted
    /// channels `x_f[:s]` at the final stage, for any scale.
    pub partner_shift_influence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub exchange: ExchangeOp,
    pub eps: f64,
    pub tol: f64,
    /// Sum over stages of the largest ball radius.
    pub composed_reach: f64,
    pub clusters: Vec<ClusterProbe>,
    pub mean_radius: f64,
    pub max_radius: f64,
}

impl ProbeReport {
    /// Influential points farther than the composed reach, as
    /// `(cluster, point)` pairs.
    pub fn reach_violations(&self, cloud: &PointCloud) -> Vec<(usize, usize)> {
        let r2 = self.composed_reach * self.composed_reach * (1.0 + 1e-12);
        let mut out = Vec::new();
        for (i, c) in self.clusters.iter().enumerate() {
            for &q in &c.influential {
                if sq_dist(&cloud.positions()[q], &c.position) > r2 {
                    out.push((i, q));
                }
            }
        }
        out
    }
}

struct Snapshot {
    output: Matrix,
    shifted: Vec<Matrix>,
}

fn run(model: &Model, cloud: &PointCloud, plan: &BackbonePlan, frozen: Option<&[Pairing]>) -> Result<(Snapshot, Vec<Pairing>)> {
    let mut g = Graph::new(&model.store);
    let outs = backbone_graph(&mut g, cloud, &model.config, &model.params, plan, frozen)?;
    let last = outs.last().expect("validated config has stages");
    let cfg = model.config.stages.last().expect("validated config has stages");
    let shifted = last
        .per_scale
        .iter()
        .zip(&cfg.scales)
        .map(|(&v, sc)| {
            let s = cfg.shift_channels(sc.out_channels());
            let x = g.value(v);
            let mut m = Matrix::zeros(x.rows(), s);
            for i in 0..x.rows() {
                m.row_mut(i).copy_from_slice(&x.row(i)[..s]);
            }
            m
        })
        .collect();
    let pairings = outs.iter().map(|o| o.pairing.clone()).collect();
    Ok((
        Snapshot {
            output: g.value(last.aggregated).clone(),
            shifted,
        },
        pairings,
    ))
}

fn row_changed(a: &Matrix, b: &Matrix, i: usize, tol: f64) -> bool {
    a.row(i).iter().zip(b.row(i)).any(|(x, y)| (x - y).abs() > tol)
}

/// Displaces every input point by `eps` along each axis and reruns the
/// backbone with all sampling, grouping and pairing decisions frozen. A
/// point is influential for a final-stage cluster when any output channel
/// of that cluster moves by more than `tol`.
pub fn receptive_field_probe(model: &Model, cloud: &PointCloud, eps: f64, tol: f64, seed: u64) -> Result<ProbeReport> {
    if !(eps >= 0.0) || !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("probe eps {eps} and tol {tol} must be non-negative")));
    }
    let config = &model.config;
    let plan = BackbonePlan::build(cloud.positions(), config, seed)?;
    let (base, pairings) = run(model, cloud, &plan, None)?;
    let m = base.output.rows();
    let final_pairing = pairings.last().expect("validated config has stages").clone();
    let mut influential = vec![Vec::new(); m];
    let mut partner_influence = vec![Vec::new(); m];
    for q in 0..cloud.len() {
        let mut hit = vec![false; m];
        let mut shift_hit = vec![false; m];
        for axis in 0..3 {
            let mut pos = cloud.positions().to_vec();
            pos[q][axis] += eps;
            let moved = PointCloud::new(pos, cloud.features().clone())?;
            let (snap, _) = run(model, &moved, &plan, Some(&pairings))?;
            for i in 0..m {
                hit[i] |= row_changed(&snap.output, &base.output, i, tol);
                let f = final_pairing.0[i];
                shift_hit[i] |= snap.shifted.iter().zip(&base.shifted).any(|(a, b)| row_changed(a, b, f, tol));
            }
        }
        for i in 0..m {
            if hit[i] {
                influential[i].push(q);
            }
            if shift_hit[i] {
                partner_influence[i].push(q);
            }
        }
    }
    let positions = final_positions(cloud.positions(), &plan);
    let clusters: Vec<ClusterProbe> = (0..m)
        .map(|i| {
            let position = positions[i];
            let radius = influential[i]
                .iter()
                .map(|&q| sq_dist(&cloud.positions()[q], &position).sqrt())
                .fold(0.0, f64::max);
            ClusterProbe {
                position,
                influential: std::mem::take(&mut influential[i]),
                radius,
                partner: final_pairing.0[i],
                partner_shift_influence: std::mem::take(&mut partner_influence[i]),
            }
        })
        .collect();
    let mean_radius = clusters.iter().map(|c| c.radius).sum::<f64>() / m.max(1) as f64;
    let max_radius = clusters.iter().map(|c| c.radius).fold(0.0, f64::max);
    Ok(ProbeReport {
        exchange: config.stages.last().expect("validated config has stages").exchange,
        eps,
        tol,
        composed_reach: config.stages.iter().map(|s| s.max_radius()).sum(),
        clusters,
        mean_radius,
        max_radius,
    })
}

/// Input-space positions of the final-stage clusters.
pub fn final_positions(input: &[Point3], plan: &BackbonePlan) -> Vec<Point3> {
    let mut current = input.to_vec();
    for sp in &plan.stages {
        current = sp.clusters.iter().map(|&i| current[i]).collect();
    }
    current
}

/// Final-stage clusters whose partner is another cluster and whose
/// partner's shifted channels respond to some input point beyond the
/// cluster's own no-shift receptive radius.
pub fn qualifying_clusters(shift: &ProbeReport, no_shift: &ProbeReport, cloud: &PointCloud) -> Vec<usize> {
    (0..shift.clusters.len())
        .filter(|&i| {
            let c = &shift.clusters[i];
            let r = no_shift.clusters[i].radius;
            c.partner != i
                && c
                    .partner_shift_influence
                    .iter()
                    .any(|&q| sq_dist(&cloud.positions()[q], &c.position).sqrt() > r)
        })
        .collect()
}

/// The model with every stage's exchange set to `none`, sharing all
/// parameters the two layouts have in common.
pub fn no_shift_twin(model: &Model) -> Result<Model> {
    let mut config = model.config.clone();
    for s in &mut config.stages {
        s.exchange = ExchangeOp::None;
    }
    let mut twin = Model::new(config, 0)?;
    for k in 0..twin.store.len() {
        let id = crate::tensor::ParamId(k);
        let Some(src) = model.store.id(twin.store.name(id)) else {
            return Err(Error::InvalidArgument(format!("parameter {} missing from source model", twin.store.name(id))));
        };
        let value = model.store.value(src);
        if value.shape() != twin.store.value(id).shape() {
            return Err(Error::InvalidArgument(format!("parameter {} changes shape", twin.store.name(id))));
        }
        *twin.store.value_mut(id) = value.clone();
    }
    Ok(twin)
}
