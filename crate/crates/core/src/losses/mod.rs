//! Training objective: vote offsets, classification and the box terms
//! (location, size, angle, corners), with target assignment. Every term
//! returns its value together with the gradient with respect to the raw
//! network outputs, which then seeds the graph's backward pass.

use serde::{Deserialize, Serialize};

use crate::detector::{
    angle_bin, bin_width, encode_box, forward_graph, softmax, BackbonePlan, Box3D, HeadLayout, Model, ModelConfig,
    Object, RawPrediction,
};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::tensor::{Graph, Matrix, ParamGrads, ParamStore};

/// Component losses and their weighted total (all weights are 1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub offset: f64,
    pub cls: f64,
    pub loc: f64,
    pub size: f64,
    pub angle: f64,
    pub corner: f64,
    pub total: f64,
}

pub const LAMBDA: [f64; 3] = [1.0, 1.0, 1.0];
pub const DELTA: [f64; 4] = [1.0, 1.0, 1.0, 1.0];

/// Assembles a breakdown with `total = l1*offset + l2*cls + l3*(d1*loc +
/// d2*size + d3*angle + d4*corner)`.
pub fn total_loss(offset: f64, cls: f64, boxes: BoxLoss) -> LossBreakdown {
    let b = DELTA[0] * boxes.loc + DELTA[1] * boxes.size + DELTA[2] * boxes.angle + DELTA[3] * boxes.corner;
    LossBreakdown {
        offset,
        cls,
        loc: boxes.loc,
        size: boxes.size,
        angle: boxes.angle,
        corner: boxes.corner,
        total: LAMBDA[0] * offset + LAMBDA[1] * cls + LAMBDA[2] * b,
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.offset, self.cls, self.loc, self.size, self.angle, self.corner, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-element smooth-L1, averaged over the elements.
pub fn smooth_l1(x: &[f64], beta: f64) -> f64 {
    assert!(beta > 0.0, "smooth_l1 beta must be positive");
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| smooth_l1_scalar(v, beta)).sum::<f64>() / x.len() as f64
}

/// Gradient of [`smooth_l1`].
pub fn smooth_l1_grad(x: &[f64], beta: f64) -> Vec<f64> {
    let n = x.len() as f64;
    x.iter().map(|&v| smooth_l1_slope(v, beta) / n).collect()
}

fn smooth_l1_scalar(v: f64, beta: f64) -> f64 {
    if v.abs() < beta {
        0.5 * v * v / beta
    } else {
        v.abs() - 0.5 * beta
    }
}

fn smooth_l1_slope(v: f64, beta: f64) -> f64 {
    if v.abs() < beta {
        v / beta
    } else {
        v.signum()
    }
}

/// Softmax cross-entropy of one row and its gradient.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[target].max(f64::MIN_POSITIVE).ln();
    p[target] -= 1.0;
    (loss, p)
}

const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

fn corners_raw(center: &Point3, size: &[f64; 3], yaw: f64) -> [[f64; 3]; 8] {
    let (s, c) = yaw.sin_cos();
    CORNER_SIGNS.map(|sg| {
        let (lx, ly) = (sg[0] * size[0] / 2.0, sg[1] * size[1] / 2.0);
        [
            center[0] + c * lx - s * ly,
            center[1] + s * lx + c * ly,
            center[2] + sg[2] * size[2] / 2.0,
        ]
    })
}

/// Eight corners: bottom face then top face, each counterclockwise in BEV
/// starting from `(+l/2, +w/2)` in the box frame.
pub fn corners_from_box(b: &Box3D) -> [[f64; 3]; 8] {
    corners_raw(&b.center, &b.size, b.yaw)
}

/// Mean over corners of the per-coordinate smooth-L1 sum, and its gradient
/// with respect to the predicted corners.
fn corner_distance(pred: &[[f64; 3]; 8], gt: &[[f64; 3]; 8]) -> (f64, [[f64; 3]; 8]) {
    let mut d = 0.0;
    let mut grad = [[0.0; 3]; 8];
    for k in 0..8 {
        for a in 0..3 {
            let diff = pred[k][a] - gt[k][a];
            d += smooth_l1_scalar(diff, 1.0) / 8.0;
            grad[k][a] = smooth_l1_slope(diff, 1.0) / 8.0;
        }
    }
    (d, grad)
}

/// Corner loss of one prediction, minimised over the GT yaw flip.
pub fn corner_loss(pred: &Box3D, gt: &Box3D) -> f64 {
    let p = corners_raw(&pred.center, &pred.size, pred.yaw);
    let a = corner_distance(&p, &corners_from_box(gt)).0;
    let b = corner_distance(&p, &corners_raw(&gt.center, &gt.size, gt.yaw + std::f64::consts::PI)).0;
    a.min(b)
}

/// Assignment of one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub positive: bool,
    /// 0 for negatives.
    pub class_id: usize,
    /// Index of the assigned object.
    pub object: Option<usize>,
    /// GT center minus cluster position, zero for negatives.
    pub vote_offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Vec<Target>,
}

impl TargetSet {
    /// A candidate is positive when its cluster lies inside an object box
    /// grown by `margin`; overlapping matches go to the nearest center.
    pub fn assign(clusters: &[Point3], objects: &[Object], margin: f64) -> Self {
        let targets = clusters
            .iter()
            .map(|p| {
                let hit = objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.bbox.contains(p, margin))
                    .min_by(|(_, a), (_, b)| {
                        crate::geometry::sq_dist(p, &a.bbox.center).total_cmp(&crate::geometry::sq_dist(p, &b.bbox.center))
                    });
                match hit {
                    Some((j, o)) => Target {
                        positive: true,
                        class_id: o.class_id,
                        object: Some(j),
                        vote_offset: [0, 1, 2].map(|d| o.bbox.center[d] - p[d]),
                    },
                    None => Target {
                        positive: false,
                        class_id: 0,
                        object: None,
                        vote_offset: [0.0; 3],
                    },
                }
            })
            .collect();
        Self { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.targets.iter().filter(|t| t.positive).count()
    }
}

/// Smooth-L1 between offsets and vote targets, averaged over positives.
pub fn offset_loss(offsets: &Matrix, targets: &TargetSet) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(offsets.rows(), 3);
    let p = targets.num_positive();
    if p == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (i, t) in targets.targets.iter().enumerate().filter(|(_, t)| t.positive) {
        let diff: Vec<f64> = (0..3).map(|d| offsets[(i, d)] - t.vote_offset[d]).collect();
        loss += smooth_l1(&diff, 1.0) / p as f64;
        for (d, g) in smooth_l1_grad(&diff, 1.0).into_iter().enumerate() {
            grad[(i, d)] = g / p as f64;
        }
    }
    (loss, grad)
}

/// Mean softmax cross-entropy over all candidates, background included.
pub fn cls_loss(logits: &Matrix, targets: &TargetSet) -> (f64, Matrix) {
    let m = logits.rows();
    let mut grad = Matrix::zeros(m, logits.cols());
    if m == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (i, t) in targets.targets.iter().enumerate() {
        let (l, g) = cross_entropy(logits.row(i), t.class_id);
        loss += l / m as f64;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / m as f64;
        }
    }
    (loss, grad)
}

/// Box-term values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoxLoss {
    pub loc: f64,
    pub size: f64,
    pub angle: f64,
    pub corner: f64,
}

/// Gradients with respect to each [`RawPrediction`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrads {
    pub cls_logits: Matrix,
    pub center_res: Matrix,
    pub size_res: Matrix,
    pub bin_logits: Matrix,
    pub angle_res: Matrix,
}

impl RawGrads {
    fn zeros_like(raw: &RawPrediction) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            cls_logits: z(&raw.cls_logits),
            center_res: z(&raw.center_res),
            size_res: z(&raw.size_res),
            bin_logits: z(&raw.bin_logits),
            angle_res: z(&raw.angle_res),
        }
    }

    /// Packs the fields back into the head's column layout.
    pub fn pack(&self, layout: HeadLayout) -> Matrix {
        let m = self.cls_logits.rows();
        let mut out = Matrix::zeros(m, layout.width());
        let parts = [
            (&self.cls_logits, layout.cls()),
            (&self.center_res, layout.center()),
            (&self.size_res, layout.size()),
            (&self.bin_logits, layout.bin()),
            (&self.angle_res, layout.res()),
        ];
        for i in 0..m {
            for (src, range) in &parts {
                out.row_mut(i)[range.clone()].copy_from_slice(src.row(i));
            }
        }
        out
    }
}

/// Location, size, angle and corner losses over positives, with gradients.
pub fn box_loss(
    raw: &RawPrediction,
    candidates: &[Point3],
    targets: &TargetSet,
    objects: &[Object],
    config: &ModelConfig,
) -> (BoxLoss, RawGrads) {
    let mut grads = RawGrads::zeros_like(raw);
    let p = targets.num_positive();
    let mut out = BoxLoss::default();
    if p == 0 {
        return (out, grads);
    }
    let inv = 1.0 / p as f64;
    let bins = config.angle_bins;
    let half = bin_width(bins) / 2.0;
    for (i, t) in targets.targets.iter().enumerate() {
        let Some(j) = t.object.filter(|_| t.positive) else { continue };
        let gt = &objects[j].bbox;
        let anchor = config.anchors[t.class_id - 1];
        let enc = encode_box(gt, &candidates[i], &anchor, bins);

        let d_loc: Vec<f64> = (0..3).map(|d| raw.center_res[(i, d)] - enc.center_res[d]).collect();
        out.loc += smooth_l1(&d_loc, 1.0) * inv;
        for (d, g) in smooth_l1_grad(&d_loc, 1.0).into_iter().enumerate() {
            grads.center_res[(i, d)] += g * inv;
        }

        let d_size: Vec<f64> = (0..3).map(|d| raw.size_res[(i, d)] - enc.size_res[d]).collect();
        out.size += smooth_l1(&d_size, 1.0) * inv;
        for (d, g) in smooth_l1_grad(&d_size, 1.0).into_iter().enumerate() {
            grads.size_res[(i, d)] += g * inv;
        }

        let b = angle_bin(gt.yaw, bins);
        let (ce, ce_grad) = cross_entropy(raw.bin_logits.row(i), b);
        let d_res = raw.angle_res[(i, b)] - enc.angle_res;
        out.angle += (ce + smooth_l1_scalar(d_res, 1.0)) * inv;
        for (dst, v) in grads.bin_logits.row_mut(i).iter_mut().zip(ce_grad) {
            *dst += v * inv;
        }
        grads.angle_res[(i, b)] += smooth_l1_slope(d_res, 1.0) * inv;

        // corners of the prediction decoded with the GT class and bin
        let center: Point3 = [0, 1, 2].map(|d| candidates[i][d] + raw.center_res[(i, d)]);
        let size: [f64; 3] = [0, 1, 2].map(|d| anchor[d] * raw.size_res[(i, d)].exp());
        let yaw = b as f64 * 2.0 * half + raw.angle_res[(i, b)] * half;
        let pred = corners_raw(&center, &size, yaw);
        let (da, ga) = corner_distance(&pred, &corners_from_box(gt));
        let (db, gb) = corner_distance(&pred, &corners_raw(&gt.center, &gt.size, gt.yaw + std::f64::consts::PI));
        let (dist, gc) = if da <= db { (da, ga) } else { (db, gb) };
        out.corner += dist * inv;
        let (s, c) = yaw.sin_cos();
        for (k, sg) in CORNER_SIGNS.iter().enumerate() {
            let g = gc[k].map(|v| v * inv);
            let (lx, ly) = (sg[0] * size[0] / 2.0, sg[1] * size[1] / 2.0);
            for d in 0..3 {
                grads.center_res[(i, d)] += g[d];
            }
            let dl = g[0] * c * sg[0] / 2.0 + g[1] * s * sg[0] / 2.0;
            let dw = -g[0] * s * sg[1] / 2.0 + g[1] * c * sg[1] / 2.0;
            let dh = g[2] * sg[2] / 2.0;
            grads.size_res[(i, 0)] += dl * size[0];
            grads.size_res[(i, 1)] += dw * size[1];
            grads.size_res[(i, 2)] += dh * size[2];
            let dyaw = g[0] * (-s * lx - c * ly) + g[1] * (c * lx - s * ly);
            grads.angle_res[(i, b)] += dyaw * half;
        }
    }
    (out, grads)
}

/// Loss of one forward pass and the gradients of its two output handles.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub breakdown: LossBreakdown,
    pub offsets_grad: Matrix,
    /// Gradient with respect to the candidate positions.
    pub candidates_grad: Matrix,
    pub head_grad: Matrix,
    pub num_positive: usize,
}

pub fn detection_loss(
    head: &Matrix,
    offsets: &Matrix,
    clusters: &[Point3],
    candidates: &[Point3],
    objects: &[Object],
    config: &ModelConfig,
) -> Result<DetectionLoss> {
    let layout = HeadLayout::of(config);
    let raw = RawPrediction::from_head(head, layout)?;
    if let Some(o) = objects.iter().find(|o| o.class_id == 0 || o.class_id > config.num_classes()) {
        return Err(Error::InvalidArgument(format!("object class {} outside 1..={}", o.class_id, config.num_classes())));
    }
    let targets = TargetSet::assign(clusters, objects, config.positive_margin);
    let (off, offsets_grad) = offset_loss(offsets, &targets);
    let (cls, cls_grad) = cls_loss(&raw.cls_logits, &targets);
    let (boxes, mut grads) = box_loss(&raw, candidates, &targets, objects, config);
    grads.cls_logits = cls_grad;
    // predicted centers are candidate + residual
    let candidates_grad = grads.center_res.clone();
    Ok(DetectionLoss {
        breakdown: total_loss(off, cls, boxes),
        offsets_grad,
        candidates_grad,
        head_grad: grads.pack(layout),
        num_positive: targets.num_positive(),
    })
}

/// Forward, loss and backward for one scene under a frozen plan.
pub fn scene_loss_and_grads(
    model: &Model,
    cloud: &PointCloud,
    objects: &[Object],
    plan: &BackbonePlan,
    seed: u64,
) -> Result<(DetectionLoss, ParamGrads)> {
    scene_loss_with_store(&model.store, model, cloud, objects, plan, seed)
}

/// As [`scene_loss_and_grads`] with parameter values taken from `store`,
/// which must share the model's layout.
pub fn scene_loss_with_store(
    store: &ParamStore,
    model: &Model,
    cloud: &PointCloud,
    objects: &[Object],
    plan: &BackbonePlan,
    seed: u64,
) -> Result<(DetectionLoss, ParamGrads)> {
    let mut g = Graph::new(store);
    let pass = forward_graph(&mut g, cloud, model, plan, None, seed)?;
    let loss = detection_loss(
        g.value(pass.head),
        g.value(pass.votes.offsets),
        &pass.clusters,
        &pass.votes.positions,
        objects,
        &model.config,
    )?;
    let back = g.backward(&[
        (pass.votes.offsets, loss.offsets_grad.clone()),
        (pass.votes.candidates, loss.candidates_grad.clone()),
        (pass.head, loss.head_grad.clone()),
    ])?;
    Ok((loss, back.params))
}
