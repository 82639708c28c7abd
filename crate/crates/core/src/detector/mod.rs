//! Toy single-stage detector: stacked shift set-abstraction stages, a vote
//! layer, candidate aggregation, a shared classification/regression head,
//! box decoding and 3D NMS.

mod boxes;
mod iou;

pub use boxes::{
    angle_bin, bin_width, decode_encoding, encode_box, normalize_yaw, Box3D, BoxEncoding, Detection,
    Object,
};
pub use iou::{bev_intersection, bev_rotated_iou, clip_convex, iou3d, nms3d, polygon_area};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, NeighborTable, Pairing, Point3, PointCloud};
use crate::rng;
use crate::ssa::{self, ClusterFeatures, ScaleConfig, SsaConfig, SsaOutput, SsaParams, SsaPlan};
use crate::tensor::{self, Graph, LinearParams, Matrix, MlpParams, ParamStore, Var};

/// Seed stream of the candidate grouping, apart from the per-stage streams.
const CANDIDATE_STREAM: u64 = 1 << 32;

/// Mean `(l, w, h)` of the two default object classes (ids 1 and 2).
pub const DEFAULT_CLASS_SIZES: [[f64; 3]; 2] = [[3.9, 1.6, 1.56], [4.8, 1.9, 2.0]];

/// Single-scale grouping around vote candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub radius: f64,
    pub k: usize,
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature channels (intensity).
    pub input_channels: usize,
    /// Clusters kept by each stage.
    pub stage_points: Vec<usize>,
    pub stages: Vec<SsaConfig>,
    /// Hidden widths of the vote MLP; a 3-wide offset layer follows.
    pub vote_mlp: Vec<usize>,
    pub candidate: CandidateConfig,
    /// Shared head widths before the output layer.
    pub head_mlp: Vec<usize>,
    /// Anchor size per foreground class; class `c` uses `anchors[c - 1]`.
    pub anchors: Vec<[f64; 3]>,
    pub angle_bins: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// A candidate is positive when its cluster lies in a GT box grown by
    /// this margin.
    pub positive_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |r: f64, w: &[usize], w2: &[usize], agg: usize| {
            SsaConfig::new(vec![ScaleConfig::new(r, 8, w), ScaleConfig::new(2.0 * r, 16, w2)], &[agg])
        };
        Self {
            input_channels: 1,
            stage_points: vec![512, 128, 64, 32],
            stages: vec![
                stage(0.4, &[16, 16], &[16, 32], 32),
                stage(0.8, &[32, 32], &[32, 32], 48),
                stage(1.6, &[48, 48], &[48, 48], 64),
                stage(2.4, &[64, 64], &[64, 64], 64),
            ],
            vote_mlp: vec![64],
            candidate: CandidateConfig {
                radius: 2.4,
                k: 16,
                mlp: vec![64, 64],
            },
            head_mlp: vec![64],
            anchors: DEFAULT_CLASS_SIZES.to_vec(),
            angle_bins: 12,
            nms_iou: 0.25,
            score_threshold: 0.3,
            positive_margin: 1.0,
        }
    }
}

impl ModelConfig {
    /// Two-stage variant with narrow layers, for fast experiments on
    /// clouds of at least 64 points.
    pub fn small() -> Self {
        let stage = |r: f64, w: &[usize], w2: &[usize], agg: usize| {
            SsaConfig::new(vec![ScaleConfig::new(r, 8, w), ScaleConfig::new(2.0 * r, 12, w2)], &[agg])
        };
        Self {
            stage_points: vec![64, 16],
            stages: vec![stage(0.8, &[8, 8], &[8, 16], 16), stage(1.6, &[16, 16], &[16, 16], 24)],
            vote_mlp: vec![16],
            candidate: CandidateConfig {
                radius: 2.4,
                k: 8,
                mlp: vec![16],
            },
            head_mlp: vec![16],
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.len()
    }

    /// Width of the packed head output:
    /// `[cls (classes+1) | center 3 | log-size 3 | bin logits | bin residuals]`.
    pub fn head_width(&self) -> usize {
        self.num_classes() + 1 + 6 + 2 * self.angle_bins
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stage_points.is_empty() || self.stage_points.len() != self.stages.len() {
            return bad(format!(
                "{} stage counts for {} stage configs",
                self.stage_points.len(),
                self.stages.len()
            ));
        }
        if self.stage_points.windows(2).any(|w| w[1] >= w[0]) || self.stage_points[0] == 0 {
            return bad(format!("stage counts must strictly decrease: {:?}", self.stage_points));
        }
        if self.angle_bins < 2 {
            return bad(format!("angle bins {} < 2", self.angle_bins));
        }
        if self.anchors.is_empty() || self.anchors.iter().flatten().any(|&s| !(s > 0.0)) {
            return bad("anchors must be non-empty and positive".into());
        }
        if !(self.candidate.radius > 0.0) || self.candidate.k == 0 || self.candidate.mlp.is_empty() {
            return bad("candidate grouping needs radius > 0, k > 0 and an mlp".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("nms and score thresholds must lie in [0, 1]".into());
        }
        if !(self.positive_margin >= 0.0) || self.input_channels == 0 {
            return bad("positive margin must be >= 0 and inputs non-empty".into());
        }
        self.stages.iter().try_for_each(SsaConfig::validate)
    }

    pub fn final_channels(&self) -> usize {
        self.stages.last().map_or(self.input_channels, SsaConfig::out_channels)
    }
}

/// Parameter handles of the whole detector.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub stages: Vec<SsaParams>,
    pub vote: MlpParams,
    pub candidate: MlpParams,
    pub head: MlpParams,
    pub out: LinearParams,
}

impl DetectorParams {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut c = config.input_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (t, sc) in config.stages.iter().enumerate() {
            stages.push(SsaParams::new(store, &format!("stage{t}"), c, sc, seed)?);
            c = sc.out_channels();
        }
        let mut vote_widths = config.vote_mlp.clone();
        vote_widths.push(3);
        let vote = store.add_mlp("vote", c, &vote_widths, false, seed)?;
        let candidate = store.add_mlp("candidate", c + 3, &config.candidate.mlp, true, seed)?;
        let cand_out = *config.candidate.mlp.last().expect("validated");
        let head = store.add_mlp("head", cand_out, &config.head_mlp, true, seed)?;
        let out = store.add_linear("out", head.c_out(), config.head_width(), seed)?;
        Ok(Self {
            stages,
            vote,
            candidate,
            head,
            out,
        })
    }
}

/// Configuration, parameter values and handles.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: DetectorParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = DetectorParams::new(&mut store, &config, seed)?;
        Ok(Self { config, store, params })
    }

    /// Binds loaded parameter values to the layout implied by `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        let expected: Vec<_> = fresh.store.entries().map(|(n, m)| (n.to_string(), m.shape())).collect();
        let found: Vec<_> = store.entries().map(|(n, m)| (n.to_string(), m.shape())).collect();
        if expected != found {
            return Err(Error::InvalidArgument(
                "parameter layout does not match the model config".into(),
            ));
        }
        Ok(Self { store, ..fresh })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model_config": self.config, "extra": extra });
        tensor::save_checkpoint(path, &self.store, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, header) = tensor::load_checkpoint(path)?;
        let config = header
            .meta
            .get("model_config")
            .cloned()
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: "checkpoint lacks a model config".into(),
            })?;
        Self::from_store(serde_json::from_value(config)?, store)
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Frozen sampling decisions of every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BackbonePlan {
    pub stages: Vec<SsaPlan>,
}

impl BackbonePlan {
    pub fn build(positions: &[Point3], config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut current = positions.to_vec();
        for (t, (sc, &m)) in config.stages.iter().zip(&config.stage_points).enumerate() {
            let plan = SsaPlan::build(&current, m, sc, rng::derive(seed, &[t as u64]))?;
            current = plan.clusters.iter().map(|&i| current[i]).collect();
            stages.push(plan);
        }
        Ok(Self { stages })
    }
}

/// Graph handles of one detector forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub stages: Vec<SsaOutput>,
    /// Final-stage cluster positions (vote seeds).
    pub clusters: Vec<Point3>,
    pub votes: Votes,
    pub candidate_table: NeighborTable,
    pub instance: Var,
    /// Packed head output, see [`ModelConfig::head_width`].
    pub head: Var,
}

/// Runs the stage stack on the graph. `frozen` replaces the pairing chosen
/// at each stage.
pub fn backbone_graph(
    g: &mut Graph,
    cloud: &PointCloud,
    config: &ModelConfig,
    params: &DetectorParams,
    plan: &BackbonePlan,
    frozen: Option<&[Pairing]>,
) -> Result<Vec<SsaOutput>> {
    if let Some(f) = frozen {
        if f.len() != plan.stages.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frozen pairings for {} stages",
                f.len(),
                plan.stages.len()
            )));
        }
    }
    let mut positions = cloud.positions().to_vec();
    let mut features = g.input(cloud.features().clone());
    let mut outs = Vec::with_capacity(plan.stages.len());
    for (t, sp) in plan.stages.iter().enumerate() {
        let out = ssa::ssa_layer(
            g,
            &positions,
            features,
            sp,
            &config.stages[t],
            &params.stages[t],
            frozen.map(|f| &f[t]),
        )?;
        positions = out.positions.clone();
        features = out.aggregated;
        outs.push(out);
    }
    Ok(outs)
}

/// Stage-by-stage cluster features of a cloud.
pub fn backbone_forward(cloud: &PointCloud, model: &Model, seed: u64) -> Result<Vec<ClusterFeatures>> {
    let first = model.config.stage_points[0];
    if cloud.len() < first {
        return Err(Error::InsufficientPoints {
            requested: first,
            available: cloud.len(),
        });
    }
    let plan = BackbonePlan::build(cloud.positions(), &model.config, seed)?;
    let mut g = Graph::new(&model.store);
    let outs = backbone_graph(&mut g, cloud, &model.config, &model.params, &plan, None)?;
    Ok(outs
        .into_iter()
        .map(|o| ClusterFeatures {
            per_scale: o.exchanged.iter().map(|&v| g.value(v).clone()).collect(),
            aggregated: g.value(o.aggregated).clone(),
            positions: o.positions,
        })
        .collect())
}

/// Vote layer output.
#[derive(Debug, Clone)]
pub struct Votes {
    pub offsets: Var,
    /// Cluster positions plus offsets, differentiable.
    pub candidates: Var,
    /// Values of `candidates`.
    pub positions: Vec<Point3>,
}

fn points_matrix(points: &[Point3]) -> Matrix {
    Matrix::from_vec(points.len(), 3, points.iter().flatten().copied().collect()).expect("n x 3")
}

/// Per-cluster offsets and the resulting candidate positions.
pub fn vote_layer(g: &mut Graph, features: Var, clusters: &[Point3], vote: &MlpParams) -> Result<Votes> {
    let offsets = g.mlp(features, vote)?;
    let base = g.input(points_matrix(clusters));
    let candidates = g.add(base, offsets)?;
    let c = g.value(candidates);
    let positions = (0..c.rows()).map(|i| [c[(i, 0)], c[(i, 1)], c[(i, 2)]]).collect();
    Ok(Votes {
        offsets,
        candidates,
        positions,
    })
}

/// Plain set abstraction centered at the candidates over the final clusters.
/// Relative coordinates stay differentiable in the candidate positions.
pub fn candidate_aggregation(
    g: &mut Graph,
    candidates: Var,
    points: &[Point3],
    features: Var,
    config: &CandidateConfig,
    mlp: &MlpParams,
    seed: u64,
) -> Result<(Var, NeighborTable)> {
    if !(config.radius > 0.0) {
        return Err(Error::InvalidArgument(format!("candidate radius {}", config.radius)));
    }
    let c = g.value(candidates);
    if c.cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "candidate_aggregation",
            detail: format!("candidates have {} columns", c.cols()),
        });
    }
    let centers: Vec<Point3> = (0..c.rows()).map(|i| [c[(i, 0)], c[(i, 1)], c[(i, 2)]]).collect();
    let table = geometry::ball_query_at(points, &centers, config.radius, config.k, seed)?;
    let gathered = g.gather_rows(features, table.flat_indices())?;
    let abs: Vec<Point3> = table.flat_indices().iter().map(|&j| points[j]).collect();
    let abs = g.input(points_matrix(&abs));
    let owner: Vec<usize> = (0..table.rows()).flat_map(|i| std::iter::repeat_n(i, table.k())).collect();
    let repeated = g.gather_rows(candidates, &owner)?;
    let neg = g.scale(repeated, -1.0);
    let rel = g.add(abs, neg)?;
    let input = g.concat_cols(&[gathered, rel])?;
    let h = g.mlp(input, mlp)?;
    let v = g.reduce_max(h, table.k(), table.flat_valid())?;
    Ok((v, table))
}

/// Shared head followed by the packed output layer.
pub fn heads(g: &mut Graph, instance: Var, params: &DetectorParams) -> Result<Var> {
    let h = g.mlp(instance, &params.head)?;
    g.linear(h, &params.out)
}

/// Full forward pass on the graph.
pub fn forward_graph(
    g: &mut Graph,
    cloud: &PointCloud,
    model: &Model,
    plan: &BackbonePlan,
    frozen: Option<&[Pairing]>,
    seed: u64,
) -> Result<ForwardPass> {
    let (config, params) = (&model.config, &model.params);
    let stages = backbone_graph(g, cloud, config, params, plan, frozen)?;
    let last = stages.last().expect("validated config has stages");
    let clusters = last.positions.clone();
    let votes = vote_layer(g, last.aggregated, &clusters, &params.vote)?;
    let (instance, candidate_table) = candidate_aggregation(
        g,
        votes.candidates,
        &clusters,
        last.aggregated,
        &config.candidate,
        &params.candidate,
        rng::derive(seed, &[CANDIDATE_STREAM]),
    )?;
    let head = heads(g, instance, params)?;
    Ok(ForwardPass {
        stages,
        clusters,
        votes,
        candidate_table,
        instance,
        head,
    })
}

/// Head output split per field.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    pub cls_logits: Matrix,
    pub center_res: Matrix,
    pub size_res: Matrix,
    pub bin_logits: Matrix,
    pub angle_res: Matrix,
}

/// Column ranges of the packed head output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub classes: usize,
    pub bins: usize,
}

impl HeadLayout {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            classes: config.num_classes(),
            bins: config.angle_bins,
        }
    }
    pub fn cls(&self) -> std::ops::Range<usize> {
        0..self.classes + 1
    }
    pub fn center(&self) -> std::ops::Range<usize> {
        let s = self.classes + 1;
        s..s + 3
    }
    pub fn size(&self) -> std::ops::Range<usize> {
        let s = self.classes + 4;
        s..s + 3
    }
    pub fn bin(&self) -> std::ops::Range<usize> {
        let s = self.classes + 7;
        s..s + self.bins
    }
    pub fn res(&self) -> std::ops::Range<usize> {
        let s = self.classes + 7 + self.bins;
        s..s + self.bins
    }
    pub fn width(&self) -> usize {
        self.classes + 7 + 2 * self.bins
    }
}

fn cols(m: &Matrix, r: std::ops::Range<usize>) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), r.len());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[r.clone()]);
    }
    out
}

impl RawPrediction {
    pub fn from_head(head: &Matrix, layout: HeadLayout) -> Result<Self> {
        if head.cols() != layout.width() {
            return Err(Error::ShapeMismatch {
                op: "RawPrediction::from_head",
                detail: format!("{} columns, expected {}", head.cols(), layout.width()),
            });
        }
        Ok(Self {
            cls_logits: cols(head, layout.cls()),
            center_res: cols(head, layout.center()),
            size_res: cols(head, layout.size()),
            bin_logits: cols(head, layout.bin()),
            angle_res: cols(head, layout.res()),
        })
    }

    pub fn len(&self) -> usize {
        self.cls_logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        [&self.cls_logits, &self.center_res, &self.size_res, &self.bin_logits, &self.angle_res]
            .iter()
            .all(|m| m.is_finite())
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Best foreground class (id >= 1) and its softmax probability per candidate.
pub fn class_scores(raw: &RawPrediction) -> Vec<(usize, f64)> {
    (0..raw.len())
        .map(|i| {
            let p = softmax(raw.cls_logits.row(i));
            let c = 1 + argmax(&p[1..]);
            (c, p[c])
        })
        .collect()
}

/// Decodes every candidate with the anchor of its predicted class.
pub fn decode_boxes(raw: &RawPrediction, candidates: &[Point3], config: &ModelConfig) -> Result<Vec<Box3D>> {
    if !raw.is_finite() {
        return Err(Error::NonFinite("raw prediction".into()));
    }
    if candidates.len() != raw.len() {
        return Err(Error::ShapeMismatch {
            op: "decode_boxes",
            detail: format!("{} candidates for {} predictions", candidates.len(), raw.len()),
        });
    }
    class_scores(raw)
        .into_iter()
        .enumerate()
        .map(|(i, (c, _))| {
            let bin = argmax(raw.bin_logits.row(i));
            let enc = BoxEncoding {
                center_res: [0, 1, 2].map(|d| raw.center_res[(i, d)]),
                size_res: [0, 1, 2].map(|d| raw.size_res[(i, d)]),
                bin,
                angle_res: raw.angle_res[(i, bin)],
            };
            decode_encoding(&enc, &candidates[i], &config.anchors[c - 1], config.angle_bins)
        })
        .collect()
}

/// Runs the model on a plan and returns the decoded, thresholded and
/// suppressed detections.
pub fn detect_with_plan(cloud: &PointCloud, model: &Model, plan: &BackbonePlan, seed: u64) -> Result<Vec<Detection>> {
    let mut g = Graph::new(&model.store);
    let pass = forward_graph(&mut g, cloud, model, plan, None, seed)?;
    let raw = RawPrediction::from_head(g.value(pass.head), HeadLayout::of(&model.config))?;
    let boxes = decode_boxes(&raw, &pass.votes.positions, &model.config)?;
    let dets: Vec<Detection> = class_scores(&raw)
        .into_iter()
        .zip(boxes)
        .filter(|((_, s), _)| *s >= model.config.score_threshold)
        .map(|((class_id, score), bbox)| Detection { bbox, class_id, score })
        .collect();
    nms3d(&dets, model.config.nms_iou)
}

pub fn detect(cloud: &PointCloud, model: &Model, seed: u64) -> Result<Vec<Detection>> {
    let plan = BackbonePlan::build(cloud.positions(), &model.config, seed)?;
    detect_with_plan(cloud, model, &plan, seed)
}
