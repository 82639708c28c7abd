//! Shift set abstraction.
//!
//! One layer samples cluster points with D-FPS, groups neighbours at several
//! radii, summarises each group with a shared MLP and a masked max, lets
//! every cluster exchange part of its features with one partner cluster, and
//! fuses the scales with an aggregation MLP:
//!
//! ```text
//! x_i^r = max_k F([x_k, p_k - p_i])
//! h_i^r = ReLU(avg(MLP([x_f^r[:s], x_i^r[s:]]), x_i^r))
//! h_i^a = A([h_i^1, ..., h_i^R])
//! ```
//!
//! The partner `f(i)` is picked once per layer and shared by all scales.

mod config;

pub use config::{ExchangeOp, ScaleConfig, Selection, SsaConfig, DEFAULT_SHIFT_RATIO};

use crate::error::{Error, Result};
use crate::geometry::{self, sq_dist, NeighborTable, Pairing, Point3, PointCloud};
use crate::rng;
use crate::tensor::{Graph, LinearParams, Matrix, MlpParams, ParamStore, Var};

/// Learnable pieces of the exchange operator for one scale.
#[derive(Debug, Clone, PartialEq)]
pub enum ExchangeParams {
    None,
    /// Two-layer MLP used by `cs`, `avg` (`C -> C -> C`) and `concat`
    /// (`2C -> C -> C`).
    Mlp(MlpParams),
    Attn {
        query: LinearParams,
        key: LinearParams,
        value: LinearParams,
    },
}

impl ExchangeParams {
    pub fn num_scalars(&self) -> usize {
        match self {
            ExchangeParams::None => 0,
            ExchangeParams::Mlp(m) => m.num_scalars(),
            ExchangeParams::Attn { query, key, value } => {
                query.num_scalars() + key.num_scalars() + value.num_scalars()
            }
        }
    }

    pub fn new(store: &mut ParamStore, prefix: &str, op: ExchangeOp, c: usize, seed: u64) -> Result<Self> {
        Ok(match op {
            ExchangeOp::None => ExchangeParams::None,
            ExchangeOp::Cs | ExchangeOp::Avg => {
                ExchangeParams::Mlp(store.add_mlp(&format!("{prefix}.shift"), c, &[c, c], false, seed)?)
            }
            ExchangeOp::Concat => ExchangeParams::Mlp(store.add_mlp(
                &format!("{prefix}.concat"),
                2 * c,
                &[c, c],
                false,
                seed,
            )?),
            ExchangeOp::Attn => ExchangeParams::Attn {
                query: store.add_linear(&format!("{prefix}.attn.q"), c, c, seed)?,
                key: store.add_linear(&format!("{prefix}.attn.k"), c, c, seed)?,
                value: store.add_linear(&format!("{prefix}.attn.v"), c, c, seed)?,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    /// Per-neighbour feature MLP.
    pub sa: MlpParams,
    pub exchange: ExchangeParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaParams {
    pub scales: Vec<ScaleParams>,
    pub agg: MlpParams,
}

impl SsaParams {
    /// Registers the layer's parameters under `prefix`. `c_in` is the parent
    /// feature width (relative coordinates are added on top).
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, config: &SsaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut scales = Vec::with_capacity(config.scales.len());
        for (r, sc) in config.scales.iter().enumerate() {
            let p = format!("{prefix}.scale{r}");
            let sa = store.add_mlp(&format!("{p}.sa"), c_in + 3, &sc.mlp, true, seed)?;
            let exchange = ExchangeParams::new(store, &p, config.exchange, sc.out_channels(), seed)?;
            scales.push(ScaleParams { sa, exchange });
        }
        let cat: usize = config.scales.iter().map(ScaleConfig::out_channels).sum();
        let agg = store.add_mlp(&format!("{prefix}.agg"), cat, &config.agg, true, seed)?;
        Ok(Self { scales, agg })
    }

    pub fn exchange_scalars(&self) -> usize {
        self.scales.iter().map(|s| s.exchange.num_scalars()).sum()
    }
}

/// Geometric decisions of one layer: sampled clusters, neighbour tables and
/// partner candidates. Depends only on parent positions and the seed, so it
/// can be frozen and replayed.
#[derive(Debug, Clone, PartialEq)]
pub struct SsaPlan {
    /// Cluster indices into the parent set.
    pub clusters: Vec<usize>,
    /// Per-scale grouping, indices into the parent set.
    pub groups: Vec<NeighborTable>,
    /// Partner candidates within `r_prime`, indices into the cluster set.
    pub partners: NeighborTable,
}

impl SsaPlan {
    pub fn build(parent: &[Point3], m_out: usize, config: &SsaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let clusters = geometry::dfps(parent, m_out, rng::derive(seed, &[0]))?;
        Self::with_clusters(parent, clusters, config, seed)
    }

    /// Plan for an explicit cluster choice.
    pub fn with_clusters(parent: &[Point3], clusters: Vec<usize>, config: &SsaConfig, seed: u64) -> Result<Self> {
        let groups = config
            .scales
            .iter()
            .enumerate()
            .map(|(r, sc)| {
                geometry::ball_query(parent, &clusters, sc.radius, sc.k, rng::derive(seed, &[1, r as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let centers: Vec<Point3> = clusters.iter().map(|&i| parent[i]).collect();
        let all: Vec<usize> = (0..centers.len()).collect();
        let partners = geometry::ball_query(
            &centers,
            &all,
            config.r_prime(),
            config.candidate_k(),
            rng::derive(seed, &[2]),
        )?;
        Ok(Self {
            clusters,
            groups,
            partners,
        })
    }
}

/// Relative coordinates `p_k - c_i` for every table slot, `(M*K) x 3`.
pub fn relative_coords(points: &[Point3], centers: &[Point3], table: &NeighborTable) -> Matrix {
    let k = table.k();
    let mut rel = Matrix::zeros(table.rows() * k, 3);
    for i in 0..table.rows() {
        let c = centers[i];
        for (slot, &j) in table.row(i).iter().enumerate() {
            let p = points[j];
            rel.row_mut(i * k + slot).copy_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    rel
}

/// Set feature abstraction on the graph: `max_k F([x_k, p_k - c_i])` over
/// the valid slots of each row of `table`.
pub fn set_abstraction(
    g: &mut Graph,
    points: &[Point3],
    features: Var,
    centers: &[Point3],
    table: &NeighborTable,
    mlp: &MlpParams,
) -> Result<Var> {
    if centers.len() != table.rows() {
        return Err(Error::ShapeMismatch {
            op: "set_abstraction",
            detail: format!("{} centers, {} table rows", centers.len(), table.rows()),
        });
    }
    let gathered = g.gather_rows(features, table.flat_indices())?;
    let rel = g.input(relative_coords(points, centers, table));
    let input = g.concat_cols(&[gathered, rel])?;
    let h = g.mlp(input, mlp)?;
    g.reduce_max(h, table.k(), table.flat_valid())
}

/// Convenience form of [`set_abstraction`] around cloud points.
pub fn set_feature_abstraction(
    parent: &PointCloud,
    clusters: &[usize],
    scale: &ScaleConfig,
    mlp: &MlpParams,
    store: &ParamStore,
    seed: u64,
) -> Result<Matrix> {
    let table = geometry::ball_query(parent.positions(), clusters, scale.radius, scale.k, seed)?;
    let centers: Vec<Point3> = clusters.iter().map(|&i| parent.positions()[i]).collect();
    let mut g = Graph::new(store);
    let f = g.input(parent.features().clone());
    let out = set_abstraction(&mut g, parent.positions(), f, &centers, &table, mlp)?;
    Ok(g.value(out).clone())
}

/// `[x_f[:s], x_i[s:]]` per row.
fn splice(g: &mut Graph, x: Var, pairing: &Pairing, s: usize) -> Result<Var> {
    let c = g.value(x).cols();
    let donor = g.gather_rows(x, &pairing.0)?;
    let head = g.slice_cols(donor, 0, s)?;
    let tail = g.slice_cols(x, s, c)?;
    g.concat_cols(&[head, tail])
}

fn check_pairing(g: &Graph, x: Var, pairing: &Pairing) -> Result<()> {
    if pairing.len() != g.value(x).rows() {
        return Err(Error::ShapeMismatch {
            op: "exchange",
            detail: format!("pairing of {} for {} clusters", pairing.len(), g.value(x).rows()),
        });
    }
    Ok(())
}

/// Cross-cluster shifting: `ReLU(avg(MLP([x_f[:s], x_i[s:]]), x_i))`.
pub fn cross_cluster_shift(g: &mut Graph, x: Var, pairing: &Pairing, s: usize, mlp: &MlpParams) -> Result<Var> {
    let c = g.value(x).cols();
    if s > c {
        return Err(Error::InvalidArgument(format!("shift channels {s} exceed width {c}")));
    }
    check_pairing(g, x, pairing)?;
    let spliced = splice(g, x, pairing, s)?;
    let mixed = g.mlp(spliced, mlp)?;
    let avg = g.avg2(mixed, x)?;
    Ok(g.relu(avg))
}

/// Applies the configured exchange operator for one scale.
pub fn exchange_variant(
    g: &mut Graph,
    x: Var,
    pairing: &Pairing,
    op: ExchangeOp,
    params: &ExchangeParams,
    s: usize,
) -> Result<Var> {
    let mismatch = || Error::InvalidArgument(format!("parameters do not match exchange op {op}"));
    match (op, params) {
        (ExchangeOp::None, _) => Ok(x),
        (ExchangeOp::Cs, ExchangeParams::Mlp(mlp)) => cross_cluster_shift(g, x, pairing, s, mlp),
        (ExchangeOp::Concat, ExchangeParams::Mlp(mlp)) => {
            check_pairing(g, x, pairing)?;
            let donor = g.gather_rows(x, &pairing.0)?;
            let cat = g.concat_cols(&[donor, x])?;
            let mixed = g.mlp(cat, mlp)?;
            let avg = g.avg2(mixed, x)?;
            Ok(g.relu(avg))
        }
        (ExchangeOp::Avg, ExchangeParams::Mlp(mlp)) => {
            check_pairing(g, x, pairing)?;
            let donor = g.gather_rows(x, &pairing.0)?;
            let mean = g.avg2(donor, x)?;
            let mixed = g.mlp(mean, mlp)?;
            let avg = g.avg2(mixed, x)?;
            Ok(g.relu(avg))
        }
        (ExchangeOp::Attn, ExchangeParams::Attn { query, key, value }) => {
            check_pairing(g, x, pairing)?;
            let c = g.value(x).cols();
            let donor = g.gather_rows(x, &pairing.0)?;
            let q = g.linear(x, query)?;
            let k = g.linear(donor, key)?;
            let v_self = g.linear(x, value)?;
            let v_partner = g.linear(donor, value)?;
            let logits = g.row_dot(q, k)?;
            let logits = g.scale(logits, 1.0 / (c.max(1) as f64).sqrt());
            let alpha = g.sigmoid(logits);
            let blended = g.blend(alpha, v_partner, v_self)?;
            let avg = g.avg2(blended, x)?;
            Ok(g.relu(avg))
        }
        _ => Err(mismatch()),
    }
}

/// Concatenates per-scale features in scale order and applies the
/// aggregation MLP.
pub fn aggregate_scales(g: &mut Graph, per_scale: &[Var], agg: &MlpParams) -> Result<Var> {
    let cat = g.concat_cols(per_scale)?;
    g.mlp(cat, agg)
}

/// Partner choice from a candidate table (anchor in slot 0).
///
/// `first_scale_features` and `first_scale_counts` are only read by the
/// feature-scale and point-count strategies.
pub fn select_pairing(
    positions: &[Point3],
    candidates: &NeighborTable,
    strategy: Selection,
    first_scale_features: Option<&Matrix>,
    first_scale_counts: Option<&[usize]>,
) -> Result<Pairing> {
    let need = |what: &str| Error::InvalidArgument(format!("{strategy} selection needs {what}"));
    Ok(match strategy {
        Selection::Farthest => geometry::select_partner(candidates, |i, j| sq_dist(&positions[i], &positions[j])),
        Selection::Nearest => {
            geometry::select_partner(candidates, |i, j| -sq_dist(&positions[i], &positions[j]))
        }
        Selection::FeatsScale => {
            let f = first_scale_features.ok_or_else(|| need("features"))?;
            let c = f.cols().max(1) as f64;
            geometry::select_partner(candidates, |_, j| f.row(j).iter().sum::<f64>() / c)
        }
        Selection::PointsNum => {
            let n = first_scale_counts.ok_or_else(|| need("neighbour counts"))?;
            geometry::select_partner(candidates, |_, j| n[j] as f64)
        }
    })
}

/// Standalone partner selection over a cluster set.
pub fn selection_variant(
    clusters: &PointCloud,
    strategy: Selection,
    r_prime: f64,
    k: usize,
    neighbor_counts: Option<&[usize]>,
    seed: u64,
) -> Result<Pairing> {
    let all: Vec<usize> = (0..clusters.len()).collect();
    let table = geometry::ball_query(clusters.positions(), &all, r_prime, k, seed)?;
    select_pairing(
        clusters.positions(),
        &table,
        strategy,
        Some(clusters.features()),
        neighbor_counts,
    )
}

/// Graph handles produced by one layer.
#[derive(Debug, Clone)]
pub struct SsaOutput {
    pub positions: Vec<Point3>,
    /// `x^r` per scale, before exchange.
    pub per_scale: Vec<Var>,
    /// `h^r` per scale, after exchange.
    pub exchanged: Vec<Var>,
    /// `h^a`.
    pub aggregated: Var,
    pub pairing: Pairing,
}

/// Runs one layer on the graph following `plan`. A `frozen_pairing`
/// overrides the partner selection.
pub fn ssa_layer(
    g: &mut Graph,
    parent: &[Point3],
    parent_features: Var,
    plan: &SsaPlan,
    config: &SsaConfig,
    params: &SsaParams,
    frozen_pairing: Option<&Pairing>,
) -> Result<SsaOutput> {
    let positions: Vec<Point3> = plan.clusters.iter().map(|&i| parent[i]).collect();
    let mut per_scale = Vec::with_capacity(config.scales.len());
    for (table, sp) in plan.groups.iter().zip(&params.scales) {
        per_scale.push(set_abstraction(g, parent, parent_features, &positions, table, &sp.sa)?);
    }
    let pairing = match frozen_pairing {
        Some(p) => p.clone(),
        None => {
            let counts: Vec<usize> = (0..plan.groups[0].rows()).map(|i| plan.groups[0].valid_count(i)).collect();
            select_pairing(
                &positions,
                &plan.partners,
                config.selection,
                Some(g.value(per_scale[0])),
                Some(&counts),
            )?
        }
    };
    let mut exchanged = Vec::with_capacity(per_scale.len());
    for (r, (&x, sp)) in per_scale.iter().zip(&params.scales).enumerate() {
        let s = config.shift_channels(config.scales[r].out_channels());
        exchanged.push(exchange_variant(g, x, &pairing, config.exchange, &sp.exchange, s)?);
    }
    let aggregated = aggregate_scales(g, &exchanged, &params.agg)?;
    Ok(SsaOutput {
        positions,
        per_scale,
        exchanged,
        aggregated,
        pairing,
    })
}

/// Cluster positions with per-scale and aggregated features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeatures {
    pub positions: Vec<Point3>,
    pub per_scale: Vec<Matrix>,
    pub aggregated: Matrix,
}

/// Samples `m_out` clusters from `parent` and runs one layer.
pub fn ssa_forward(
    parent: &PointCloud,
    m_out: usize,
    config: &SsaConfig,
    params: &SsaParams,
    store: &ParamStore,
    seed: u64,
) -> Result<(ClusterFeatures, Pairing)> {
    let plan = SsaPlan::build(parent.positions(), m_out, config, seed)?;
    let mut g = Graph::new(store);
    let f = g.input(parent.features().clone());
    let out = ssa_layer(&mut g, parent.positions(), f, &plan, config, params, None)?;
    let feats = ClusterFeatures {
        positions: out.positions,
        per_scale: out.exchanged.iter().map(|&v| g.value(v).clone()).collect(),
        aggregated: g.value(out.aggregated).clone(),
    };
    Ok((feats, out.pairing))
}
