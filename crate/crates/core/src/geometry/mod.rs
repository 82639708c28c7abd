//! Spatial kernels: distances, distance-based farthest point sampling, ball
//! query and farthest-neighbour pairing.
//!
//! Distances are compared squared. Every tie is broken towards the smallest
//! index, and every random draw is seeded per row, so results depend only on
//! `(inputs, seed)`.

mod grid;

pub use grid::GridIndex;
pub(crate) use grid::sq_dist;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

/// Position in meters.
pub type Point3 = [f64; 3];

/// Positions plus an `N x C` feature matrix (`C` may be zero).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3>,
    features: Matrix,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>, features: Matrix) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("point cloud must not be empty".into()));
        }
        if features.rows() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "PointCloud::new",
                detail: format!("{} positions, {} feature rows", positions.len(), features.rows()),
            });
        }
        if !positions.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("point position".into()));
        }
        Ok(Self {
            positions,
            features,
        })
    }

    /// Cloud without feature channels.
    pub fn from_positions(positions: Vec<Point3>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, Matrix::zeros(n, 0))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Sub-cloud in the given index order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.len(),
            });
        }
        Self::new(
            idx.iter().map(|&i| self.positions[i]).collect(),
            self.features.select_rows(idx),
        )
    }
}

/// Fixed-width neighbour rows. Slot 0 holds the row's anchor point; padding
/// slots duplicate slot 0 and are flagged invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    indices: Vec<usize>,
    valid: Vec<bool>,
    k: usize,
    radius: f64,
}

impl NeighborTable {
    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_row(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }

    pub fn valid_count(&self, i: usize) -> usize {
        self.valid_row(i).iter().filter(|&&v| v).count()
    }

    /// Valid entries of row `i`, in slot order.
    pub fn valid_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i)
            .iter()
            .zip(self.valid_row(i))
            .filter(|(_, &v)| v)
            .map(|(&j, _)| j)
    }

    /// Flat `M * K` index list (row-major).
    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn flat_valid(&self) -> &[bool] {
        &self.valid
    }

    /// Same table with every index passed through `map`.
    pub fn remap(&self, map: impl Fn(usize) -> usize) -> Self {
        Self {
            indices: self.indices.iter().map(|&i| map(i)).collect(),
            ..self.clone()
        }
    }
}

/// Per-cluster partner index into the cluster set; `pairing[i] == i` means
/// the cluster is paired with itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing(pub Vec<usize>);

impl Pairing {
    pub fn identity(m: usize) -> Self {
        Self((0..m).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn non_self_count(&self) -> usize {
        self.0.iter().enumerate().filter(|&(i, &f)| i != f).count()
    }
}

/// `out[i][j] = |a_i - b_j|^2`.
pub fn pairwise_sq_dist(a: &[Point3], b: &[Point3]) -> Matrix {
    let mut out = Matrix::zeros(a.len(), b.len());
    for (i, p) in a.iter().enumerate() {
        for (o, q) in out.row_mut(i).iter_mut().zip(b) {
            *o = sq_dist(p, q);
        }
    }
    out
}

/// Distance-based farthest point sampling. The first index is a seeded
/// uniform draw; each later index maximises the minimum squared distance to
/// the points already chosen.
pub fn dfps(points: &[Point3], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::EmptyRequest);
    }
    if m > points.len() {
        return Err(Error::InsufficientPoints {
            requested: m,
            available: points.len(),
        });
    }
    let n = points.len();
    let first = rand::Rng::gen_range(&mut rng::rng(seed), 0..n);
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = first;
    loop {
        selected.push(cur);
        taken[cur] = true;
        if selected.len() == m {
            break;
        }
        let c = points[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (j, p) in points.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d = sq_dist(p, &c);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if min_d[j] > best_d {
                best_d = min_d[j];
                best = j;
            }
        }
        cur = best;
    }
    Ok(selected)
}

fn check_query(radius: f64, k: usize) -> Result<()> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidArgument(format!("ball radius must be positive, got {radius}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("ball query needs k >= 1".into()));
    }
    Ok(())
}

/// Fills one table row from an anchor and its in-radius candidates (anchor
/// excluded), sampling `k - 1` of them without replacement when there are
/// more.
fn fill_row(out: &mut NeighborTable, anchor: usize, mut others: Vec<usize>, row_seed: u64) {
    let k = out.k;
    if others.len() > k - 1 {
        let mut r = rng::rng(row_seed);
        let mut pick: Vec<usize> = index::sample(&mut r, others.len(), k - 1)
            .into_iter()
            .map(|i| others[i])
            .collect();
        pick.sort_unstable();
        others = pick;
    }
    out.indices.push(anchor);
    out.valid.push(true);
    for &j in &others {
        out.indices.push(j);
        out.valid.push(true);
    }
    for _ in others.len() + 1..k {
        out.indices.push(anchor);
        out.valid.push(false);
    }
}

/// Ball query around points of the cloud itself: row `i` is anchored at
/// `centers[i]` (slot 0) followed by up to `k - 1` sampled in-radius points.
pub fn ball_query(
    points: &[Point3],
    centers: &[usize],
    radius: f64,
    k: usize,
    seed: u64,
) -> Result<NeighborTable> {
    check_query(radius, k)?;
    if let Some(&bad) = centers.iter().find(|&&c| c >= points.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: points.len(),
        });
    }
    let grid = GridIndex::build(points, radius);
    ball_query_with_grid(points, &grid, centers, radius, k, seed)
}

pub fn ball_query_with_grid(
    points: &[Point3],
    grid: &GridIndex,
    centers: &[usize],
    radius: f64,
    k: usize,
    seed: u64,
) -> Result<NeighborTable> {
    check_query(radius, k)?;
    let mut table = NeighborTable {
        indices: Vec::with_capacity(centers.len() * k),
        valid: Vec::with_capacity(centers.len() * k),
        k,
        radius,
    };
    let mut buf = Vec::new();
    for (row, &c) in centers.iter().enumerate() {
        grid.query_radius_into(points, &points[c], radius, &mut buf);
        let others: Vec<usize> = buf.iter().copied().filter(|&j| j != c).collect();
        fill_row(&mut table, c, others, rng::derive(seed, &[row as u64]));
    }
    Ok(table)
}

/// Ball query around free positions. Slot 0 is the in-radius point nearest
/// the center; when the ball is empty the nearest point of the whole cloud is
/// used so every row has one valid entry.
pub fn ball_query_at(
    points: &[Point3],
    centers: &[Point3],
    radius: f64,
    k: usize,
    seed: u64,
) -> Result<NeighborTable> {
    check_query(radius, k)?;
    let grid = GridIndex::build(points, radius);
    let mut table = NeighborTable {
        indices: Vec::with_capacity(centers.len() * k),
        valid: Vec::with_capacity(centers.len() * k),
        k,
        radius,
    };
    let mut buf = Vec::new();
    for (row, c) in centers.iter().enumerate() {
        grid.query_radius_into(points, c, radius, &mut buf);
        let anchor = nearest(points, &buf, c);
        let others: Vec<usize> = buf.iter().copied().filter(|&j| j != anchor).collect();
        fill_row(&mut table, anchor, others, rng::derive(seed, &[row as u64]));
    }
    Ok(table)
}

/// Nearest point to `c` among `pool` (the whole cloud when `pool` is empty).
fn nearest(points: &[Point3], pool: &[usize], c: &Point3) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    let mut visit = |j: usize| {
        let d = sq_dist(&points[j], c);
        if d < best.0 {
            best = (d, j);
        }
    };
    if pool.is_empty() {
        (0..points.len()).for_each(&mut visit);
    } else {
        pool.iter().copied().for_each(&mut visit);
    }
    best.1
}

/// Picks one candidate per row of `table` by maximising `score(row, cand)`
/// over valid non-anchor entries (ties to the smaller index); rows with no
/// such entry pair with themselves.
pub fn select_partner(table: &NeighborTable, mut score: impl FnMut(usize, usize) -> f64) -> Pairing {
    let mut out = Vec::with_capacity(table.rows());
    for i in 0..table.rows() {
        let anchor = table.row(i)[0];
        let mut best: Option<(f64, usize)> = None;
        for j in table.valid_indices(i).skip(1) {
            let s = score(i, j);
            best = match best {
                Some((bs, bj)) if bs > s || (bs == s && bj < j) => Some((bs, bj)),
                _ => Some((s, j)),
            };
        }
        out.push(best.map_or(anchor, |(_, j)| j));
    }
    Pairing(out)
}

/// For every cluster, samples `k` candidates within `r_prime` (ball-query
/// semantics, self in slot 0) and pairs it with the farthest one.
pub fn farthest_neighbor_pairing(
    clusters: &[Point3],
    r_prime: f64,
    k: usize,
    seed: u64,
) -> Result<Pairing> {
    let centers: Vec<usize> = (0..clusters.len()).collect();
    let table = ball_query(clusters, &centers, r_prime, k, seed)?;
    Ok(select_partner(&table, |i, j| sq_dist(&clusters[i], &clusters[j])))
}
