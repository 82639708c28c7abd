use std::collections::HashMap;

use super::Point3;

/// Uniform hash grid over a fixed point set.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl GridIndex {
    /// Buckets every point by `floor(p / cell)`. Panics if `cell` is not
    /// positive and finite.
    pub fn build(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell must be positive");
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// All indexed point ids, ascending.
    pub fn all_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.cells.values().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    /// Indices with `|p - center|^2 <= radius^2`, ascending.
    pub fn query_radius(&self, points: &[Point3], center: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.query_radius_into(points, center, radius, &mut out);
        out
    }

    pub fn query_radius_into(
        &self,
        points: &[Point3],
        center: &Point3,
        radius: f64,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        let r2 = radius * radius;
        let lo = key(&[center[0] - radius, center[1] - radius, center[2] - radius], self.cell);
        let hi = key(&[center[0] + radius, center[1] + radius, center[2] + radius], self.cell);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if let Some(ids) = self.cells.get(&[x, y, z]) {
                        out.extend(ids.iter().copied().filter(|&i| sq_dist(&points[i], center) <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

fn key(p: &Point3, cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

#[inline]
pub(crate) fn sq_dist(a: &Point3, b: &Point3) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}
