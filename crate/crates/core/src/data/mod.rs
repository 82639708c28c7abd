//! Synthetic LiDAR-like scenes and their on-disk formats: `.bin` clouds
//! (little-endian `f32` x, y, z, intensity), `.json` labels and `.jsonl`
//! detections.

mod io;

pub use io::{
    dataset, parse_labels, read_cloud, read_detections, read_labels, write_cloud, write_dataset, write_detections,
    write_labels, DetectionRecord, LabelRecord, MANIFEST_NAME,
};

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{bev_intersection, Box3D, Object, DEFAULT_CLASS_SIZES};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub class_id: usize,
    pub mean_size: [f64; 3],
    /// Relative size jitter: each dimension is scaled by `1 + U(-j, j)`.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Ground extent `(x, y)` in meters, centered at the origin.
    pub extent: [f64; 2],
    /// Exact number of points per scene.
    pub points: usize,
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of objects per scene.
    pub objects: [usize; 2],
    /// Surface points per object.
    pub object_points: usize,
    /// Points scattered uniformly through the scene volume.
    pub noise_points: usize,
    /// Bound of the uniform per-axis jitter on surface and ground points.
    pub surface_jitter: f64,
    /// Minimum BEV gap between objects.
    pub clearance: f64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let class = |name: &str, id: usize| ClassSpec {
            name: name.into(),
            class_id: id,
            mean_size: DEFAULT_CLASS_SIZES[id - 1],
            jitter: 0.05,
        };
        Self {
            extent: [12.0, 12.0],
            points: 1024,
            classes: vec![class("car", 1), class("van", 2)],
            objects: [1, 3],
            object_points: 160,
            noise_points: 16,
            surface_jitter: 0.02,
            clearance: 0.5,
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    /// 10 m x 10 m scenes of 224 points with one or two objects, sized for
    /// [`ModelConfig::small`](crate::detector::ModelConfig::small).
    pub fn small() -> Self {
        Self {
            extent: [10.0, 10.0],
            points: 224,
            objects: [1, 2],
            object_points: 72,
            noise_points: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return bad(format!("extent {:?} must be positive", self.extent));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.classes.iter().any(|c| c.class_id == 0 || c.mean_size.iter().any(|&s| !(s > 0.0)) || !(0.0..1.0).contains(&c.jitter)) {
            return bad("classes need ids >= 1, positive sizes and jitter in [0, 1)".into());
        }
        if self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?}", self.objects));
        }
        if self.object_points < 8 {
            return bad("objects need at least 8 surface points".into());
        }
        let needed = self.objects[1] * self.object_points + self.noise_points;
        if needed > self.points || self.points == 0 {
            return bad(format!("{} points cannot hold {needed} object and noise points", self.points));
        }
        if !(self.surface_jitter >= 0.0) || !(self.clearance >= 0.0) {
            return bad("jitter and clearance must be non-negative".into());
        }
        Ok(())
    }
}

/// A cloud with one intensity channel and its labeled objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub objects: Vec<Object>,
}

/// Rounds through `f32` so the value survives the on-disk format exactly.
fn q(v: f64) -> f64 {
    v as f32 as f64
}

fn place_objects(config: &SynthConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<Object>> {
    let mut objects: Vec<Object> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        if attempts == config.max_attempts {
            return Err(Error::PlacementFailure {
                requested: count,
                attempts,
            });
        }
        attempts += 1;
        let spec = &config.classes[rng.gen_range(0..config.classes.len())];
        let size = spec.mean_size.map(|s| s * (1.0 + rng.gen_range(-1.0..=1.0) * spec.jitter));
        let reach = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
        let (hx, hy) = (config.extent[0] / 2.0 - reach, config.extent[1] / 2.0 - reach);
        if hx <= 0.0 || hy <= 0.0 {
            continue;
        }
        let center = [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), size[2] / 2.0];
        let yaw = rng.gen_range(-FRAC_PI_2..FRAC_PI_2);
        let bbox = Box3D::new(center, size, yaw)?;
        let grown = |b: &Box3D| Box3D {
            size: [b.size[0] + config.clearance, b.size[1] + config.clearance, b.size[2]],
            ..*b
        };
        let mut free = true;
        for o in &objects {
            if bev_intersection(&grown(&bbox), &grown(&o.bbox))? > 0.0 {
                free = false;
                break;
            }
        }
        if free {
            objects.push(Object {
                bbox,
                class_id: spec.class_id,
            });
        }
    }
    Ok(objects)
}

/// Uniform sample on the four sides and the top of a box, area-weighted.
fn surface_point(b: &Box3D, rng: &mut impl Rng) -> Point3 {
    let [l, w, h] = b.size;
    let areas = [l * h, l * h, w * h, w * h, l * w];
    let mut pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
    let mut face = 4;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let local = match face {
        0 => [u * l, w / 2.0, v * h],
        1 => [u * l, -w / 2.0, v * h],
        2 => [l / 2.0, u * w, v * h],
        3 => [-l / 2.0, u * w, v * h],
        _ => [u * l, v * w, h / 2.0],
    };
    let (s, c) = b.yaw.sin_cos();
    [
        b.center[0] + c * local[0] - s * local[1],
        b.center[1] + s * local[0] + c * local[1],
        b.center[2] + local[2],
    ]
}

fn jitter(p: Point3, bound: f64, rng: &mut impl Rng) -> Point3 {
    if bound == 0.0 {
        return p;
    }
    p.map(|v| v + rng.gen_range(-bound..=bound))
}

/// Deterministic scene for `(config, seed)`.
pub fn generate_scene(config: &SynthConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let count = rng.gen_range(config.objects[0]..=config.objects[1]);
    let objects = place_objects(config, count, &mut rng)?;
    let (hx, hy) = (config.extent[0] / 2.0, config.extent[1] / 2.0);
    let j = config.surface_jitter;
    let mut pos = Vec::with_capacity(config.points);
    let mut intensity = Vec::with_capacity(config.points);
    for o in &objects {
        for _ in 0..config.object_points {
            pos.push(jitter(surface_point(&o.bbox, &mut rng), j, &mut rng));
            intensity.push(rng.gen_range(0.5..1.0));
        }
    }
    let max_h = config.classes.iter().map(|c| c.mean_size[2]).fold(1.0, f64::max);
    for _ in 0..config.noise_points {
        pos.push([rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), rng.gen_range(0.0..2.0 * max_h)]);
        intensity.push(rng.gen_range(0.0..1.0));
    }
    while pos.len() < config.points {
        pos.push(jitter([rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), 0.0], j, &mut rng));
        intensity.push(rng.gen_range(0.0..0.3));
    }
    let pos: Vec<Point3> = pos.into_iter().map(|p| p.map(q)).collect();
    let n = pos.len();
    let feats = Matrix::from_vec(n, 1, intensity.into_iter().map(q).collect())?;
    Ok(Scene {
        cloud: PointCloud::new(pos, feats)?,
        objects,
    })
}

/// `n` scenes with per-scene seeds derived from `seed`.
pub fn generate_dataset(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n).map(|i| generate_scene(config, rng::derive(seed, &[i as u64]))).collect()
}

/// Conventional scene id for index `i`.
pub fn scene_id(i: usize) -> String {
    format!("scene_{i:04}")
}

#[cfg(test)]
mod tests;
