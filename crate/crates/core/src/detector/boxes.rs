use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = (yaw + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to TAU for inputs just below a multiple of it
    if y >= PI {
        y - TAU
    } else {
        y
    }
}

/// Oriented box: geometric center, `(l, w, h)` extents along the box's
/// local x/y/z axes, and a yaw about +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Point3,
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    /// Validated constructor; the yaw is normalized.
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self> {
        let b = Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().chain(&self.size).chain([&self.yaw]).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("box {self:?}")));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::DegenerateBox(format!("size {:?}", self.size)));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0)
    }

    /// Point expressed in the box frame (origin at the center, unrotated).
    pub fn to_local(&self, p: &Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    /// Whether `p` lies inside the box grown by `margin` on every side.
    pub fn contains(&self, p: &Point3, margin: f64) -> bool {
        let l = self.to_local(p);
        (0..3).all(|d| l[d].abs() <= self.size[d] / 2.0 + margin)
    }

    /// BEV rectangle corners, counterclockwise starting at `(+l/2, +w/2)`.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(x, y)| [self.center[0] + c * x - s * y, self.center[1] + s * x + c * y])
    }
}

/// Ground-truth object: a box and its foreground class id (>= 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// Scored, class-labeled box. Class 0 is background and never emitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub class_id: usize,
    pub score: f64,
}

/// Regression targets of one box relative to a candidate and class anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEncoding {
    pub center_res: [f64; 3],
    pub size_res: [f64; 3],
    pub bin: usize,
    /// Yaw offset from the bin center divided by the bin half-width.
    pub angle_res: f64,
}

pub fn bin_width(bins: usize) -> f64 {
    TAU / bins as f64
}

/// Bin whose center is nearest `yaw`; bin `b` is centered at `b * width`.
pub fn angle_bin(yaw: f64, bins: usize) -> usize {
    let w = bin_width(bins);
    (((yaw + w / 2.0).rem_euclid(TAU) / w) as usize).min(bins - 1)
}

pub fn encode_box(b: &Box3D, candidate: &Point3, anchor: &[f64; 3], bins: usize) -> BoxEncoding {
    let w = bin_width(bins);
    let bin = angle_bin(b.yaw, bins);
    BoxEncoding {
        center_res: [0, 1, 2].map(|d| b.center[d] - candidate[d]),
        size_res: [0, 1, 2].map(|d| (b.size[d] / anchor[d]).ln()),
        bin,
        angle_res: normalize_yaw(b.yaw - bin as f64 * w) / (w / 2.0),
    }
}

pub fn decode_encoding(e: &BoxEncoding, candidate: &Point3, anchor: &[f64; 3], bins: usize) -> Result<Box3D> {
    let w = bin_width(bins);
    Box3D::new(
        [0, 1, 2].map(|d| candidate[d] + e.center_res[d]),
        [0, 1, 2].map(|d| anchor[d] * e.size_res[d].exp()),
        e.bin as f64 * w + e.angle_res * w / 2.0,
    )
}
