use std::cmp::Ordering;

use super::{Box3D, Detection};
use crate::error::Result;

type P2 = [f64; 2];

fn cross(o: P2, a: P2, b: P2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (positive when counterclockwise).
pub fn polygon_area(poly: &[P2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0
}

/// Sutherland-Hodgman clipping of `subject` by the convex counterclockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[P2], clip: &[P2]) -> Vec<P2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Exact BEV intersection area of two oriented rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        return Ok(0.0);
    }
    Ok(polygon_area(&poly).max(0.0))
}

pub fn bev_rotated_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter = bev_intersection(a, b)?;
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter_bev = bev_intersection(a, b)?;
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = inter_bev * dz;
    Ok((inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0))
}

/// Greedy 3D NMS. Output is ordered by descending score, ties by input index.
pub fn nms3d(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| match dets[j].score.total_cmp(&dets[i].score) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    });
    let mut kept: Vec<Detection> = Vec::new();
    'next: for i in order {
        for k in &kept {
            if iou3d(&dets[i].bbox, &k.bbox)? > iou_threshold {
                continue 'next;
            }
        }
        kept.push(dets[i]);
    }
    Ok(kept)
}
