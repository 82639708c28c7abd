use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::detector::{normalize_yaw, Box3D, Detection, Object};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::tensor::Matrix;

/// File name of the run manifest written next to generated data.
pub const MANIFEST_NAME: &str = "manifest.json";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `N x 4` little-endian `f32` records. The cloud must carry exactly
/// one feature channel (intensity).
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    if cloud.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "cloud files hold one intensity channel, got {}",
            cloud.channels()
        )));
    }
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for (p, f) in cloud.positions().iter().zip(cloud.features().data()) {
        for v in [p[0], p[1], p[2], *f] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        return Err(format_err(path, "empty cloud"));
    }
    if bytes.len() % 16 != 0 {
        return Err(format_err(path, format!("{} bytes is not a whole number of 16-byte records", bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let n = vals.len() / 4;
    let pos: Vec<Point3> = vals.chunks_exact(4).map(|r| [r[0], r[1], r[2]]).collect();
    let feats = Matrix::from_vec(n, 1, vals.chunks_exact(4).map(|r| r[3]).collect())?;
    PointCloud::new(pos, feats).map_err(|e| format_err(path, e.to_string()))
}

/// One label entry as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub class_id: usize,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

pub fn write_labels(path: &Path, objects: &[Object]) -> Result<()> {
    let recs: Vec<LabelRecord> = objects
        .iter()
        .map(|o| LabelRecord {
            class_id: o.class_id,
            center: o.bbox.center,
            size: o.bbox.size,
            yaw: o.bbox.yaw,
        })
        .collect();
    fs::write(path, serde_json::to_string_pretty(&recs)?)?;
    Ok(())
}

/// Parses label JSON. Returns the objects and the indices whose yaw had to
/// be normalized into `[-pi, pi)`.
pub fn parse_labels(text: &str) -> Result<(Vec<Object>, Vec<usize>)> {
    let recs: Vec<LabelRecord> = serde_json::from_str(text)?;
    let mut normalized = Vec::new();
    let mut objects = Vec::with_capacity(recs.len());
    for (i, r) in recs.into_iter().enumerate() {
        if r.class_id == 0 {
            return Err(Error::InvalidArgument(format!("label {i}: class 0 is background")));
        }
        if normalize_yaw(r.yaw) != r.yaw {
            normalized.push(i);
        }
        objects.push(Object {
            bbox: Box3D::new(r.center, r.size, r.yaw)?,
            class_id: r.class_id,
        });
    }
    Ok((objects, normalized))
}

pub fn read_labels(path: &Path) -> Result<Vec<Object>> {
    let text = fs::read_to_string(path)?;
    let (objects, normalized) = parse_labels(&text).map_err(|e| match e {
        Error::Json(j) => format_err(path, j.to_string()),
        other => other,
    })?;
    for i in normalized {
        log::warn!("{}: label {i} yaw outside [-pi, pi), normalized", path.display());
    }
    Ok(objects)
}

/// One detection line as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    pub class_id: usize,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl DetectionRecord {
    pub fn new(scene_id: &str, d: &Detection) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            class_id: d.class_id,
            score: d.score,
            center: d.bbox.center,
            size: d.bbox.size,
            yaw: d.bbox.yaw,
        }
    }

    pub fn detection(&self) -> Result<Detection> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(Detection {
            bbox: Box3D::new(self.center, self.size, self.yaw)?,
            class_id: self.class_id,
            score: self.score,
        })
    }
}

/// Writes one JSON object per line.
pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?;
        rec.detection()?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `<id>.bin` and `<id>.json` for every scene.
pub fn write_dataset(dir: &Path, scenes: &[(String, Scene)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (id, s) in scenes {
        write_cloud(&dir.join(format!("{id}.bin")), &s.cloud)?;
        write_labels(&dir.join(format!("{id}.json")), &s.objects)?;
    }
    Ok(())
}

/// Loads every `.bin`/`.json` pair under `dir` (or `dir/split`) in
/// lexicographic id order. A file without its partner is an error; a run
/// manifest named [`MANIFEST_NAME`] is ignored.
pub fn dataset(dir: &Path, split: Option<&str>) -> Result<Vec<(String, Scene)>> {
    let root: PathBuf = split.map_or_else(|| dir.to_path_buf(), |s| dir.join(s));
    let mut bins = Vec::new();
    let mut jsons = Vec::new();
    for entry in fs::read_dir(&root)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else { continue };
        if path.file_name().is_some_and(|n| n == MANIFEST_NAME) {
            continue;
        }
        let stem = stem.to_string_lossy().into_owned();
        match ext.to_str() {
            Some("bin") => bins.push(stem),
            Some("json") => jsons.push(stem),
            _ => {}
        }
    }
    bins.sort();
    jsons.sort();
    if let Some(orphan) = bins.iter().find(|b| jsons.binary_search(b).is_err()) {
        return Err(Error::OrphanFile(root.join(format!("{orphan}.bin"))));
    }
    if let Some(orphan) = jsons.iter().find(|j| bins.binary_search(j).is_err()) {
        return Err(Error::OrphanFile(root.join(format!("{orphan}.json"))));
    }
    bins.into_iter()
        .map(|id| {
            let cloud = read_cloud(&root.join(format!("{id}.bin")))?;
            let objects = read_labels(&root.join(format!("{id}.json")))?;
            Ok((id, Scene { cloud, objects }))
        })
        .collect()
}
