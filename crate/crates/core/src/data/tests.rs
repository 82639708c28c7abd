use std::f64::consts::PI;

use super::*;
use crate::detector::{iou3d, Detection};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> SynthConfig {
    SynthConfig::default()
}

#[test]
fn zero_objects_is_pure_noise_with_exact_count() {
    let c = SynthConfig {
        objects: [0, 0],
        points: 300,
        ..cfg()
    };
    let s = generate_scene(&c, 1).unwrap();
    assert!(s.objects.is_empty());
    assert_eq!(s.cloud.len(), 300);
    assert_eq!(s.cloud.channels(), 1);
}

#[test]
fn object_points_stay_in_jitter_inflated_boxes() {
    let mut c = cfg();
    c.classes.truncate(1);
    c.classes[0].jitter = 0.0;
    c.noise_points = 0;
    c.objects = [2, 2];
    let s = generate_scene(&c, 2).unwrap();
    let per = c.object_points;
    for (k, o) in s.objects.iter().enumerate() {
        assert_eq!(o.bbox.size, c.classes[0].mean_size);
        let pts = &s.cloud.positions()[k * per..(k + 1) * per];
        // the jitter displaces by at most sqrt(3) times its per-axis bound;
        // f32 storage adds a little rounding on top
        let bound = c.surface_jitter * 3f64.sqrt() + 1e-5;
        assert!(pts.iter().all(|p| o.bbox.contains(p, bound)));
    }
}

#[test]
fn scenes_are_deterministic_and_well_formed() {
    let a = generate_scene(&cfg(), 3).unwrap();
    let b = generate_scene(&cfg(), 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_scene(&cfg(), 4).unwrap());
    for seed in 0..20 {
        let s = generate_scene(&cfg(), seed).unwrap();
        assert_eq!(s.cloud.len(), 1024);
        assert!((1..=3).contains(&s.objects.len()));
        for (i, o) in s.objects.iter().enumerate() {
            let inside = s.cloud.positions().iter().filter(|p| o.bbox.contains(p, 0.05)).count();
            assert!(inside >= 8);
            for other in &s.objects[i + 1..] {
                assert_eq!(iou3d(&o.bbox, &other.bbox).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn placement_failure_is_reported() {
    let c = SynthConfig {
        extent: [9.0, 9.0],
        objects: [5, 5],
        max_attempts: 50,
        ..cfg()
    };
    assert!(matches!(generate_scene(&c, 5), Err(Error::PlacementFailure { requested: 5, .. })));
    let bad = SynthConfig {
        extent: [0.0, 1.0],
        ..cfg()
    };
    assert!(generate_scene(&bad, 0).is_err());
}

#[test]
fn cloud_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    let one = PointCloud::new(vec![[1.5, -2.25, 0.125]], Matrix::from_vec(1, 1, vec![0.5]).unwrap()).unwrap();
    write_cloud(&path, &one).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 16);
    assert_eq!(read_cloud(&path).unwrap(), one);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let pos: Vec<Point3> = (0..n)
        .map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-3.0..3.0)])
        .collect();
    let f: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cloud = PointCloud::new(pos.clone(), Matrix::from_vec(n, 1, f.clone()).unwrap()).unwrap();
    write_cloud(&path, &cloud).unwrap();
    let back = read_cloud(&path).unwrap();
    for (p, q) in back.positions().iter().zip(&pos) {
        for d in 0..3 {
            assert_eq!(p[d], q[d] as f32 as f64);
        }
    }
    for (a, b) in back.features().data().iter().zip(&f) {
        assert_eq!(*a, *b as f32 as f64);
    }

    std::fs::write(&path, [0u8; 20]).unwrap();
    assert!(matches!(read_cloud(&path), Err(Error::Format { .. })));
    std::fs::write(&path, []).unwrap();
    assert!(matches!(read_cloud(&path), Err(Error::Format { .. })));
    let two = PointCloud::new(vec![[0.0; 3]], Matrix::zeros(1, 2)).unwrap();
    assert!(write_cloud(&path, &two).is_err());
}

#[test]
fn label_round_trips_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.json");
    write_labels(&path, &[]).unwrap();
    assert!(read_labels(&path).unwrap().is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let objects: Vec<Object> = (0..20)
        .map(|i| Object {
            bbox: Box3D::new(
                [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(0.0..2.0)],
                [rng.gen_range(0.1..6.0), rng.gen_range(0.1..3.0), rng.gen_range(0.1..3.0)],
                rng.gen_range(-PI..PI),
            )
            .unwrap(),
            class_id: 1 + i % 2,
        })
        .collect();
    write_labels(&path, &objects).unwrap();
    assert_eq!(read_labels(&path).unwrap(), objects);

    let (objs, flagged) =
        parse_labels(r#"[{"class_id":1,"center":[0,0,0],"size":[1,1,1],"yaw":4.0},{"class_id":2,"center":[0,0,0],"size":[1,1,1],"yaw":0.5}]"#)
            .unwrap();
    assert_eq!(flagged, vec![0]);
    assert!((objs[0].bbox.yaw - (4.0 - 2.0 * PI)).abs() < 1e-12);

    std::fs::write(&path, "[{").unwrap();
    assert!(matches!(read_labels(&path), Err(Error::Format { .. })));
    std::fs::write(&path, r#"[{"class_id":1,"center":[0,0,0],"size":[1,0,1],"yaw":0}]"#).unwrap();
    assert!(matches!(read_labels(&path), Err(Error::DegenerateBox(_))));
}

#[test]
fn detection_lines_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let d = Detection {
        bbox: Box3D::new([1.0, 2.0, 0.7], [3.9, 1.6, 1.5], -0.3).unwrap(),
        class_id: 2,
        score: 0.8125,
    };
    let recs = vec![DetectionRecord::new("scene_0001", &d), DetectionRecord::new("scene_0002", &d)];
    write_detections(&path, &recs).unwrap();
    let back = read_detections(&path).unwrap();
    assert_eq!(back, recs);
    assert_eq!(back[0].detection().unwrap(), d);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["scene_id", "class_id", "score", "center", "size", "yaw"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn dataset_order_orphans_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = generate_dataset(&cfg(), 3, 8).unwrap();
    let named: Vec<(String, Scene)> = scenes.iter().enumerate().rev().map(|(i, s)| (scene_id(i), s.clone())).collect();
    write_dataset(dir.path(), &named).unwrap();
    std::fs::write(dir.path().join(MANIFEST_NAME), "{}").unwrap();
    let loaded = dataset(dir.path(), None).unwrap();
    let ids: Vec<&str> = loaded.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, vec!["scene_0000", "scene_0001", "scene_0002"]);
    for ((_, l), s) in loaded.iter().zip(&scenes) {
        assert_eq!(l, s);
    }
    std::fs::copy(dir.path().join("scene_0000.bin"), dir.path().join("extra.bin")).unwrap();
    match dataset(dir.path(), None) {
        Err(Error::OrphanFile(p)) => assert!(p.ends_with("extra.bin")),
        other => panic!("{other:?}"),
    }
    std::fs::create_dir(dir.path().join("train")).unwrap();
    assert!(dataset(dir.path(), Some("train")).unwrap().is_empty());
}
