use super::*;
use crate::data::{generate_dataset, scene_id, Scene, SynthConfig};
use crate::detector::{Model, ModelConfig};
use crate::ssa::{ExchangeOp, Selection};

fn small_scenes(n: usize, seed: u64) -> Vec<(String, Scene)> {
    generate_dataset(&SynthConfig::small(), n, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (scene_id(i), s))
        .collect()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn with_exchange(mut c: ModelConfig, op: ExchangeOp) -> ModelConfig {
    for s in &mut c.stages {
        s.exchange = op;
    }
    c
}

#[test]
fn one_cycle_endpoints() {
    let c = TrainConfig::default();
    let total = 1000;
    assert!((one_cycle_lr(&c, 0, total) - 0.001).abs() < 1e-12);
    let peak = (c.pct_start * total as f64) as usize;
    assert!((one_cycle_lr(&c, peak, total) - 0.01).abs() < 1e-6);
    let last = one_cycle_lr(&c, total - 1, total);
    assert!(last < 1e-6 && last > 0.0);
    let mut prev = f64::INFINITY;
    for t in peak..total {
        let lr = one_cycle_lr(&c, t, total);
        assert!(lr <= prev + 1e-15);
        prev = lr;
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let scenes = small_scenes(2, 3);
    let config = TrainConfig {
        peak_lr: 0.0,
        ..quick(4, 1)
    };
    let out = train_toy(&scenes, &ModelConfig::small(), &config).unwrap();
    let init = Model::new(ModelConfig::small(), 1).unwrap();
    assert_eq!(out.model.store.flatten(), init.store.flatten());
    let first = out.curve[0].total;
    assert!(out.curve.iter().all(|l| l.total == first));
}

#[test]
fn training_is_deterministic() {
    let scenes = small_scenes(2, 5);
    let a = train_toy(&scenes, &ModelConfig::small(), &quick(5, 9)).unwrap();
    let b = train_toy(&scenes, &ModelConfig::small(), &quick(5, 9)).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model.store.flatten(), b.model.store.flatten());
}

#[test]
fn single_scene_loss_descends() {
    let scenes = small_scenes(1, 11);
    let out = train_toy(&scenes, &ModelConfig::small(), &quick(50, 2)).unwrap();
    let loss: Vec<f64> = out.curve.iter().map(|l| l.total).collect();
    let windows = loss.len() - 10;
    let down = (0..windows).filter(|&t| loss[t + 10] < loss[t]).count();
    assert!(down * 5 >= windows * 4, "{down}/{windows} windows decrease: {loss:?}");
    assert!(loss[49] < 0.5 * loss[0]);
}

#[test]
fn training_writes_csv_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = small_scenes(1, 4);
    let config = TrainConfig {
        log_csv: Some(dir.path().join("loss.csv")),
        checkpoint: Some(dir.path().join("model.json")),
        ..quick(3, 0)
    };
    let out = train_toy(&scenes, &ModelConfig::small(), &config).unwrap();
    let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("epoch,lr,offset,cls"));
    let loaded = Model::load(&dir.path().join("model.json")).unwrap();
    assert_eq!(loaded.store.flatten(), out.model.store.flatten());
}

#[test]
fn training_rejects_empty_and_bad_configs() {
    assert!(train_toy(&[], &ModelConfig::small(), &quick(1, 0)).is_err());
    let scenes = small_scenes(1, 0);
    assert!(train_toy(&scenes, &ModelConfig::small(), &quick(0, 0)).is_err());
    let neg = TrainConfig {
        peak_lr: -1.0,
        ..quick(1, 0)
    };
    assert!(train_toy(&scenes, &ModelConfig::small(), &neg).is_err());
}

#[test]
fn recall_counts_is_class_aware() {
    let scenes = small_scenes(1, 8);
    let objects = &scenes[0].1.objects;
    let exact: Vec<_> = objects
        .iter()
        .map(|o| crate::detector::Detection {
            bbox: o.bbox,
            class_id: o.class_id,
            score: 1.0,
        })
        .collect();
    assert_eq!(recall_counts(&exact, objects, 0.5).unwrap(), (objects.len(), objects.len()));
    let wrong: Vec<_> = exact
        .iter()
        .cloned()
        .map(|mut d| {
            d.class_id = 3 - d.class_id;
            d
        })
        .collect();
    assert_eq!(recall_counts(&wrong, objects, 0.5).unwrap().0, 0);
}

#[test]
fn probe_with_zero_eps_sees_nothing() {
    let scenes = small_scenes(1, 1);
    let model = Model::new(ModelConfig::small(), 0).unwrap();
    let r = receptive_field_probe(&model, &scenes[0].1.cloud, 0.0, 0.0, 0).unwrap();
    assert_eq!(r.clusters.len(), 16);
    assert!(r.clusters.iter().all(|c| c.influential.is_empty() && c.radius == 0.0));
    assert!(receptive_field_probe(&model, &scenes[0].1.cloud, -1.0, 0.0, 0).is_err());
}

#[test]
fn probe_soundness_and_shift_expansion() {
    let scenes = small_scenes(1, 21);
    let cloud = &scenes[0].1.cloud;
    let none = Model::new(with_exchange(ModelConfig::small(), ExchangeOp::None), 4).unwrap();
    let cs = Model::new(ModelConfig::small(), 4).unwrap();
    let rn = receptive_field_probe(&none, cloud, 1e-3, 1e-9, 7).unwrap();
    let rc = receptive_field_probe(&cs, cloud, 1e-3, 1e-9, 7).unwrap();
    assert!(rn.reach_violations(cloud).is_empty());
    assert!(rn.clusters.iter().any(|c| !c.influential.is_empty()));
    let qualifying = qualifying_clusters(&rc, &rn, cloud);
    let expanded = (0..rc.clusters.len()).filter(|&i| rc.clusters[i].radius > rn.clusters[i].radius).count();
    assert!(!qualifying.is_empty());
    assert!(expanded >= qualifying.len(), "{expanded} < {}", qualifying.len());
    assert!(rc.clusters.iter().any(|c| c.radius > rc.composed_reach));
}

#[test]
fn shift_parameter_delta_is_closed_form() {
    let cs = ModelConfig::small();
    let none = with_exchange(cs.clone(), ExchangeOp::None);
    let a = Model::new(cs.clone(), 0).unwrap().num_scalars();
    let b = Model::new(none, 0).unwrap().num_scalars();
    assert!(b < a);
    // Scales end in 8, 16, 16, 16 channels.
    let hand = (2 * 64 + 16) + 3 * (2 * 256 + 32);
    assert_eq!(shift_mlp_params(&cs), hand);
    assert_eq!(a - b, hand);
}

#[test]
fn bench_reports_every_variant() {
    let scenes = small_scenes(2, 2);
    let clouds: Vec<_> = scenes.iter().map(|(_, s)| s.cloud.clone()).collect();
    let cs = Model::new(ModelConfig::small(), 0).unwrap();
    let none = Model::new(with_exchange(ModelConfig::small(), ExchangeOp::None), 0).unwrap();
    let variants = vec![("cs".to_string(), cs), ("none".to_string(), none)];
    assert!(latency_bench(&variants, &clouds, 9, 0, 0).is_err());
    let r = latency_bench(&variants, &clouds, 10, 2, 0).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.mean_ms > 0.0 && row.median_ms > 0.0 && row.repetitions == 10));
    assert_eq!(r.row("cs").unwrap().params - r.row("none").unwrap().params, shift_mlp_params(&ModelConfig::small()));
}

#[test]
fn ablation_axes_in_report_order() {
    assert_eq!(AblationAxis::ShiftRatio.values(), ["0", "1/16", "1/8", "1/4", "1/2"]);
    assert_eq!(AblationAxis::Selection.values(), ["feats_scale", "nearest", "points_num", "farthest"]);
    assert_eq!(AblationAxis::Exchange.values(), ["none", "concat", "avg", "attn", "cs"]);
    let c = AblationAxis::ShiftRatio.apply(&ModelConfig::small(), "1/16").unwrap();
    assert!(c.stages.iter().all(|s| s.shift_ratio == 0.0625));
    let c = AblationAxis::Selection.apply(&ModelConfig::small(), "nearest").unwrap();
    assert!(c.stages.iter().all(|s| s.selection == Selection::Nearest));
    assert!(AblationAxis::Exchange.apply(&ModelConfig::small(), "blend").is_err());
    assert_eq!(parse_ratio("0.25").unwrap(), 0.25);
    assert!(parse_ratio("3/2").is_err());
    assert!(parse_ratio("x").is_err());
    assert_eq!("selection".parse::<AblationAxis>().unwrap(), AblationAxis::Selection);
}

#[test]
fn ablation_grid_is_complete_and_reproducible() {
    let scenes = small_scenes(2, 6);
    let train = quick(2, 3);
    let a = run_ablation(&[AblationAxis::ShiftRatio, AblationAxis::Selection], &ModelConfig::small(), &train, &scenes, 1).unwrap();
    assert_eq!(a.rows.len(), 9);
    assert!(a.rows.iter().all(|r| r.status == "ok" && r.recall.is_some() && r.loss.unwrap().is_finite()));
    let b = run_ablation(&[AblationAxis::ShiftRatio, AblationAxis::Selection], &ModelConfig::small(), &train, &scenes, 3).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    a.write_csv(&dir.path().join("ab.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("ab.csv")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.starts_with("axis,value,recall,loss,status,error"));
}

#[test]
fn ablation_records_failed_cells() {
    let scenes = small_scenes(1, 6);
    let train = TrainConfig {
        epochs: 0,
        ..quick(1, 0)
    };
    let r = run_ablation(&[AblationAxis::Exchange], &ModelConfig::small(), &train, &scenes, 2).unwrap();
    assert_eq!(r.rows.len(), 5);
    assert!(r.rows.iter().all(|row| row.status == "failed" && !row.error.is_empty() && row.recall.is_none()));
}

#[test]
fn manifest_roundtrip_is_atomic() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let m = RunManifest {
        subcommand: "gen".into(),
        config: serde_json::json!({ "n": 3 }),
        seed: 4,
        git_describe: git_describe(),
        outputs: vec![dir.path().join("scene_0000.bin")],
        wall_time_s: 0.5,
        status: "ok".into(),
        error: None,
    };
    m.write(&path).unwrap();
    let back: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, m);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn end_to_end_gradients_match_for_every_operator() {
    for op in ExchangeOp::ALL {
        let r = end_to_end_gradcheck(op, 1, 9).unwrap();
        assert!(r.coords > 200, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn twin_shares_parameters() {
    let cs = Model::new(ModelConfig::small(), 12).unwrap();
    let twin = no_shift_twin(&cs).unwrap();
    let fresh = Model::new(with_exchange(ModelConfig::small(), ExchangeOp::None), 12).unwrap();
    assert_eq!(twin.store.flatten(), fresh.store.flatten());
    assert!(twin.config.stages.iter().all(|s| s.exchange == ExchangeOp::None));
}
