//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shiftssd::data::{
    dataset, read_cloud, read_detections, read_labels, write_cloud, write_detections, write_labels, DetectionRecord,
};
use shiftssd::detector::{
    bev_rotated_iou, decode_encoding, encode_box, iou3d, nms3d, normalize_yaw, Box3D, Detection, ModelConfig, Object,
};
use shiftssd::geometry::{ball_query, dfps, farthest_neighbor_pairing, Pairing, Point3, PointCloud};
use shiftssd::harness::end_to_end_gradcheck;
use shiftssd::ssa::{cross_cluster_shift, ExchangeOp};
use shiftssd::tensor::{Graph, Matrix, MlpParams, ParamStore};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_shiftssd")
}

fn shiftssd(args: &[&str], dir: &Path) -> Result<String> {
    let out = Command::new(bin()).args(args).current_dir(dir).output()?;
    if !out.status.success() {
        bail!("shiftssd {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn sq(a: &Point3, b: &Point3) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2])
}

fn random_points(n: usize, extent: f64, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-extent..extent))).collect()
}

fn sampling_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut steps = 0;
    for case in 0..200u64 {
        let n = rng.gen_range(2..=64);
        let pts = random_points(n, rng.gen_range(0.5..10.0), &mut rng);
        let m = rng.gen_range(1..=n);
        let sel = dfps(&pts, m, case)?;
        ensure!(sel.len() == m, "case {case}: {} of {m} samples", sel.len());
        for t in 1..m {
            let min_to = |j: usize| sel[..t].iter().map(|&s| sq(&pts[j], &pts[s])).fold(f64::INFINITY, f64::min);
            let best = (0..n).filter(|j| !sel[..t].contains(j)).map(min_to).fold(f64::NEG_INFINITY, f64::max);
            ensure!(!sel[..t].contains(&sel[t]), "case {case}: index {} selected twice", sel[t]);
            ensure!(min_to(sel[t]) == best, "case {case} step {t}: {} vs exhaustive {best}", min_to(sel[t]));
            steps += 1;
        }

        let r = rng.gen_range(0.2..6.0);
        let centers: Vec<usize> = (0..n).collect();
        let table = ball_query(&pts, &centers, r, n, case)?;
        for i in 0..n {
            let naive: Vec<usize> = (0..n).filter(|&j| sq(&pts[i], &pts[j]) <= r * r).collect();
            let mut got: Vec<usize> = table.valid_indices(i).collect();
            ensure!(got[0] == i, "case {case}: slot 0 of row {i} is {}", got[0]);
            got.sort_unstable();
            ensure!(got == naive, "case {case} row {i}: ball {got:?} vs scan {naive:?}");
        }

        let pairing = farthest_neighbor_pairing(&pts, r, n, case)?;
        for i in 0..n {
            let mut expected = i;
            for j in (0..n).filter(|&j| j != i && sq(&pts[i], &pts[j]) <= r * r) {
                if expected == i || sq(&pts[i], &pts[j]) > sq(&pts[i], &pts[expected]) {
                    expected = j;
                }
            }
            ensure!(pairing.0[i] == expected, "case {case}: partner of {i} is {} not {expected}", pairing.0[i]);
        }
    }
    Ok(format!("200 clouds, {steps} D-FPS steps, ball and pairing exact"))
}

fn gradient_integrity() -> Result<String> {
    let r = end_to_end_gradcheck(ExchangeOp::Cs, 1, 1)?;
    ensure!(r.max_rel_error < 1e-4, "max relative error {:.3e}", r.max_rel_error);
    Ok(format!("{} parameters, {} kinks skipped, max rel error {:.2e}", r.coords, r.skipped_kinks, r.max_rel_error))
}

fn shift_once(store: &ParamStore, mlp: &MlpParams, x: &Matrix, pairing: &Pairing, s: usize) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let xv = g.input(x.clone());
    let h = cross_cluster_shift(&mut g, xv, pairing, s, mlp)?;
    Ok(g.value(h).clone())
}

fn shifting_semantics() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50u64 {
        let (m, c) = (rng.gen_range(2..12), rng.gen_range(2..17));
        let s = rng.gen_range(0..=c);
        let mut store = ParamStore::new();
        let mlp = store.add_mlp("shift", c, &[c, c], false, case)?;
        let x = Matrix::from_vec(m, c, (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

        // self-pairing: equal to substituting x_f := x_i, and blind to others
        let id = Pairing::identity(m);
        let h = shift_once(&store, &mlp, &x, &id, s)?;
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone());
        let f = g.mlp(xv, &mlp)?;
        let a = g.avg2(f, xv)?;
        let local = g.relu(a);
        ensure!(&h == g.value(local), "case {case}: self-pairing differs from substitution");
        let i = rng.gen_range(0..m);
        let mut xp = x.clone();
        for j in (0..m).filter(|&j| j != i) {
            for k in 0..c {
                xp[(j, k)] += rng.gen_range(-1.0..1.0);
            }
        }
        let hp = shift_once(&store, &mlp, &xp, &id, s)?;
        ensure!(h.row(i) == hp.row(i), "case {case}: row {i} saw another cluster");

        // splice locality through an identity MLP on non-negative input
        for l in &mlp.layers {
            *store.value_mut(l.weight) = Matrix::identity(c);
            *store.value_mut(l.bias) = Matrix::zeros(1, c);
        }
        let xn = Matrix::from_vec(m, c, x.data().iter().map(|v| v.abs()).collect())?;
        let pairing = Pairing((0..m).map(|_| rng.gen_range(0..m)).collect());
        let h = shift_once(&store, &mlp, &xn, &pairing, s)?;
        for i in 0..m {
            for k in 0..c {
                let src = if k < s { pairing.0[i] } else { i };
                ensure!(h[(i, k)] == 0.5 * (xn[(src, k)] + xn[(i, k)]), "case {case}: channel {k} of row {i}");
            }
        }
    }
    Ok("50 instances bit-exact".into())
}

fn receptive_field(dir: &Path) -> Result<String> {
    shiftssd(&["gen", "--preset", "small", "--scenes", "20", "--out", "probe_data", "--seed", "4"], dir)?;
    shiftssd(&["probe", "--preset", "small", "--data", "probe_data", "--out", "probe.json", "--seed", "4"], dir)?;
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("probe.json"))?)?;
    let s = &report["summary"];
    let (q, e, v) = (s["qualifying"].as_u64(), s["expanded"].as_u64(), s["sa_reach_violations"].as_u64());
    let (Some(q), Some(e), Some(v)) = (q, e, v) else { bail!("malformed probe summary {s}") };
    ensure!(s["scenes"] == 20, "probed {} scenes", s["scenes"]);
    ensure!(v == 0, "{v} influential points beyond the composed reach without shifting");
    ensure!(q > 0, "no qualifying pairing");
    ensure!(e == q, "{e} of {q} qualifying clusters expanded");
    Ok(format!(
        "0 violations, {e}/{q} qualifying clusters expanded, mean radius {:.2} m vs {:.2} m",
        s["mean_radius_ssa"].as_f64().unwrap_or(f64::NAN),
        s["mean_radius_sa"].as_f64().unwrap_or(f64::NAN)
    ))
}

fn overhead(dir: &Path) -> Result<String> {
    shiftssd(&["bench", "--scenes", "4", "--repetitions", "20", "--warmup", "3", "--out", "bench.csv", "--seed", "5"], dir)?;
    let text = fs::read_to_string(dir.join("bench.csv"))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 5, "bench row {line:?}");
        rows.push((f[0].to_string(), f[2].parse::<f64>()?, f[3].parse::<usize>()?));
    }
    let find = |v: &str| rows.iter().find(|r| r.0 == v).cloned().context(format!("no {v} row"));
    let (cs, none) = (find("cs")?, find("none")?);
    let closed: usize = ModelConfig::default()
        .stages
        .iter()
        .flat_map(|st| &st.scales)
        .map(|sc| {
            let c = *sc.mlp.last().expect("non-empty mlp");
            2 * c * c + 2 * c
        })
        .sum();
    let ratio = cs.1 / none.1;
    ensure!(cs.2 - none.2 == closed, "parameter delta {} vs closed form {closed}", cs.2 - none.2);
    ensure!(ratio <= 1.5, "median latency ratio {ratio:.3}");
    Ok(format!("median {:.2} ms vs {:.2} ms (x{ratio:.3}), delta {closed} params", cs.1, none.1))
}

fn overfit(dir: &Path) -> Result<String> {
    shiftssd(&["gen", "--scenes", "8", "--out", "overfit", "--seed", "7"], dir)?;
    shiftssd(&["train", "--data", "overfit", "--out", "overfit.ckpt", "--log", "overfit_loss.csv", "--seed", "7"], dir)?;
    shiftssd(&["detect", "--model", "overfit.ckpt", "--in", "overfit", "--out", "overfit.jsonl", "--seed", "7"], dir)?;
    let log = fs::read_to_string(dir.join("overfit_loss.csv"))?;
    let header: Vec<&str> = log.lines().next().context("empty loss log")?.split(',').collect();
    let col = header.iter().position(|h| *h == "total").context("no total column")?;
    let totals: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(col).unwrap_or("nan").parse()).collect::<Result<_, _>>()?;
    ensure!(totals.len() == 300, "{} epochs logged", totals.len());
    let (first, last) = (totals[0], totals[totals.len() - 1]);
    let dets = read_detections(&dir.join("overfit.jsonl"))?;
    let (mut hit, mut total) = (0, 0);
    for (id, scene) in dataset(&dir.join("overfit"), None)? {
        for o in &scene.objects {
            total += 1;
            let mut found = false;
            for d in dets.iter().filter(|d| d.scene_id == id && d.class_id == o.class_id) {
                found |= iou3d(&d.detection()?.bbox, &o.bbox)? >= 0.5;
            }
            hit += usize::from(found);
        }
    }
    let recall = hit as f64 / total as f64;
    ensure!(last < 0.5 * first, "loss {first:.4} -> {last:.4}");
    ensure!(recall >= 0.9, "recall {hit}/{total}");
    Ok(format!("recall {hit}/{total}, loss {first:.4} -> {last:.6}"))
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    Box3D::new(
        [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(0.0..spread / 2.0)],
        [rng.gen_range(0.5..5.0), rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5)],
        rng.gen_range(-PI..PI),
    )
    .expect("valid box")
}

fn inside(b: &Box3D, p: &[f64; 3], bev_only: bool) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.center[0], p[1] - b.center[1]);
    let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0 && (bev_only || (p[2] - b.center[2]).abs() <= b.size[2] / 2.0)
}

/// Monte-Carlo IoU: uniform samples in `a`, counted inside `b`.
fn mc_iou(a: &Box3D, b: &Box3D, bev_only: bool, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (s, c) = a.yaw.sin_cos();
    let mut hits = 0;
    for _ in 0..n {
        let l = [0, 1, 2].map(|d| rng.gen_range(-0.5..0.5) * a.size[d]);
        let p = [a.center[0] + c * l[0] - s * l[1], a.center[1] + s * l[0] + c * l[1], a.center[2] + l[2]];
        hits += usize::from(inside(b, &p, bev_only));
    }
    let (va, vb) = if bev_only {
        (a.size[0] * a.size[1], b.size[0] * b.size[1])
    } else {
        (a.volume(), b.volume())
    };
    let inter = va * hits as f64 / n as f64;
    inter / (va + vb - inter)
}

fn reference_nms(dets: &[Detection], thr: f64) -> Result<Vec<Detection>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut removed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if removed[i] {
            continue;
        }
        kept.push(dets[i]);
        for &j in &order[pos + 1..] {
            if iou3d(&dets[i].bbox, &dets[j].bbox)? > thr {
                removed[j] = true;
            }
        }
    }
    Ok(kept)
}

fn geometry_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let a = random_box(&mut rng, 1.5);
        let b = random_box(&mut rng, 1.5);
        let pairs = [(bev_rotated_iou(&a, &b)?, mc_iou(&a, &b, true, 100_000, &mut rng)), (iou3d(&a, &b)?, mc_iou(&a, &b, false, 100_000, &mut rng))];
        for (exact, mc) in pairs {
            worst = worst.max((exact - mc).abs());
            ensure!((exact - mc).abs() <= 0.02, "pair {case}: {exact} vs Monte-Carlo {mc}");
        }
    }
    for case in 0..100 {
        let n = rng.gen_range(0..30);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut rng, 3.0),
                class_id: rng.gen_range(1..3),
                score: (rng.gen_range(0..20) as f64) / 20.0,
            })
            .collect();
        let thr = rng.gen_range(0.05..0.7);
        ensure!(nms3d(&dets, thr)? == reference_nms(&dets, thr)?, "set {case}: NMS differs from reference");
    }
    Ok(format!("100 IoU pairs (worst gap {worst:.4}), 100 NMS sets"))
}

fn ablation_fidelity(dir: &Path) -> Result<String> {
    let args = |out: &'static str| {
        ["ablate", "--preset", "small", "--scenes", "3", "--epochs", "3", "--axis", "all", "--jobs", "2", "--out", out, "--seed", "9"]
    };
    shiftssd(&args("ablate_a.csv"), dir)?;
    shiftssd(&args("ablate_b.csv"), dir)?;
    let a = fs::read(dir.join("ablate_a.csv"))?;
    ensure!(a == fs::read(dir.join("ablate_b.csv"))?, "re-run with the same seed changed the grid");
    let text = String::from_utf8(a)?;
    let rows: Vec<(String, String, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f.get(4).unwrap_or(&"").to_string())
        })
        .collect();
    let axis = |name: &str| rows.iter().filter(|r| r.0 == name).map(|r| r.1.as_str()).collect::<Vec<_>>();
    ensure!(axis("shift_ratio") == ["0", "1/16", "1/8", "1/4", "1/2"], "ratio axis {:?}", axis("shift_ratio"));
    ensure!(axis("selection") == ["feats_scale", "nearest", "points_num", "farthest"], "selection axis {:?}", axis("selection"));
    ensure!(axis("exchange") == ["none", "concat", "avg", "attn", "cs"], "exchange axis {:?}", axis("exchange"));
    ensure!(rows.iter().all(|r| r.2 == "ok"), "failed cells: {rows:?}");
    Ok(format!("{} cells, byte-identical re-run", rows.len()))
}

fn round_trips(dir: &Path) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let path = dir.join("rt");
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        let pos: Vec<Point3> = (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-80.0f32..80.0) as f64)).collect();
        let feats = Matrix::from_vec(n, 1, (0..n).map(|_| rng.gen::<f32>() as f64).collect())?;
        let cloud = PointCloud::new(pos, feats)?;
        write_cloud(&path.with_extension("bin"), &cloud)?;
        ensure!(read_cloud(&path.with_extension("bin"))? == cloud, "cloud {case}");

        let objects: Vec<Object> = (0..rng.gen_range(0..5))
            .map(|_| Object {
                bbox: random_box(&mut rng, 30.0),
                class_id: rng.gen_range(1..3),
            })
            .collect();
        write_labels(&path.with_extension("json"), &objects)?;
        ensure!(read_labels(&path.with_extension("json"))? == objects, "labels {case}");

        let records: Vec<DetectionRecord> = (0..rng.gen_range(0..5))
            .map(|k| {
                let d = Detection {
                    bbox: random_box(&mut rng, 30.0),
                    class_id: rng.gen_range(1..3),
                    score: rng.gen_range(0.0..=1.0),
                };
                DetectionRecord::new(&format!("scene_{k}"), &d)
            })
            .collect();
        write_detections(&path.with_extension("jsonl"), &records)?;
        ensure!(read_detections(&path.with_extension("jsonl"))? == records, "detections {case}");

        let b = random_box(&mut rng, 30.0);
        let cand = [0, 1, 2].map(|d| b.center[d] + rng.gen_range(-1.0..1.0));
        let anchor = [rng.gen_range(1.0..5.0), rng.gen_range(1.0..2.0), rng.gen_range(1.0..2.0)];
        let back = decode_encoding(&encode_box(&b, &cand, &anchor, 12), &cand, &anchor, 12)?;
        for d in 0..3 {
            ensure!((back.center[d] - b.center[d]).abs() <= 1e-9, "box {case}: center");
            ensure!((back.size[d] - b.size[d]).abs() <= 1e-9 * b.size[d], "box {case}: size");
        }
        ensure!(normalize_yaw(back.yaw - b.yaw).abs() <= 1e-9, "box {case}: yaw {} vs {}", back.yaw, b.yaw);
    }
    Ok("1000 clouds, label sets, detection sets and box codings".into())
}

type Criterion<'a> = (&'a str, Duration, Box<dyn Fn() -> Result<String> + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("sampling oracles", Duration::from_secs(10), Box::new(sampling_oracles)),
        ("gradient integrity", Duration::from_secs(60), Box::new(gradient_integrity)),
        ("shifting semantics", Duration::from_secs(60), Box::new(shifting_semantics)),
        ("receptive-field expansion", Duration::from_secs(300), Box::new(|| receptive_field(dir))),
        ("negligible overhead", Duration::from_secs(120), Box::new(|| overhead(dir))),
        ("overfit detection", Duration::from_secs(600), Box::new(|| overfit(dir))),
        ("geometry oracles", Duration::from_secs(120), Box::new(geometry_oracles)),
        ("ablation scaffold", Duration::from_secs(300), Box::new(|| ablation_fidelity(dir))),
        ("round-trips", Duration::from_secs(120), Box::new(|| round_trips(dir))),
    ];
    let mut failed = 0;
    for (k, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run));
        let took = start.elapsed();
        let verdict = match result {
            Ok(Ok(detail)) if took <= *budget => Ok(detail),
            Ok(Ok(detail)) => Err(format!("{detail}; over the {} s budget", budget.as_secs())),
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(_) => Err("panicked".to_string()),
        };
        match verdict {
            Ok(detail) => println!("PASS {}. {name} ({:.1} s): {detail}", k + 1, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name} ({:.1} s): {detail}", k + 1, took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
