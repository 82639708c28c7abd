//! `shiftssd` command-line front end: synthetic data, training, detection,
//! receptive-field probing, latency benchmarking, ablations and gradient
//! checks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use shiftssd::data::{
    dataset, generate_dataset, read_cloud, scene_id, write_dataset, write_detections, DetectionRecord, Scene, SynthConfig,
    MANIFEST_NAME,
};
use shiftssd::detector::{detect, Model, ModelConfig};
use shiftssd::harness::{
    git_describe, gradient_suite, latency_bench, no_shift_twin, qualifying_clusters, receptive_field_probe, run_ablation,
    shift_mlp_params, train_toy, write_atomic, AblationAxis, RunManifest, TrainConfig,
};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "shiftssd", version, about = "Point-based 3D detection with cross-cluster shifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of `.bin`/`.json` scene pairs.
    Gen(GenArgs),
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Run a checkpoint on one cloud or a directory of clouds.
    Detect(DetectArgs),
    /// Measure per-cluster receptive fields with and without shifting.
    Probe(ProbeArgs),
    /// Time inference of the shifting model against its no-shift twin.
    Bench(BenchArgs),
    /// Sweep shift ratio, partner selection or exchange operator.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Default,
    Small,
}

#[derive(Args, Debug)]
struct Common {
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: u64,
    /// JSON file with optional `model`, `train` and `synth` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults the config file and flags are applied over.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// Override one config field, e.g. `model.nms_iou=0.3`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Where to write the run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
    /// Points per scene.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Subdirectory of `--data` to read.
    #[arg(long)]
    split: Option<String>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-epoch loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Where the offending scene goes if the loss turns non-finite.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// A `.bin` cloud or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// Detections as JSON lines.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["data", "input"]))]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// A single `.bin` cloud.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Checkpoint; a fresh model from the seed when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Number of synthetic scenes to time.
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// CSV report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    ShiftRatio,
    Selection,
    Exchange,
    All,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; synthetic scenes are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of synthetic scenes when `--data` is absent.
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, value_enum, default_value = "all")]
    axis: Vec<AxisArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Fully resolved configuration of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = root;
    for key in path.split('.') {
        cur = match cur {
            Value::Object(m) => m.get_mut(key),
            Value::Array(a) => key.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| anyhow!("unknown config path {path:?}"))?;
    }
    *cur = value;
    Ok(())
}

/// Defaults, then the config file, then `--set` and dedicated flags.
fn resolve(common: &Common, flags: &[(&str, Value)]) -> anyhow::Result<Resolved> {
    let (model, synth) = match common.preset {
        Preset::Default => (ModelConfig::default(), SynthConfig::default()),
        Preset::Small => (ModelConfig::small(), SynthConfig::small()),
    };
    let mut v = serde_json::to_value(Resolved {
        model,
        train: TrainConfig::default(),
        synth,
    })?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if !file.is_object() {
            bail!("{}: config must be a JSON object", path.display());
        }
        merge(&mut v, file);
    }
    for o in &common.overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| anyhow!("--set expects PATH=VALUE, got {o:?}"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, path, value)?;
    }
    for (path, value) in flags {
        set_path(&mut v, path, value.clone())?;
    }
    set_path(&mut v, "train.seed", json!(common.seed))?;
    let r: Resolved = serde_json::from_value(v).context("resolved config")?;
    r.model.validate()?;
    r.synth.validate()?;
    r.train.validate()?;
    Ok(r)
}

fn opt<T: Serialize>(path: &'static str, v: &Option<T>) -> Option<(&'static str, Value)> {
    v.as_ref().map(|x| (path, json!(x)))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// State gathered for the manifest while a subcommand runs.
#[derive(Default)]
struct Run {
    config: Value,
    outputs: Vec<PathBuf>,
    manifest: Option<PathBuf>,
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn synth_scenes(synth: &SynthConfig, n: usize, seed: u64) -> anyhow::Result<Vec<(String, Scene)>> {
    Ok(generate_dataset(synth, n, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| (scene_id(i), s))
        .collect())
}

fn cmd_gen(a: &GenArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| a.out.join(MANIFEST_NAME)));
    let flags: Vec<_> = opt("synth.points", &a.points).into_iter().collect();
    let r = resolve(&a.common, &flags)?;
    run.config = json!({ "synth": r.synth, "scenes": a.scenes, "out": a.out });
    let scenes = synth_scenes(&r.synth, a.scenes, a.common.seed)?;
    write_dataset(&a.out, &scenes)?;
    for (id, _) in &scenes {
        run.outputs.push(a.out.join(format!("{id}.bin")));
        run.outputs.push(a.out.join(format!("{id}.json")));
    }
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json")));
    let flags: Vec<_> = [
        opt("train.epochs", &a.epochs),
        opt("train.peak_lr", &a.lr),
        opt("train.log_csv", &a.log),
        opt("train.dump_dir", &a.dump_dir),
        Some(("train.checkpoint", json!(a.out))),
    ]
    .into_iter()
    .flatten()
    .collect();
    let r = resolve(&a.common, &flags)?;
    run.config = json!({ "model": r.model, "train": r.train, "data": a.data, "split": a.split });
    let scenes = dataset(&a.data, a.split.as_deref()).with_context(|| format!("reading dataset {}", a.data.display()))?;
    ensure_parent(&a.out)?;
    if let Some(log) = &r.train.log_csv {
        ensure_parent(log)?;
    }
    let out = train_toy(&scenes, &r.model, &r.train)?;
    run.outputs.push(a.out.clone());
    run.outputs.extend(r.train.log_csv.clone());
    let (first, last) = (out.curve.first(), out.curve.last());
    if let (Some(f), Some(l)) = (first, last) {
        println!("trained {} epochs on {} scenes: loss {:.6} -> {:.6}", out.curve.len(), scenes.len(), f.total, l.total);
    }
    Ok(())
}

fn clouds_in(input: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_dir() {
        let mut files: Vec<_> = fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        Ok(files.into_iter().map(|p| (stem(&p), p)).collect())
    } else {
        Ok(vec![(stem(input), input.to_path_buf())])
    }
}

fn cmd_detect(a: &DetectArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json")));
    let mut model = Model::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let mut v = json!({ "model": model.config });
    if let Some(path) = &a.common.config {
        let file: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let Some(m) = file.get("model") {
            merge(&mut v["model"], m.clone());
        }
    }
    for o in &a.common.overrides {
        let (path, raw) = o.split_once('=').ok_or_else(|| anyhow!("--set expects PATH=VALUE, got {o:?}"))?;
        set_path(&mut v, path, serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())))?;
    }
    for (path, value) in [opt("model.score_threshold", &a.score_threshold), opt("model.nms_iou", &a.nms_iou)].into_iter().flatten() {
        set_path(&mut v, path, value)?;
    }
    let config: ModelConfig = serde_json::from_value(v["model"].clone())?;
    config.validate()?;
    model = Model::from_store(config, model.store)?;
    run.config = json!({ "model": model.config, "checkpoint": a.model, "input": a.input });
    let mut records = Vec::new();
    for (id, path) in clouds_in(&a.input)? {
        let cloud = read_cloud(&path).with_context(|| format!("reading {}", path.display()))?;
        let dets = detect(&cloud, &model, a.common.seed)?;
        records.extend(dets.iter().map(|d| DetectionRecord::new(&id, d)));
    }
    ensure_parent(&a.out)?;
    write_detections(&a.out, &records)?;
    run.outputs.push(a.out.clone());
    println!("wrote {} detections to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_probe(a: &ProbeArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json")));
    let r = resolve(&a.common, &[])?;
    let model = match &a.model {
        Some(p) => Model::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Model::new(r.model.clone(), a.common.seed)?,
    };
    let twin = no_shift_twin(&model)?;
    run.config = json!({ "model": model.config, "checkpoint": a.model, "eps": a.eps, "tol": a.tol, "data": a.data, "input": a.input });
    let clouds: Vec<(String, _)> = match (&a.data, &a.input) {
        (Some(dir), _) => dataset(dir, None).with_context(|| format!("reading dataset {}", dir.display()))?.into_iter().map(|(id, s)| (id, s.cloud)).collect(),
        (None, Some(p)) => clouds_in(p)?.into_iter().map(|(id, p)| Ok((id, read_cloud(&p)?))).collect::<anyhow::Result<_>>()?,
        (None, None) => unreachable!("clap requires a source"),
    };
    let mut scenes = Vec::new();
    let (mut clusters, mut qualifying, mut expanded, mut violations) = (0, 0, 0, 0);
    let (mut ssa_sum, mut sa_sum) = (0.0, 0.0);
    for (id, cloud) in &clouds {
        let ssa = receptive_field_probe(&model, cloud, a.eps, a.tol, a.common.seed)?;
        let sa = receptive_field_probe(&twin, cloud, a.eps, a.tol, a.common.seed)?;
        let q = qualifying_clusters(&ssa, &sa, cloud);
        let grown: Vec<usize> = q.iter().copied().filter(|&i| ssa.clusters[i].radius > sa.clusters[i].radius).collect();
        let v = sa.reach_violations(cloud).len();
        clusters += ssa.clusters.len();
        qualifying += q.len();
        expanded += grown.len();
        violations += v;
        ssa_sum += ssa.mean_radius * ssa.clusters.len() as f64;
        sa_sum += sa.mean_radius * sa.clusters.len() as f64;
        scenes.push(json!({
            "scene_id": id,
            "ssa": ssa,
            "sa": sa,
            "qualifying": q,
            "expanded": grown,
            "sa_reach_violations": v,
        }));
    }
    let n = clusters.max(1) as f64;
    let summary = json!({
        "scenes": clouds.len(),
        "clusters": clusters,
        "qualifying": qualifying,
        "expanded": expanded,
        "sa_reach_violations": violations,
        "mean_radius_ssa": ssa_sum / n,
        "mean_radius_sa": sa_sum / n,
    });
    let report = json!({ "eps": a.eps, "tol": a.tol, "summary": summary, "scenes": scenes });
    ensure_parent(&a.out)?;
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.outputs.push(a.out.clone());
    println!(
        "probe: {clusters} clusters, mean radius {:.3} m with shifting vs {:.3} m without; {expanded}/{qualifying} qualifying clusters expanded; {violations} reach violations without shifting",
        ssa_sum / n,
        sa_sum / n
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json")));
    let r = resolve(&a.common, &[])?;
    run.config = json!({ "model": r.model, "synth": r.synth, "scenes": a.scenes, "repetitions": a.repetitions, "warmup": a.warmup });
    let model = Model::new(r.model.clone(), a.common.seed)?;
    let twin = no_shift_twin(&model)?;
    let name = r.model.stages.last().map_or("ssa".to_string(), |s| s.exchange.to_string());
    let clouds: Vec<_> = synth_scenes(&r.synth, a.scenes, a.common.seed)?.into_iter().map(|(_, s)| s.cloud).collect();
    let variants = vec![(name, model), ("none".to_string(), twin)];
    let report = latency_bench(&variants, &clouds, a.repetitions, a.warmup, a.common.seed)?;
    ensure_parent(&a.out)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    for row in &report.rows {
        w.serialize(row)?;
        println!("{:>6}: median {:.3} ms, mean {:.3} ms, {} params", row.variant, row.median_ms, row.mean_ms, row.params);
    }
    w.flush()?;
    run.outputs.push(a.out.clone());
    let (s, n) = (&report.rows[0], &report.rows[1]);
    println!(
        "latency ratio {:.3}; parameter delta {} (closed form {})",
        s.median_ms / n.median_ms,
        s.params as i64 - n.params as i64,
        shift_mlp_params(&r.model)
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = Some(a.common.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json")));
    let flags: Vec<_> = opt("train.epochs", &a.epochs).into_iter().collect();
    let r = resolve(&a.common, &flags)?;
    let mut axes = Vec::new();
    for ax in &a.axis {
        let add: &[AblationAxis] = match ax {
            AxisArg::ShiftRatio => &[AblationAxis::ShiftRatio],
            AxisArg::Selection => &[AblationAxis::Selection],
            AxisArg::Exchange => &[AblationAxis::Exchange],
            AxisArg::All => &AblationAxis::ALL,
        };
        axes.extend(add.iter().copied().filter(|x| !axes.contains(x)).collect::<Vec<_>>());
    }
    run.config = json!({ "model": r.model, "train": r.train, "synth": r.synth, "axes": axes, "data": a.data, "scenes": a.scenes, "jobs": a.jobs });
    let scenes = match &a.data {
        Some(dir) => dataset(dir, None).with_context(|| format!("reading dataset {}", dir.display()))?,
        None => synth_scenes(&r.synth, a.scenes, a.common.seed)?,
    };
    let report = run_ablation(&axes, &r.model, &r.train, &scenes, a.jobs)?;
    ensure_parent(&a.out)?;
    report.write_csv(&a.out)?;
    run.outputs.push(a.out.clone());
    for row in &report.rows {
        match (row.recall, row.loss) {
            (Some(rc), Some(l)) => println!("{:>12} {:>12}: recall {rc:.3}, loss {l:.5}", row.axis, row.value),
            _ => println!("{:>12} {:>12}: failed: {}", row.axis, row.value, row.error),
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, run: &mut Run) -> anyhow::Result<()> {
    run.manifest = a.common.manifest.clone().or_else(|| a.out.as_ref().map(|o| sibling(o, ".manifest.json")));
    run.config = json!({ "tol": GRADCHECK_TOL, "eps": 1e-5 });
    let rows = gradient_suite(a.common.seed)?;
    for r in &rows {
        println!("{:<20} {:>6} coords, {:>4} kinks skipped, max rel error {:.3e}", r.name, r.coords, r.skipped_kinks, r.max_rel_error);
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("worst relative error {worst:.3e}");
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_atomic(out, serde_json::to_string_pretty(&json!({ "rows": rows, "worst": worst }))?.as_bytes())?;
        run.outputs.push(out.clone());
    }
    if worst.is_nan() || worst >= GRADCHECK_TOL {
        bail!("worst relative error {worst:.3e} is not below {GRADCHECK_TOL:e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SHIFTSSD_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, common) = match &cli.command {
        Command::Gen(a) => ("gen", &a.common),
        Command::Train(a) => ("train", &a.common),
        Command::Detect(a) => ("detect", &a.common),
        Command::Probe(a) => ("probe", &a.common),
        Command::Bench(a) => ("bench", &a.common),
        Command::Ablate(a) => ("ablate", &a.common),
        Command::Gradcheck(a) => ("gradcheck", &a.common),
    };
    let start = Instant::now();
    let mut run = Run::default();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, &mut run),
        Command::Train(a) => cmd_train(a, &mut run),
        Command::Detect(a) => cmd_detect(a, &mut run),
        Command::Probe(a) => cmd_probe(a, &mut run),
        Command::Bench(a) => cmd_bench(a, &mut run),
        Command::Ablate(a) => cmd_ablate(a, &mut run),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut run),
    };
    if let Some(path) = &run.manifest {
        let manifest = RunManifest {
            subcommand: name.to_string(),
            config: run.config,
            seed: common.seed,
            git_describe: git_describe(),
            outputs: run.outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
            status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
            error: result.as_ref().err().map(|e| format!("{e:#}")),
        };
        let written = ensure_parent(path).and_then(|()| Ok(manifest.write(path)?));
        if let Err(e) = written {
            eprintln!("error: writing manifest {}: {e:#}", path.display());
            return ExitCode::from(2);
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
