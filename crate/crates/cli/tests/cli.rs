use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use massflow::baseline::{write_volume_dir, VolumeRun};
use massflow::data::{DatasetIndex, ImageDims};
use massflow::explain::HeatmapSidecar;
use massflow::model::{
    Activation, ArchConfig, BlockSpec, Checkpoint, ConvSpec, HeadSpec, InitScheme, ModelParams, OutputKind,
};
use massflow::report::Report;
use massflow::synthgen::{density_law, SceneConfig};
use serde_json::Value;

fn massflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_massflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = massflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    massflow(args).status.code().expect("exit code")
}

const SMALL: [&str; 4] = ["--set", "image={\"height\":16,\"width\":16,\"channels\":1}", "--set", "frames=[5,9]"];

fn gen_small(out: &Path, runs: usize, seed: u64) -> String {
    gen_small_with(out, runs, seed, &[])
}

fn gen_small_with(out: &Path, runs: usize, seed: u64, extra: &[&str]) -> String {
    let runs = runs.to_string();
    let seed = seed.to_string();
    let mut args = vec!["gen", "--runs", &runs, "--seed", &seed, "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args)
}

fn tiny_arch_json() -> String {
    let arch = ArchConfig {
        name: Some("tiny".into()),
        input: ImageDims::new(16, 16, 1),
        stem: ConvSpec { filters: 4, kernel: 3, stride: 2 },
        blocks: vec![BlockSpec { filters: 4, kernel: 3, stride: 1, activation: Activation::Elu }],
        head: HeadSpec { hidden: vec![], activation: Activation::Elu, output: OutputKind::Linear },
        init: InitScheme::HeNormal,
        seed: 0,
    };
    serde_json::to_string(&arch).unwrap()
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) {
    let arch = tiny_arch_json();
    let mut args = vec![
        "--deterministic",
        "train",
        "--data",
        data.to_str().unwrap(),
        "--arch",
        &arch,
        "--epochs",
        "2",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(extra);
    ok(&args);
}

#[test]
fn gen_writes_runs_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 10, 7);
    let idx = DatasetIndex::read(&d.join("dataset.json")).unwrap();
    assert_eq!(idx.runs.len(), 10);
    for e in &idx.runs {
        assert!(d.join(&e.dir).join("manifest.json").is_file());
        assert!(d.join(&e.dir).join("frames.f32").is_file());
    }
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let h1 = gen_small(&dir.path().join("a"), 6, 7);
    let h2 = gen_small(&dir.path().join("b"), 6, 7);
    assert_eq!(h1, h2);
    assert!(!h1.trim().is_empty());
    assert_eq!(
        fs::read(dir.path().join("a/dataset.json")).unwrap(),
        fs::read(dir.path().join("b/dataset.json")).unwrap()
    );
}

#[test]
fn gen_rejects_bad_mix_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = out.to_str().unwrap();
    assert_eq!(code(&["gen", "--runs", "4", "--out", o, "--mix", "steady=0.5,ramp=0.4"]), 2);
    assert_eq!(code(&["gen", "--runs", "4", "--out", o, "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["gen", "--runs", "4", "--out", o, "--set", "rho0=-1"]), 2);
    assert_eq!(code(&["gen", "--out", o]), 2);
}

#[test]
fn train_lr_zero_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 6, 1);
    let t = dir.path().join("t");
    train_tiny(&d, &t, &["--lr", "0"]);
    let init = Checkpoint::load(&t.join("init")).unwrap();
    let last = Checkpoint::load(&t.join("checkpoint")).unwrap();
    assert_eq!(init.blob(), last.blob());
}

#[test]
fn train_lambda_zero_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 6, 2);
    let t = dir.path().join("t");
    train_tiny(&d, &t, &["--lambda", "0", "--lr", "1e-3", "--checkpoint-every", "1"]);
    let hist = fs::read_to_string(t.join("history.jsonl")).unwrap();
    let lines: Vec<Value> = hist.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    assert!(t.join("checkpoints/epoch_0001/model.bin").is_file());
    let cfg: Value = serde_json::from_slice(&fs::read(t.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["lambda"], 0.0);
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 6, 3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_tiny(&d, &a, &["--lr", "1e-3"]);
    train_tiny(&d, &b, &["--lr", "1e-3"]);
    assert_eq!(fs::read(a.join("history.jsonl")).unwrap(), fs::read(b.join("history.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint/model.bin")).unwrap(), fs::read(b.join("checkpoint/model.bin")).unwrap());
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 6, 4);
    let t = dir.path().join("t");
    let (ds, ts) = (d.to_str().unwrap(), t.to_str().unwrap());
    assert_eq!(code(&["train", "--data", ds, "--out", ts, "--lambda", "-1"]), 2);
    assert_eq!(code(&["train", "--data", ds, "--out", ts, "--arch", "res99"]), 2);
    assert_eq!(code(&["train", "--data", ds, "--out", ts, "--set", "arch.nope=1"]), 2);
    let missing = dir.path().join("nothing");
    assert_eq!(code(&["train", "--data", missing.to_str().unwrap(), "--out", ts]), 2);
}

/// Per-frame oracle masses of every test run as a predictions file.
fn oracle_predictions(d: &Path, out: &Path) {
    let idx = DatasetIndex::read(&d.join("dataset.json")).unwrap();
    let mut preds = serde_json::Map::new();
    for e in idx.runs.iter().filter(|e| e.split.as_str() == "test") {
        let m: Value = serde_json::from_slice(&fs::read(d.join(&e.dir).join("manifest.json")).unwrap()).unwrap();
        preds.insert(e.id.clone(), m["oracle_frame_masses"].clone());
    }
    fs::write(out, serde_json::to_vec(&preds).unwrap()).unwrap();
}

#[test]
fn eval_of_oracle_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small_with(&d, 10, 5, &["--mix", "steady=0.5,ramp=0.5"]);
    let p = dir.path().join("p.json");
    oracle_predictions(&d, &p);
    let e = dir.path().join("e");
    ok(&["eval", "--predictions", p.to_str().unwrap(), "--data", d.to_str().unwrap(), "--out", e.to_str().unwrap(), "--oracle-diagnostics"]);
    let r: Report = serde_json::from_slice(&fs::read(e.join("report.json")).unwrap()).unwrap();
    assert!((r.accuracy.mean - 100.0).abs() < 1e-9, "{}", r.accuracy.mean);
    assert!((r.oracle_r2.unwrap() - 1.0).abs() < 1e-12);
    assert!(e.join("errors.csv").is_file());
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 6, 6);
    let e = dir.path().join("e");
    let nothing = dir.path().join("nothing");
    assert_eq!(
        code(&["eval", "--checkpoint", nothing.to_str().unwrap(), "--data", d.to_str().unwrap(), "--out", e.to_str().unwrap()]),
        2
    );
    assert_eq!(code(&["eval", "--data", d.to_str().unwrap(), "--out", e.to_str().unwrap()]), 2);
}

#[test]
fn eval_reads_oracle_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 10, 8);
    let t = dir.path().join("t");
    train_tiny(&d, &t, &["--lr", "0"]);
    // make every oracle entry unreadable
    let idx = DatasetIndex::read(&d.join("dataset.json")).unwrap();
    for e in &idx.runs {
        let path = d.join(&e.dir).join("manifest.json");
        let mut m: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["oracle_frame_masses"] = Value::String("hidden".into());
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    }
    let ck = t.join("checkpoint");
    let e = dir.path().join("e");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--data", d.to_str().unwrap(), "--out", e.to_str().unwrap()];
    ok(&args);
    let mut with = args.to_vec();
    with.push("--oracle-diagnostics");
    assert_eq!(code(&with), 3);
}

fn pseudo(i: usize, r: usize) -> f64 {
    (((i * 7919 + r * 104_729 + 13) % 1000) as f64) / 1000.0
}

/// Volume runs with totals from `density(V_true)`; `bias` is added to the
/// volumes written out.
fn volume_runs(density: impl Fn(f64) -> f64, bias: f64) -> Vec<VolumeRun> {
    (0..12)
        .map(|r| {
            let level = 1.0 + 6.0 * r as f64 / 11.0;
            let n = 30 + r;
            let vols: Vec<f64> = (0..n).map(|i| level * (0.6 + 0.8 * pseudo(i, r))).collect();
            let speeds: Vec<f64> = (0..n).map(|i| 0.7 + 0.6 * pseudo(i + 500, r)).collect();
            let t = 0.1;
            let total = vols.iter().zip(&speeds).map(|(v, s)| density(*v) * v * s * t).sum();
            VolumeRun {
                id: format!("r{r:02}"),
                volumes: vols.iter().map(|v| v + bias).collect(),
                speeds,
                capture_interval: t,
                total_mass: total,
            }
        })
        .collect()
}

fn run_baseline(dir: &Path, runs: &[VolumeRun]) -> Value {
    let vd = dir.join("vol");
    write_volume_dir(&vd, runs).unwrap();
    let out = dir.join("fit");
    ok(&["baseline", "--volumes", vd.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    serde_json::from_slice(&fs::read(out.join("fit.json")).unwrap()).unwrap()
}

fn curve(fit: &Value) -> Vec<(f64, f64)> {
    serde_json::from_value(fit["density_curve"].clone()).unwrap()
}

#[test]
fn baseline_recovers_constant_density() {
    let dir = tempfile::tempdir().unwrap();
    let runs = volume_runs(|_| 0.8, 0.0);
    let fit = run_baseline(dir.path(), &runs);
    let residuals: Vec<f64> = serde_json::from_value(fit["fit"]["residuals"].clone()).unwrap();
    for (r, run) in residuals.iter().zip(&runs) {
        assert!(r.abs() < 0.01 * run.total_mass);
    }
    for (_, f) in curve(&fit) {
        assert!((f - 0.8).abs() < 0.05 * 0.8, "{f}");
    }
}

#[test]
fn baseline_recovers_volume_bias() {
    let dir = tempfile::tempdir().unwrap();
    let b = 0.5;
    let fit = run_baseline(dir.path(), &volume_runs(|_| 0.8, b));
    let beta = fit["fit"]["params"]["beta"].as_f64().unwrap();
    assert!((0.5 * b..=1.5 * b).contains(&beta), "{beta}");
}

#[test]
fn baseline_follows_decay_law() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SceneConfig { rho0: 1.0, decay_c: 0.3, gamma: 1.0, ..Default::default() };
    let fit = run_baseline(dir.path(), &volume_runs(|v| density_law(v, &cfg).unwrap(), 0.0));
    let c = curve(&fit);
    // Spearman rank correlation of V against f(V)
    let rank = |xs: Vec<f64>| {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut r = vec![0.0; xs.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let rv = rank(c.iter().map(|p| p.0).collect());
    let rf = rank(c.iter().map(|p| p.1).collect());
    let m = (c.len() - 1) as f64 / 2.0;
    let cov: f64 = rv.iter().zip(&rf).map(|(a, b)| (a - m) * (b - m)).sum();
    let var: f64 = rv.iter().map(|a| (a - m) * (a - m)).sum();
    assert!(cov / var <= -0.9, "{}", cov / var);
}

fn zero_checkpoint(dir: &Path) {
    let arch: ArchConfig = serde_json::from_str(&tiny_arch_json()).unwrap();
    let p = ModelParams::<f32>::zeros(&arch).unwrap();
    Checkpoint::from_params(&p).save(dir).unwrap();
}

#[test]
fn explain_zero_checkpoint_gives_black_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 4, 9);
    let ck = dir.path().join("ck");
    zero_checkpoint(&ck);
    let idx = DatasetIndex::read(&d.join("dataset.json")).unwrap();
    let run = d.join(&idx.runs[0].dir);
    let out = dir.path().join("x");
    ok(&[
        "explain", "--checkpoint", ck.to_str().unwrap(), "--layer", "block1", "--run", run.to_str().unwrap(),
        "--frames", "0,1", "--out", out.to_str().unwrap(), "--similarity",
    ]);
    for j in ["0000", "0001"] {
        let png = fs::read(out.join(format!("heatmap_block1_{j}.png"))).unwrap();
        let img = image_bytes(&png);
        assert_eq!(img.len(), 16 * 16);
        assert!(img.iter().all(|v| *v == 0));
        let side: HeatmapSidecar =
            serde_json::from_slice(&fs::read(out.join(format!("heatmap_block1_{j}.json"))).unwrap()).unwrap();
        assert_eq!((side.layer.as_str(), side.height, side.width, side.normalized), ("block1", 16, 16, false));
        assert_eq!(side.raw_max, 0.0);
    }
    assert!(out.join("similarity_block1.json").is_file());
}

/// Grey levels of an 8-bit PNG.
fn image_bytes(png: &[u8]) -> Vec<u8> {
    image::load_from_memory(png).unwrap().to_luma8().into_raw()
}

#[test]
fn explain_rejects_unknown_and_dense_layers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 4, 10);
    let ck = dir.path().join("ck");
    zero_checkpoint(&ck);
    let idx = DatasetIndex::read(&d.join("dataset.json")).unwrap();
    let run = d.join(&idx.runs[0].dir);
    let out = dir.path().join("x");
    for layer in ["block7", "output"] {
        assert_eq!(
            code(&["explain", "--checkpoint", ck.to_str().unwrap(), "--layer", layer, "--run", run.to_str().unwrap(), "--out", out.to_str().unwrap()]),
            2
        );
    }
}

#[test]
fn report_aggregates_seeds_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    gen_small(&d, 10, 11);
    let mut evals = Vec::new();
    let mut hists = Vec::new();
    for seed in ["1", "2"] {
        let t = dir.path().join(format!("t{seed}"));
        let arch = tiny_arch_json();
        ok(&["train", "--data", d.to_str().unwrap(), "--arch", &arch, "--epochs", "2", "--seed", seed, "--lr", "1e-3", "--out", t.to_str().unwrap()]);
        let e = dir.path().join(format!("e{seed}"));
        let ck = t.join("checkpoint");
        ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", d.to_str().unwrap(), "--split", "val", "--out", e.to_str().unwrap()]);
        evals.push(e.to_str().unwrap().to_string());
        hists.push(t.join("history.jsonl").to_str().unwrap().to_string());
    }
    let out = dir.path().join("r");
    let mut args = vec!["report", "--out", out.to_str().unwrap(), "--loss-threshold", "1e9", "--eval"];
    args.extend(evals.iter().map(String::as_str));
    args.push("--history");
    args.extend(hists.iter().map(String::as_str));
    ok(&args);
    let s: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["reports"], 2);
    let table = fs::read_to_string(out.join("convergence.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",1")));
}
