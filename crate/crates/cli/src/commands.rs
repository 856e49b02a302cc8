use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use massflow::baseline::{
    fit_baseline, load_clouds, read_volume_dir, BinningConfig, CloudRun, FitConfig, FitResult, VolumeRun,
};
use massflow::data::{load_run, DatasetIndex, Dataset, Run, Split, SplitRatios, index_path, load_dataset};
use massflow::explain::{grad_cam_with, redundant_pairs, feature_similarity, Map2};
use massflow::model::{Activation, ArchConfig, Checkpoint, ModelParams, Network, Precision, Real};
use massflow::report::{mean_std, r_squared, Report, RunPrediction};
use massflow::synthgen::{
    cloud_extent, generate_dataset, generate_dataset_with_clouds, load_oracle_masses, write_clouds, write_dataset,
    CloudConfig, SceneConfig, ScenarioMix,
};
use massflow::trainer::{initial_params, predict_runs, train_with, EpochRecord, TrainConfig};
use massflow::{Error, Result};

use crate::overrides::{apply, check_consumed, keys};
use crate::{BaselineArgs, EvalArgs, ExplainArgs, GenArgs, ReportArgs, TrainArgs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::Io { path: path.to_path_buf(), source: e }
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

/// A config file, when given, else the default.
fn base_config<T: Default + for<'de> Deserialize<'de>>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", p.display())),
            other => other,
        }),
        None => Ok(T::default()),
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad ratio `{x}`"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [a, b, c] => SplitRatios::new(a, b, c),
        _ => Err(Error::Config("ratios need three values".into())),
    }
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let base: SceneConfig = base_config(a.config.as_ref())?;
    check_consumed(&a.set, &["cloud"], &keys(&base)?)?;
    let mut scene: SceneConfig = apply(&base, &a.set, "")?;
    scene.seed = a.seed;
    scene.validate()?;
    let mix = match &a.mix {
        Some(m) => ScenarioMix::parse(m)?,
        None => ScenarioMix::default(),
    };
    let ratios = parse_ratios(&a.ratios)?;
    mkdir(&a.out)?;
    let (runs, clouds) = if a.clouds {
        let cc: CloudConfig = apply(&CloudConfig::default(), &a.set, "cloud")?;
        let both = generate_dataset_with_clouds(&scene, &cc, a.runs, &mix, a.seed)?;
        write_json(&a.out.join("cloud.json"), &cc)?;
        let (r, c): (Vec<_>, Vec<_>) = both.into_iter().unzip();
        (r, Some(c))
    } else {
        (generate_dataset(&scene, a.runs, &mix, a.seed)?, None)
    };
    let idx = write_dataset(&a.out, &runs, ratios, a.seed, !a.no_stratify_empty)?;
    if let Some(c) = clouds {
        let dir = a.out.join("clouds");
        write_clouds(&dir, &c)?;
        let bin = BinningConfig { extent: cloud_extent(&scene), ..Default::default() };
        write_json(&dir.join("binning.json"), &bin)?;
    }
    write_json(&a.out.join("scene.json"), &scene)?;
    println!("{}", idx.hash.unwrap_or_default());
    Ok(())
}

/// Architecture from a preset name, a JSON file or inline JSON.
fn resolve_arch(spec: &str, data: &Dataset, seed: u64) -> Result<ArchConfig> {
    let input = data
        .runs
        .iter()
        .find_map(|r| r.frames.first().map(|f| f.image.dims()))
        .ok_or_else(|| Error::Config("dataset has no frames".into()))?;
    let path = Path::new(spec);
    if !spec.trim_start().starts_with('{') && path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        return ArchConfig::parse(&text, input, seed);
    }
    ArchConfig::parse(spec, input, seed)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = base_config(a.config.as_ref())?;
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.penalty_target {
        cfg.penalty_target = v.parse()?;
    }
    if let Some(v) = &a.optimizer {
        cfg.optimizer = v.parse()?;
    }
    if let Some(v) = &a.lr_schedule {
        cfg.lr_schedule = v.parse()?;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.clip_norm {
        cfg.clip_norm = Some(v);
    }
    if let Some(v) = &a.precision {
        cfg.precision = v.parse()?;
    }
    check_consumed(&a.set, &["arch"], &keys(&cfg)?)?;
    let cfg: TrainConfig = apply(&cfg, &a.set, "")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let data = load_dataset(&a.data)?;
    let mut arch = resolve_arch(&a.arch, &data, cfg.seed)?;
    if let Some(act) = &a.activation {
        arch = arch.with_activation(act.parse::<Activation>()?);
    }
    let arch: ArchConfig = apply(&arch, &a.set, "arch")?;
    arch.validate()?;
    mkdir(&a.out)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    write_json(&a.out.join("arch.json"), &arch)?;
    match cfg.precision {
        Precision::F32 => run_training::<f32>(a, &data, &arch, &cfg),
        Precision::F64 => run_training::<f64>(a, &data, &arch, &cfg),
    }
}

fn run_training<T: Real>(a: &TrainArgs, data: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<()> {
    let init: ModelParams<T> = initial_params(data, arch, cfg)?;
    Checkpoint::from_params(&init).with_epoch(0).save(&a.out.join("init"))?;
    let hist_path = a.out.join("history.jsonl");
    let mut hist = fs::File::create(&hist_path).map_err(io_err(&hist_path))?;
    let every = a.checkpoint_every.unwrap_or(0);
    let trained = train_with::<T>(data, arch, cfg, |rec: &EpochRecord, p: &ModelParams<T>| {
        let line = serde_json::to_string(rec)?;
        writeln!(hist, "{line}").map_err(io_err(&hist_path))?;
        if every > 0 && rec.epoch % every == 0 {
            Checkpoint::from_params(p)
                .with_epoch(rec.epoch)
                .save(&a.out.join("checkpoints").join(format!("epoch_{:04}", rec.epoch)))?;
        }
        Ok(())
    })?;
    Checkpoint::from_params(&trained.params)
        .with_epoch(cfg.epochs)
        .save(&a.out.join("checkpoint"))?;
    if let Some(last) = trained.history.last() {
        println!("epoch {} train_loss {} val_accuracy {:?}", last.epoch, last.train_loss, last.val_accuracy);
    }
    Ok(())
}

/// Runs of one split, with their archive directories.
fn split_runs(data: &Path, split: Split) -> Result<Vec<(Run, PathBuf)>> {
    let index_file = index_path(data);
    let idx = DatasetIndex::read(&index_file)?;
    let root = index_file.parent().unwrap_or(Path::new(".")).to_path_buf();
    idx.runs
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let dir = idx.run_dir(&root, e);
            Ok((load_run(&dir)?, dir))
        })
        .collect()
}

fn checkpoint_predictions<T: Real>(ck: &Checkpoint, runs: &[&Run]) -> Result<Vec<RunPrediction>> {
    let params: ModelParams<T> = ck.params()?;
    let net = Network::new(params.arch())?;
    predict_runs(&net, &params, runs)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let loaded = split_runs(&a.data, split)?;
    let runs: Vec<&Run> = loaded.iter().map(|(r, _)| r).filter(|r| !r.is_empty()).collect();
    if runs.is_empty() {
        return Err(Error::Config(format!("split {} has no runs", split.as_str())));
    }
    let preds = if let Some(ck_dir) = &a.checkpoint {
        let ck = Checkpoint::load(ck_dir)?;
        match ck.meta.precision {
            Precision::F32 => checkpoint_predictions::<f32>(&ck, &runs)?,
            Precision::F64 => checkpoint_predictions::<f64>(&ck, &runs)?,
        }
    } else {
        let path = a.predictions.as_ref().expect("clap requires one source");
        let mut given: BTreeMap<String, Vec<f64>> = read_json(path)?;
        runs.iter()
            .map(|r| {
                let raw = given
                    .remove(&r.id)
                    .ok_or_else(|| Error::Config(format!("no predictions for run {}", r.id)))?;
                if raw.len() != r.len() {
                    return Err(Error::Dimension(format!("run {}: {} predictions for {} frames", r.id, raw.len(), r.len())));
                }
                let scaled = raw.iter().zip(&r.frames).map(|(p, f)| p * f.speed * f.capture_interval).collect();
                Ok(RunPrediction::new(r.id.clone(), raw, scaled, r.total_mass))
            })
            .collect::<Result<Vec<_>>>()?
    };
    if preds.iter().any(|p| !p.predicted_total.is_finite()) {
        return Err(Error::Numeric { layer: "output".into() });
    }
    let mut report = Report::build(split.as_str(), &preds, a.bins, a.threshold_sigma)?;
    if a.oracle_diagnostics {
        let (mut pred, mut oracle) = (Vec::new(), Vec::new());
        for (p, (_, dir)) in preds.iter().zip(loaded.iter().filter(|(r, _)| !r.is_empty())) {
            let m = load_oracle_masses(dir)?;
            if m.len() != p.frame_raw.len() {
                return Err(Error::CorruptArchive(format!("{}: oracle length mismatch", dir.display())));
            }
            pred.extend(&p.frame_raw);
            oracle.extend(m);
        }
        report.oracle_r2 = Some(r_squared(&pred, &oracle));
    }
    report.write(&a.out, &preds)?;
    println!(
        "accuracy {:.4} ± {:.4} over {} runs",
        report.accuracy.mean, report.accuracy.std, report.accuracy.runs
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineOutput<'a> {
    fit: &'a FitResult,
    fit_runs: Vec<String>,
    eval_runs: Vec<String>,
    /// `(V, f(V - beta))` over the observed volume range.
    density_curve: Vec<(f64, f64)>,
}

fn pick(runs: Vec<VolumeRun>, ids: Option<&BTreeMap<String, Split>>, split: &str) -> Result<Vec<VolumeRun>> {
    let Some(ids) = ids else { return Ok(runs) };
    let s: Split = split.parse()?;
    Ok(runs.into_iter().filter(|r| ids.get(&r.id) == Some(&s)).collect())
}

pub fn baseline(a: &BaselineArgs) -> Result<()> {
    check_consumed(&a.set, &["fit", "bin"], &[])?;
    let mut fit_cfg: FitConfig = apply(&FitConfig::default(), &a.set, "fit")?;
    if !a.set.iter().any(|o| o.path == ["fit", "seed"]) {
        fit_cfg.seed = a.seed;
    }
    let runs = if let Some(dir) = &a.volumes {
        read_volume_dir(dir)?
    } else {
        let dir = a.clouds.as_ref().expect("clap requires one source");
        let base: BinningConfig = match read_json(&dir.join("binning.json")) {
            Ok(b) => b,
            Err(Error::NotFound(_)) => BinningConfig::default(),
            Err(e) => return Err(e),
        };
        let bin: BinningConfig = apply(&base, &a.set, "bin")?;
        let clouds: Vec<CloudRun> = load_clouds(dir)?;
        clouds.iter().map(|c| c.volumes(&bin)).collect::<Result<_>>()?
    };
    let labels = match &a.data {
        Some(d) => Some(DatasetIndex::read(&index_path(d))?.runs.into_iter().map(|e| (e.id, e.split)).collect()),
        None => None,
    };
    let fit_runs = pick(runs.clone(), labels.as_ref(), &a.fit_split)?;
    let eval_runs = pick(runs, labels.as_ref(), &a.eval_split)?;
    let fit = fit_baseline(&fit_runs, None, &fit_cfg)?;
    for d in &fit.diagnostics {
        log::warn!("{d}");
    }
    let vols: Vec<f64> = fit_runs.iter().flat_map(|r| r.volumes.iter().copied()).collect();
    let (lo, hi) = vols.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let density_curve = (0..=50)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / 50.0;
            (v, fit.params.density((v - fit.params.beta).max(0.0)))
        })
        .collect();
    mkdir(&a.out)?;
    write_json(
        &a.out.join("fit.json"),
        &BaselineOutput {
            fit: &fit,
            fit_runs: fit_runs.iter().map(|r| r.id.clone()).collect(),
            eval_runs: eval_runs.iter().map(|r| r.id.clone()).collect(),
            density_curve,
        },
    )?;
    let preds: Vec<RunPrediction> = eval_runs
        .iter()
        .map(|r| {
            let scaled: Vec<f64> = r
                .volumes
                .iter()
                .zip(&r.speeds)
                .map(|(&v, &s)| massflow::baseline::predict_mass_increment(v, &fit.params, s, r.capture_interval))
                .collect();
            let raw = scaled
                .iter()
                .zip(&r.speeds)
                .map(|(m, s)| if *s > 0.0 { m / (s * r.capture_interval) } else { 0.0 })
                .collect();
            RunPrediction::new(r.id.clone(), raw, scaled, r.total_mass)
        })
        .collect();
    if preds.iter().any(|p| !p.is_empty_run()) {
        let report = Report::build(&a.eval_split, &preds, 20, 3.0)?;
        report.write(&a.out.join("report"), &preds)?;
        println!("baseline accuracy {:.4} ± {:.4}", report.accuracy.mean, report.accuracy.std);
    }
    println!("fit loss {} converged {}", fit.loss, fit.converged);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimilarityOutput {
    layer: String,
    frame: usize,
    maps: usize,
    min_score: f64,
    pairs: Vec<(usize, usize, f64)>,
}

fn explain_with<T: Real>(a: &ExplainArgs, ck: &Checkpoint, run: &Run) -> Result<()> {
    let params: ModelParams<T> = ck.params()?;
    let net = Network::new(params.arch())?;
    for &j in &a.frames {
        let frame = run
            .frames
            .get(j)
            .ok_or_else(|| Error::Config(format!("run {} has no frame {j}", run.id)))?;
        let hm = grad_cam_with(&net, &params, &frame.image, &a.layer)?;
        hm.save(&a.out, &format!("heatmap_{}_{j:04}", a.layer))?;
    }
    if a.similarity {
        let j = a.frames.first().copied().unwrap_or(0);
        let image = &run.frames.get(j).ok_or_else(|| Error::Config(format!("no frame {j}")))?.image;
        let maps = net.feature_maps(&params, image, &a.layer)?;
        let pairs = redundant_pairs(&maps, a.min_score)?;
        if let Some(&(p, q, _)) = pairs.first() {
            let s = feature_similarity(&Map2::from_maps(&maps, p)?, &Map2::from_maps(&maps, q)?)?;
            s.save_diff_png(&a.out.join(format!("similarity_{}_{p}_{q}.png", a.layer)))?;
        }
        write_json(
            &a.out.join(format!("similarity_{}.json", a.layer)),
            &SimilarityOutput { layer: a.layer.clone(), frame: j, maps: maps.count(), min_score: a.min_score, pairs },
        )?;
    }
    Ok(())
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let run = load_run(&a.run)?;
    mkdir(&a.out)?;
    match ck.meta.precision {
        Precision::F32 => explain_with::<f32>(a, &ck, &run),
        Precision::F64 => explain_with::<f64>(a, &ck, &run),
    }
}

#[derive(Debug, Serialize)]
struct SeedSummary {
    reports: usize,
    /// Mean and std of the per-seed mean accuracies.
    accuracy_across_seeds: (f64, f64),
    /// Mean over seeds of the per-run accuracy std.
    accuracy_std_across_runs: f64,
    smoothness_across_seeds: (f64, f64),
    per_seed: Vec<(String, f64, f64)>,
}

pub fn report(a: &ReportArgs) -> Result<()> {
    if a.evals.is_empty() && a.histories.is_empty() {
        return Err(Error::Config("give --eval and/or --history inputs".into()));
    }
    mkdir(&a.out)?;
    if !a.evals.is_empty() {
        let reports: Vec<Report> = a.evals.iter().map(|d| read_json(&d.join("report.json"))).collect::<Result<_>>()?;
        let means: Vec<f64> = reports.iter().map(|r| r.accuracy.mean).collect();
        let stds: Vec<f64> = reports.iter().map(|r| r.accuracy.std).collect();
        let smooth: Vec<f64> = reports.iter().map(|r| r.mean_smoothness).collect();
        let summary = SeedSummary {
            reports: reports.len(),
            accuracy_across_seeds: mean_std(&means),
            accuracy_std_across_runs: mean_std(&stds).0,
            smoothness_across_seeds: mean_std(&smooth),
            per_seed: a
                .evals
                .iter()
                .zip(&reports)
                .map(|(d, r)| (d.display().to_string(), r.accuracy.mean, r.accuracy.std))
                .collect(),
        };
        write_json(&a.out.join("summary.json"), &summary)?;
        println!(
            "accuracy {:.4} ± {:.4} across {} seeds",
            summary.accuracy_across_seeds.0,
            summary.accuracy_across_seeds.1,
            summary.reports
        );
    }
    if !a.histories.is_empty() {
        let mut table = String::from("history,epochs,final_train_loss,epochs_to_threshold\n");
        for h in &a.histories {
            let text = fs::read_to_string(h).map_err(io_err(h))?;
            let recs: Vec<EpochRecord> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(Error::from))
                .collect::<Result<_>>()?;
            let reached = a
                .loss_threshold
                .and_then(|t| recs.iter().find(|r| r.train_loss <= t).map(|r| r.epoch.to_string()))
                .unwrap_or_default();
            let last = recs.last().map(|r| r.train_loss.to_string()).unwrap_or_default();
            table.push_str(&format!("{},{},{last},{reached}\n", h.display(), recs.len()));
        }
        let path = a.out.join("convergence.csv");
        fs::write(&path, &table).map_err(io_err(&path))?;
        print!("{table}");
    }
    Ok(())
}
