use massflow::baseline::{load_clouds, save_clouds, BinningConfig};
use massflow::data::{load_dataset, load_run, ImageDims, Split, SplitRatios, DATASET_FILE};
use massflow::model::{ArchConfig, Checkpoint, ModelParams, Network, Preset};
use massflow::synthgen::{
    cloud_extent, generate_dataset, generate_dataset_with_clouds, load_oracle_masses, write_dataset, CloudConfig,
    SceneConfig, ScenarioMix,
};
use massflow::trainer::{predict_runs, run_loss, train, PenaltyTarget, TrainConfig};

fn small_scene() -> SceneConfig {
    SceneConfig {
        image: ImageDims::new(16, 16, 1),
        frames: (6, 10),
        ..Default::default()
    }
}

#[test]
fn dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let runs = generate_dataset(&small_scene(), 8, &ScenarioMix::default(), 3).unwrap();
    let idx = write_dataset(dir.path(), &runs, SplitRatios::default(), 3, true).unwrap();
    assert_eq!(idx.runs.len(), 8);
    let ds = load_dataset(&dir.path().join(DATASET_FILE)).unwrap();
    for o in &runs {
        let loaded = ds.runs.iter().find(|r| r.id == o.run.id).unwrap();
        assert_eq!(loaded, &o.run);
        let entry = idx.runs.iter().find(|e| e.id == o.run.id).unwrap();
        let run_dir = idx.run_dir(dir.path(), entry);
        assert_eq!(load_run(&run_dir).unwrap(), o.run);
        assert_eq!(load_oracle_masses(&run_dir).unwrap(), o.frame_masses);
    }
    assert_eq!(Split::ALL.iter().map(|s| ds.count(*s)).sum::<usize>(), 8);
}

#[test]
fn checkpoint_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let arch = ArchConfig::preset(Preset::Res9er, ImageDims::new(16, 16, 1), 9);
    let p = ModelParams::<f32>::build(&arch).unwrap();
    Checkpoint::from_params(&p).with_epoch(4).save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.meta.epoch, Some(4));
    assert_eq!(back.params::<f32>().unwrap(), p);
    // a flipped byte is caught by the digest
    let blob = dir.path().join("model.bin");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn clouds_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let scene = small_scene();
    let pairs = generate_dataset_with_clouds(&scene, &CloudConfig::default(), 4, &ScenarioMix::default(), 5).unwrap();
    let clouds: Vec<_> = pairs.into_iter().map(|p| p.1).collect();
    save_clouds(dir.path(), &clouds).unwrap();
    let back = load_clouds(dir.path()).unwrap();
    let bin = BinningConfig { extent: cloud_extent(&scene), ..Default::default() };
    for (a, b) in clouds.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.frames.len(), b.frames.len());
        let (va, vb) = (a.volumes(&bin).unwrap(), b.volumes(&bin).unwrap());
        for (x, y) in va.volumes.iter().zip(&vb.volumes) {
            // points are stored as f32
            assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0));
        }
    }
}

#[test]
fn short_training_lowers_train_loss() {
    let scene = small_scene();
    let runs = generate_dataset(&scene, 12, &ScenarioMix::only(massflow::synthgen::Scenario::Steady), 8).unwrap();
    let ds = massflow::data::split_dataset(runs.into_iter().map(|o| o.run).collect(), SplitRatios::default(), 8).unwrap();
    let arch = ArchConfig::preset(Preset::Res9er, scene.image, 2);
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, precision: massflow::model::Precision::F64, ..Default::default() };
    let net = Network::new(&arch).unwrap();
    let start = massflow::trainer::initial_params::<f64>(&ds, &arch, &cfg).unwrap();
    let trained = train::<f64>(&ds, &arch, &cfg).unwrap();
    let mean_loss = |p: &ModelParams<f64>| {
        let train_runs: Vec<_> = ds.runs_in(Split::Train).collect();
        train_runs
            .iter()
            .map(|r| run_loss(&net, p, r, cfg.lambda, PenaltyTarget::RawOutput).unwrap())
            .sum::<f64>()
            / train_runs.len() as f64
    };
    assert!(mean_loss(&trained.params) < mean_loss(&start));
    assert_eq!(trained.history.len(), 3);
    let test: Vec<_> = ds.runs_in(Split::Test).collect();
    let preds = predict_runs(&net, &trained.params, &test).unwrap();
    for (p, r) in preds.iter().zip(&test) {
        assert_eq!(p.frame_raw.len(), r.len());
        let total: f64 = p.frame_scaled.iter().sum();
        assert!((total - p.predicted_total).abs() <= 1e-9 * total.abs().max(1.0));
    }
}
