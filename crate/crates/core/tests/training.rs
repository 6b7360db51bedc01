use std::path::{Path, PathBuf};

use slgan::config::TrainConfig;
use slgan::dataset::{load_manifest, LoadOptions, LoadedDataset};
use slgan::losses::parse_log;
use slgan::networks::NetKind;
use slgan::training::{fit, load_checkpoint, ModelBundle};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/six")
}

fn config(total: u64, every: u64) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.resolution = 16;
    c.model.trunk_down_stages = 2;
    c.batch_size = 2;
    c.total_steps = total;
    c.checkpoint_every = every;
    c.seed = 21;
    c
}

fn data(cfg: &TrainConfig) -> LoadedDataset {
    let index = load_manifest(&fixture(), cfg.model.resolution).unwrap();
    let opts = LoadOptions {
        resolution: cfg.model.resolution,
        eye_ring_px: cfg.eye_ring_px(),
        heatmap_sigma: cfg.heatmap_sigma,
    };
    LoadedDataset::load(&index, &opts).unwrap()
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let cfg = config(0, 1);
    let dir = tempfile::tempdir().unwrap();
    let init = ModelBundle::init(&cfg, 1).unwrap();
    let (bundle, out) = fit(init.clone(), &data(&cfg), dir.path(), |_| {}).unwrap();
    assert_eq!(bundle, init);
    assert!(out.reports.is_empty());
    assert_eq!(out.checkpoints, vec![dir.path().join("final.ckpt")]);
    assert_eq!(load_checkpoint(&out.final_checkpoint).unwrap(), init);
}

#[test]
fn checkpoint_cadence_and_log() {
    let cfg = config(5, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let (bundle, out) = fit(ModelBundle::init(&cfg, 1).unwrap(), &data(&cfg), dir.path(), |r| seen.push(r.step)).unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    assert_eq!(bundle.step, 5);
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["step_000002.ckpt", "step_000004.ckpt", "final.ckpt"]);
    assert_eq!(load_checkpoint(&dir.path().join("step_000004.ckpt")).unwrap().step, 4);
    let log = parse_log(&std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap()).unwrap();
    assert_eq!(log.len(), 5);
    for (a, b) in log.iter().zip(&out.reports) {
        assert!(a.bit_eq(b));
        assert!(a.total_g.is_finite() && a.total_d.is_finite());
        let want = a.generator_total(&cfg.weights);
        assert!((a.total_g - want).abs() < 1e-9 * want.abs().max(1.0), "{} vs {want}", a.total_g);
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let cfg = config(3, 100);
    let d = data(&cfg);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        fit(ModelBundle::init(&cfg, 4).unwrap(), &d, dir.path(), |_| {}).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    for (x, y) in ra.reports.iter().zip(&rb.reports) {
        assert!(x.bit_eq(y));
    }
    for k in NetKind::ALL {
        assert!(a.nets.get(k).bit_eq(b.nets.get(k)));
    }
}

#[test]
fn resolution_mismatch_is_rejected() {
    let cfg = config(1, 1);
    let mut other = cfg.clone();
    other.model.resolution = 32;
    let dir = tempfile::tempdir().unwrap();
    assert!(fit(ModelBundle::init(&other, 1).unwrap(), &data(&cfg), dir.path(), |_| {}).is_err());
}

#[test]
fn each_step_advances_the_counter_once() {
    let cfg = config(2, 100);
    let dir = tempfile::tempdir().unwrap();
    let start = ModelBundle::init(&cfg, 2).unwrap();
    let (end, _) = fit(start.clone(), &data(&cfg), dir.path(), |_| {}).unwrap();
    assert_eq!(end.step, 2);
    for k in NetKind::ALL {
        assert_eq!(end.adam[&k].t, 2, "{k:?}");
        assert!(!end.nets.get(k).bit_eq(start.nets.get(k)), "{k:?} unchanged");
    }
    assert!(!end.ema.gen.bit_eq(&start.ema.gen));
}
