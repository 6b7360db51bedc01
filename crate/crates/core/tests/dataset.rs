use std::path::{Path, PathBuf};

use slgan::config::TrainConfig;
use slgan::dataset::{load_manifest, DatasetError, LoadOptions, LoadedDataset};
use slgan::domain::Domain;
use slgan::fixtures::{write_synthetic_dataset, SyntheticSpec};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn opts(res: usize) -> LoadOptions {
    let cfg = TrainConfig::desk();
    LoadOptions {
        resolution: res,
        eye_ring_px: cfg.eye_ring_px(),
        heatmap_sigma: cfg.heatmap_sigma,
    }
}

#[test]
fn bundled_fixtures_have_authored_counts() {
    for (name, want) in [("six", (3, 3)), ("eight", (4, 4))] {
        let index = load_manifest(&fixture(name), 64).unwrap();
        assert_eq!(index.counts(), want, "{name}");
        assert_eq!(index.landmark_paths.len(), want.0 + want.1);
        let data = LoadedDataset::load(&index, &opts(64)).unwrap();
        assert_eq!(data.counts()[Domain::Makeup.index()], want.0);
        assert_eq!(data.counts()[Domain::NonMakeup.index()], want.1);
        for s in data.samples.iter().flatten() {
            assert!(s.has_landmarks);
            assert!(s.masks.lips.count() > 0 && s.masks.face.count() > 0, "{}", s.id);
            let img = s.image.tensor();
            assert_eq!(img.shape(), [3, 64, 64]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn full_dataset_counts_when_present() {
    let Some(root) = std::env::var_os("SLGAN_MT_ROOT") else {
        eprintln!("SLGAN_MT_ROOT not set; skipping");
        return;
    };
    let index = load_manifest(Path::new(&root), 256).unwrap();
    assert_eq!(index.counts(), (2719, 1115));
}

#[test]
fn batches_are_seeded_and_cross_domain() {
    let index = load_manifest(&fixture("six"), 32).unwrap();
    let data = LoadedDataset::load(&index, &opts(32)).unwrap();
    let a = data.sample_training_batch(5, 4).unwrap();
    let b = data.sample_training_batch(5, 4).unwrap();
    assert_eq!(a.source_ids, b.source_ids);
    assert_eq!(a.reference_ids, b.reference_ids);
    assert_eq!(a.source_images, b.source_images);
    for (s, r) in a.source_domains.iter().zip(&a.reference_domains) {
        assert_ne!(s, r);
    }
    assert_eq!(a.source_images.shape(), [4, 3, 32, 32]);
    assert_eq!(a.source_heatmaps.shape(), [4, 1, 32, 32]);
}

#[test]
fn missing_parsing_map_is_an_orphan() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        makeup: 2,
        non_makeup: 1,
        size: 16,
        seed: 1,
        landmarks: false,
    };
    write_synthetic_dataset(dir.path(), &spec).unwrap();
    let index = load_manifest(dir.path(), 16).unwrap();
    assert_eq!(index.counts(), (2, 1));
    assert!(index.landmark_paths.is_empty());
    std::fs::remove_file(dir.path().join("segs/makeup/001.png")).unwrap();
    assert!(matches!(
        load_manifest(dir.path(), 16),
        Err(DatasetError::OrphanImage(id)) if id == "makeup/001.png"
    ));
}
