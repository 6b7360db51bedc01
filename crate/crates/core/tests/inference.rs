use std::path::{Path, PathBuf};

use slgan::config::TrainConfig;
use slgan::domain::{Domain, LatentCode};
use slgan::inference::{
    mean_abs_diff, FrozenModel, InferenceError, InterpolationMode, InterpolationSpec, ParamSource, RemovalGuidance,
};
use slgan::training::{save_checkpoint, ModelBundle};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/six")
}

fn config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.model.resolution = 16;
    c.model.trunk_down_stages = 2;
    c
}

fn model() -> (tempfile::TempDir, FrozenModel) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&ModelBundle::init(&config(), 9).unwrap(), &path).unwrap();
    let m = FrozenModel::load(&path).unwrap();
    (dir, m)
}

fn face(m: &FrozenModel, domain: &str, name: &str) -> slgan::inference::Face {
    let root = fixture();
    m.face_from_files(
        &root.join("images").join(domain).join(format!("{name}.png")),
        Some(&root.join("segs").join(domain).join(format!("{name}.png"))),
        Some(&root.join("landmarks").join(domain).join(format!("{name}.txt"))),
    )
    .unwrap()
}

#[test]
fn loaded_model_uses_ema_weights() {
    let (_d, m) = model();
    assert_eq!(m.source(), ParamSource::Ema);
    assert_eq!(m.resolution(), 16);
}

#[test]
fn latent_removal_is_seeded() {
    let (_d, m) = model();
    let src = face(&m, "makeup", "000");
    let run = |seed| m.remove(&src, &RemovalGuidance::Latent(LatentCode::from_seed(seed))).unwrap();
    let (a, b, c) = (run(3), run(3), run(4));
    assert!(a.tensor().bit_eq(b.tensor()));
    assert!(mean_abs_diff(&a, &c) > 0.0);
}

#[test]
fn reference_removal_uses_the_bare_code() {
    let (_d, m) = model();
    let src = face(&m, "makeup", "000");
    let bare = face(&m, "non-makeup", "001");
    let out = m.remove(&src, &RemovalGuidance::Reference(&bare)).unwrap();
    let code = m.style_code(&bare, Domain::NonMakeup).unwrap();
    assert!(out.tensor().bit_eq(m.render(&src, &code).unwrap().tensor()));
}

#[test]
fn sweep_endpoints_are_exact() {
    let (_d, m) = model();
    let src = face(&m, "non-makeup", "000");
    let rf = face(&m, "makeup", "002");
    let frames = m.strength_sweep(&src, Domain::NonMakeup, &rf, 3).unwrap();
    assert_eq!(frames.len(), 3);
    let own = m.style_code(&src, Domain::NonMakeup).unwrap();
    assert!(frames[0].tensor().bit_eq(m.render(&src, &own).unwrap().tensor()));
    assert!(frames[2].tensor().bit_eq(m.transfer(&src, &rf).unwrap().tensor()));

    let lat = m.latent_sweep(&src, 5, 6, 4, Domain::Makeup).unwrap();
    let at = |seed| m.render(&src, &m.latent_style(&LatentCode::from_seed(seed), Domain::Makeup).unwrap()).unwrap();
    assert!(lat[0].tensor().bit_eq(at(5).tensor()));
    assert!(lat[3].tensor().bit_eq(at(6).tensor()));
    assert!(matches!(
        m.latent_sweep(&src, 5, 6, 1, Domain::Makeup),
        Err(InferenceError::TooFewSteps(1))
    ));
}

#[test]
fn spec_modes_agree_with_direct_calls() {
    let (_d, m) = model();
    let src = face(&m, "non-makeup", "000");
    let refs = [face(&m, "makeup", "000"), face(&m, "makeup", "001")];
    let spec = |mode, weights: Vec<f64>, alpha| InterpolationSpec {
        weights,
        mode,
        alpha,
        latent_seeds: Some((1, 2)),
        domain: Domain::Makeup,
    };
    let one_hot = m.run(&src, &refs, &spec(InterpolationMode::StyleGuided, vec![1.0, 0.0], 0.0)).unwrap();
    assert!(one_hot.tensor().bit_eq(m.transfer(&src, &refs[0]).unwrap().tensor()));
    let full = m.run(&src, &refs, &spec(InterpolationMode::SourceBlend, vec![], 1.0)).unwrap();
    assert!(full.tensor().bit_eq(m.transfer(&src, &refs[0]).unwrap().tensor()));
    let lat = m.run(&src, &[], &spec(InterpolationMode::LatentGuided, vec![], 0.0)).unwrap();
    let z = m.latent_style(&LatentCode::from_seed(1), Domain::Makeup).unwrap();
    assert!(lat.tensor().bit_eq(m.render(&src, &z).unwrap().tensor()));
    assert!(matches!(
        m.run(&src, &refs, &spec(InterpolationMode::StyleGuided, vec![0.5, 0.6], 0.0)),
        Err(InferenceError::WeightSumViolation { .. })
    ));
}

#[test]
fn faces_are_resampled_to_the_model_resolution() {
    let (_d, m) = model();
    let f = face(&m, "makeup", "000");
    assert_eq!(f.image.resolution(), 16);
    let out = m.transfer(&f, &f).unwrap();
    assert_eq!(out.to_rgb8().dimensions(), (16, 16));
}
