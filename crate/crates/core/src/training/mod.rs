//! Optimization: Adam, EMA shadows, the alternating D/G step and the fit loop.

mod checkpoint;
mod fit;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use fit::{batch_seed, fit, FitOutcome};

use crate::autograd::{Graph, Tensor, Var};
use crate::config::{ConfigError, GuidanceSchedule, TrainConfig};
use crate::dataset::{DatasetError, TrainingBatch};
use crate::domain::LatentCode;
use crate::losses::{self, LossError, LossReport};
use crate::networks::{arch, Binding, NetKind, NetworkError, Networks, Params};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("batch does not fit the model: {0}")]
    BatchMismatch(String),
}

/// First and second Adam moments of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(p: &Params) -> Self {
        let z = Params(
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One bias-corrected Adam step with weight decay applied to the parameters
/// directly (`p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`), not through the moments.
pub fn adam_update(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hp: &AdamHyper,
) {
    state.t += 1;
    let c1 = 1.0 - hp.beta1.powi(state.t as i32);
    let c2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (name, g) in grads {
        let p = params.0.get_mut(name).expect("gradient for a known parameter");
        let m = state.m.0.get_mut(name).expect("moment for a known parameter");
        let v = state.v.0.get_mut(name).expect("moment for a known parameter");
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            p[i] -= hp.lr * (step + hp.weight_decay * p[i]);
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·current`, parameter by parameter.
pub fn ema_update(shadow: &mut Params, current: &Params, decay: f64) {
    for (name, s) in shadow.iter_mut() {
        let c = current.get(name);
        for (a, &b) in s.data_mut().iter_mut().zip(c.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Exponential-moving-average copies of the inference-facing networks.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaParams {
    pub se: Params,
    pub mn: Params,
    pub gen: Params,
}

/// Live networks, EMA shadows, optimizer state and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub nets: Networks,
    pub ema: EmaParams,
    pub adam: BTreeMap<NetKind, AdamState>,
    pub step: u64,
}

impl ModelBundle {
    /// He-initialized networks with EMA shadows equal to the weights.
    pub fn init(config: &TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let nets = Networks::init(&config.model, seed);
        let ema = EmaParams {
            se: nets.se.clone(),
            mn: nets.mn.clone(),
            gen: nets.gen.clone(),
        };
        let adam = NetKind::ALL
            .iter()
            .map(|&k| (k, AdamState::zeros_like(nets.get(k))))
            .collect();
        Ok(Self {
            config: config.clone(),
            nets,
            ema,
            adam,
            step: 0,
        })
    }

    fn hyper(&self, kind: NetKind) -> AdamHyper {
        let c = &self.config;
        let lr = match kind {
            NetKind::StyleEncoder => c.lr_se,
            NetKind::Mapping => c.lr_mn,
            NetKind::Generator => c.lr_g,
            NetKind::Discriminator => c.lr_d,
        };
        AdamHyper {
            lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }

    fn apply(&mut self, kind: NetKind, grads: &BTreeMap<String, Tensor>) {
        let hp = self.hyper(kind);
        let state = self.adam.get_mut(&kind).expect("optimizer state per network");
        adam_update(self.nets.get_mut(kind), grads, state, &hp);
    }

    /// Move the G, SE and MN shadows toward the live weights.
    pub fn update_ema(&mut self, decay: f64) {
        ema_update(&mut self.ema.se, &self.nets.se, decay);
        ema_update(&mut self.ema.mn, &self.nets.mn, decay);
        ema_update(&mut self.ema.gen, &self.nets.gen, decay);
    }
}

/// How the target style of a step is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guidance {
    /// `MN(z, ĉ)` from a sampled latent code.
    Latent,
    /// `SE(reference, ĉ)` from the batch's reference image.
    Style,
}

/// Random draws and mode selection of one step, derived from `(seed, step)`.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub z1: Tensor,
    pub z2: Tensor,
    pub modes: Vec<Guidance>,
}

fn mix(seed: u64, step: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derived_seed(seed: u64, step: u64, stream: u64) -> u64 {
    mix(seed, step, stream)
}

impl StepInputs {
    pub fn for_step(config: &TrainConfig, step: u64, batch: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, step, 1));
        let mut draw = || {
            let codes: Vec<LatentCode> = (0..batch).map(|_| LatentCode::sample(&mut rng)).collect();
            LatentCode::batch(&codes)
        };
        let z1 = draw();
        let z2 = draw();
        let modes = match config.guidance {
            GuidanceSchedule::Both => vec![Guidance::Latent, Guidance::Style],
            GuidanceSchedule::Alternate if step % 2 == 0 => vec![Guidance::Latent],
            GuidanceSchedule::Alternate => vec![Guidance::Style],
        };
        Self { z1, z2, modes }
    }
}

fn check_batch(bundle: &ModelBundle, batch: &TrainingBatch) -> Result<(), TrainError> {
    let r = bundle.config.model.resolution;
    let n = batch.len();
    let want = [n, 3, r, r];
    for (what, t) in [
        ("source", &batch.source_images),
        ("reference", &batch.reference_images),
        ("alt reference", &batch.alt_reference_images),
    ] {
        if t.shape() != want {
            return Err(TrainError::BatchMismatch(format!(
                "{what} images {:?}, model expects {want:?}",
                t.shape()
            )));
        }
    }
    if n == 0 {
        return Err(TrainError::BatchMismatch("empty batch".into()));
    }
    Ok(())
}

/// Target style for a guidance mode, evaluated outside any gradient graph.
fn style_tensor(
    nets: &Networks,
    mode: Guidance,
    batch: &TrainingBatch,
    z: &Tensor,
) -> Result<Tensor, NetworkError> {
    let tgt = batch.target_domains();
    match mode {
        Guidance::Latent => nets.map_latent(z, tgt),
        Guidance::Style => nets.encode_style(
            &batch.reference_images,
            &batch.reference_masks.full_face,
            tgt,
        ),
    }
}

/// Discriminator half-step: only D's parameters (and its Adam state) change.
/// Returns the unweighted adversarial D loss averaged over guidance modes.
pub fn d_step(
    bundle: &mut ModelBundle,
    batch: &TrainingBatch,
    inputs: &StepInputs,
) -> Result<f64, TrainError> {
    check_batch(bundle, batch)?;
    let nets = &bundle.nets;
    let cfg = &nets.config;
    let mut fakes = Vec::with_capacity(inputs.modes.len());
    for &mode in &inputs.modes {
        let s = style_tensor(nets, mode, batch, &inputs.z1)?;
        fakes.push(nets.generate(&batch.source_images, &batch.source_heatmaps, &s)?);
    }
    let mut g = Graph::new();
    let b = Binding::trainable(&nets.disc);
    let real = g.constant(batch.source_images.clone());
    let real_logits = arch::discriminate(&mut g, &b, cfg, real, &batch.source_domains);
    let mut total: Option<Var> = None;
    for fake in fakes {
        let f = g.constant(fake);
        let fake_logits = arch::discriminate(&mut g, &b, cfg, f, batch.target_domains());
        let l = losses::adversarial_d(&mut g, real_logits, fake_logits);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    let total = total.expect("at least one guidance mode");
    let mean = g.scale(total, 1.0 / inputs.modes.len() as f64);
    let adv_d = g.value(mean).item();
    if !adv_d.is_finite() {
        return Err(LossError::NonFiniteLoss {
            name: "adv_d",
            value: adv_d,
            step: bundle.step,
        }
        .into());
    }
    let weighted = g.scale(mean, bundle.config.weights.lambda_adv);
    let grads = g.param_grads(&g.backward(weighted));
    bundle.apply(NetKind::Discriminator, &grads);
    Ok(adv_d)
}

/// Generator half-step over G, SE and MN with D frozen. Fills every
/// generator-side field of the returned report.
pub fn g_step(
    bundle: &mut ModelBundle,
    batch: &TrainingBatch,
    inputs: &StepInputs,
) -> Result<LossReport, TrainError> {
    check_batch(bundle, batch)?;
    let nets = &bundle.nets;
    let cfg = &nets.config;
    let w = &bundle.config.weights;
    let src_dom = &batch.source_domains;
    let tgt = batch.target_domains();
    let hm = &batch.source_heatmaps;

    let mut g = Graph::new();
    let bg = Binding::trainable(&nets.gen);
    let bse = Binding::trainable(&nets.se);
    let bmn = Binding::trainable(&nets.mn);
    let bd = Binding::frozen(&nets.disc);
    // fixed feature extractor for the histogram terms
    let bse_fixed = Binding::frozen(&nets.se);

    let x = g.constant(batch.source_images.clone());
    let ff_src = g.constant(batch.source_masks.full_face.clone());
    let content = arch::encode_content(&mut g, &bg, cfg, x, hm);
    let inv = arch::decode_invariant(&mut g, &bg, cfg, &content);
    let s_bar = arch::encode_style(&mut g, &bse, cfg, x, ff_src, src_dom);

    let k = 1.0 / inputs.modes.len() as f64;
    let mut report = LossReport {
        step: bundle.step,
        ..LossReport::default()
    };
    let mut total = g.constant(Tensor::scalar(0.0));
    for &mode in &inputs.modes {
        let (s1, s2) = match mode {
            Guidance::Latent => {
                let z1 = g.constant(inputs.z1.clone());
                let z2 = g.constant(inputs.z2.clone());
                (
                    arch::map_latent(&mut g, &bmn, cfg, z1, tgt),
                    arch::map_latent(&mut g, &bmn, cfg, z2, tgt),
                )
            }
            Guidance::Style => {
                let r = g.constant(batch.reference_images.clone());
                let rm = g.constant(batch.reference_masks.full_face.clone());
                let a = g.constant(batch.alt_reference_images.clone());
                let am = g.constant(batch.alt_reference_masks.full_face.clone());
                (
                    arch::encode_style(&mut g, &bse, cfg, r, rm, tgt),
                    arch::encode_style(&mut g, &bse, cfg, a, am, tgt),
                )
            }
        };
        let fake = arch::decode_styled(&mut g, &bg, cfg, &content, s1);
        let fake2 = arch::decode_styled(&mut g, &bg, cfg, &content, s2);

        let logits = arch::discriminate(&mut g, &bd, cfg, fake, tgt);
        let adv = losses::adversarial_g(&mut g, logits);
        let sd = losses::style_diversity(&mut g, fake, fake2)?;
        let s_re = arch::encode_style(&mut g, &bse, cfg, fake, ff_src, tgt);
        let sr = losses::style_reconstruction(&mut g, s1, s_re)?;
        let c2 = arch::encode_content(&mut g, &bg, cfg, fake, hm);
        let rec = arch::decode_styled(&mut g, &bg, cfg, &c2, s_bar);
        let cyc = losses::cycle(&mut g, x, rec)?;
        let gd = losses::guide(&mut g, x, inv, fake, w.lambda_gamma, w.lambda_beta)?;

        let mut parts = vec![
            (adv, w.lambda_adv),
            (sd, w.lambda_sd),
            (sr, w.lambda_sr),
            (cyc, w.lambda_cyc),
            (gd, w.lambda_guide),
        ];
        report.adv_g += k * g.value(adv).item();
        report.diversity += k * g.value(sd).item();
        report.style_recon += k * g.value(sr).item();
        report.cycle += k * g.value(cyc).item();
        report.guide += k * g.value(gd).item();
        if mode == Guidance::Style {
            // generated images inherit the source's parsing masks
            let (mk, terms) = losses::makeup(
                &mut g,
                &bse_fixed,
                cfg,
                fake,
                &batch.reference_images,
                &batch.source_masks,
                &batch.reference_masks,
                w,
            )?;
            report.makeup += k * g.value(mk).item();
            report.lips += k * terms.lips;
            report.eyes += k * terms.eyes;
            report.face += k * terms.face;
            parts.push((mk, w.lambda_makeup));
        }
        for (v, lambda) in parts {
            let t = g.scale(v, lambda * k);
            total = g.add(total, t);
        }
    }
    report.total_g = g.value(total).item();
    report.check_finite()?;

    let grads = g.param_grads(&g.backward(total));
    let mut split: BTreeMap<NetKind, BTreeMap<String, Tensor>> = BTreeMap::new();
    for (name, grad) in grads {
        let kind = match name.split('.').next() {
            Some("se") => NetKind::StyleEncoder,
            Some("mn") => NetKind::Mapping,
            Some("gen") => NetKind::Generator,
            _ => unreachable!("discriminator is frozen in the generator step"),
        };
        split.entry(kind).or_default().insert(name, grad);
    }
    for (kind, grads) in split {
        bundle.apply(kind, &grads);
    }
    Ok(report)
}

/// One full iteration: D half-step, G half-step, EMA update, step + 1.
pub fn train_step(bundle: &mut ModelBundle, batch: &TrainingBatch) -> Result<LossReport, TrainError> {
    let inputs = StepInputs::for_step(&bundle.config, bundle.step, batch.len());
    let adv_d = d_step(bundle, batch, &inputs)?;
    let mut report = g_step(bundle, batch, &inputs)?;
    report.adv_d = adv_d;
    report.total_d = bundle.config.weights.lambda_adv * adv_d;
    report.check_finite()?;
    let decay = bundle.config.ema_decay;
    bundle.update_ema(decay);
    bundle.step += 1;
    Ok(report)
}
