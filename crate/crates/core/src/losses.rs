//! Training objectives and the per-step loss report.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{softplus, Graph, Tensor, Var};
use crate::config::{LossWeights, ModelConfig};
use crate::dataset::BatchMasks;
use crate::histogram::{region_histogram_loss_var, EmptyRegion, HistogramError};
use crate::networks::Binding;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite loss {name} = {value} at step {step}")]
    NonFiniteLoss {
        name: &'static str,
        value: f64,
        step: u64,
    },
    #[error(transparent)]
    Histogram(#[from] HistogramError),
    #[error("loss log: {0}")]
    Io(#[from] std::io::Error),
}

fn same_shape(g: &Graph, a: Var, b: Var) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch(
            g.shape(a).to_vec(),
            g.shape(b).to_vec(),
        ));
    }
    Ok(())
}

/// Discriminator loss `mean(−log σ(real)) + mean(−log(1 − σ(fake)))`.
pub fn adversarial_d(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Var {
    let neg = g.scale(real_logits, -1.0);
    let r = g.softplus(neg);
    let f = g.softplus(fake_logits);
    let r = g.mean(r);
    let f = g.mean(f);
    g.add(r, f)
}

/// Non-saturating generator loss `mean(−log σ(fake))`.
pub fn adversarial_g(g: &mut Graph, fake_logits: Var) -> Var {
    let neg = g.scale(fake_logits, -1.0);
    let l = g.softplus(neg);
    g.mean(l)
}

pub fn adversarial_d_value(real: f64, fake: f64) -> f64 {
    softplus(-real) + softplus(fake)
}

pub fn adversarial_g_value(fake: f64) -> f64 {
    softplus(-fake)
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var, LossError> {
    same_shape(g, a, b)?;
    let d = g.sub(a, b);
    Ok(g.mean_abs(d))
}

/// Mean absolute difference of two generations; weighted negatively in the
/// generator total so that diversity is rewarded.
pub fn style_diversity(g: &mut Graph, img1: Var, img2: Var) -> Result<Var, LossError> {
    mean_abs_diff(g, img1, img2)
}

/// Mean absolute error between a target style code and its re-encoding.
pub fn style_reconstruction(g: &mut Graph, target: Var, reencoded: Var) -> Result<Var, LossError> {
    mean_abs_diff(g, target, reencoded)
}

/// Mean absolute error between the source and its round trip.
pub fn cycle(g: &mut Graph, source: Var, reconstructed: Var) -> Result<Var, LossError> {
    mean_abs_diff(g, source, reconstructed)
}

/// `λγ · RMS(source − invariant) + λβ · RMS(invariant − styled)`.
pub fn guide(
    g: &mut Graph,
    source: Var,
    invariant: Var,
    styled: Var,
    lambda_gamma: f64,
    lambda_beta: f64,
) -> Result<Var, LossError> {
    same_shape(g, source, invariant)?;
    same_shape(g, invariant, styled)?;
    let a = g.sub(source, invariant);
    let a = g.rms(a);
    let b = g.sub(invariant, styled);
    let b = g.rms(b);
    let a = g.scale(a, lambda_gamma);
    let b = g.scale(b, lambda_beta);
    Ok(g.add(a, b))
}

/// Region terms of one makeup-loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MakeupTerms {
    pub lips: f64,
    pub eyes: f64,
    pub face: f64,
    pub empty_lips: Vec<EmptyRegion>,
    pub empty_eyes: Vec<EmptyRegion>,
    pub empty_face: Vec<EmptyRegion>,
}

/// `λ_lips L_lips + λ_eyes L_eyes + λ_face L_face` with each region term a
/// histogram loss on style-encoder features.
#[allow(clippy::too_many_arguments)]
pub fn makeup(
    g: &mut Graph,
    se: &Binding,
    cfg: &ModelConfig,
    generated: Var,
    reference: &Tensor,
    gen_masks: &BatchMasks,
    ref_masks: &BatchMasks,
    weights: &LossWeights,
) -> Result<(Var, MakeupTerms), LossError> {
    let mut terms = MakeupTerms::default();
    let mut total = g.constant(Tensor::scalar(0.0));
    let regions = [
        (&gen_masks.lips, &ref_masks.lips, weights.lambda_lips),
        (&gen_masks.eyes, &ref_masks.eyes, weights.lambda_eyes),
        (&gen_masks.face, &ref_masks.face, weights.lambda_face),
    ];
    for (i, (gm, rm, w)) in regions.into_iter().enumerate() {
        let (l, empty) = region_histogram_loss_var(g, se, cfg, generated, reference, gm, rm)?;
        let v = g.value(l).item();
        match i {
            0 => (terms.lips, terms.empty_lips) = (v, empty),
            1 => (terms.eyes, terms.empty_eyes) = (v, empty),
            _ => (terms.face, terms.empty_face) = (v, empty),
        }
        let l = g.scale(l, w);
        total = g.add(total, l);
    }
    Ok((total, terms))
}

/// Every loss of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub diversity: f64,
    pub style_recon: f64,
    pub cycle: f64,
    pub makeup: f64,
    pub lips: f64,
    pub eyes: f64,
    pub face: f64,
    pub guide: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// `λ_adv L_adv + λ_sd L_sd + λ_sr L_sr + λ_cyc L_cyc + λ_makeup L_makeup + λ_guide L_guide`.
    /// The guide term already carries its inner `λγ, λβ` weights.
    pub fn generator_total(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adv_g
            + w.lambda_sd * self.diversity
            + w.lambda_sr * self.style_recon
            + w.lambda_cyc * self.cycle
            + w.lambda_makeup * self.makeup
            + w.lambda_guide * self.guide
    }

    pub fn discriminator_total(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adv_d
    }

    fn fields(&self) -> [(&'static str, f64); 12] {
        [
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("diversity", self.diversity),
            ("style_recon", self.style_recon),
            ("cycle", self.cycle),
            ("makeup", self.makeup),
            ("lips", self.lips),
            ("eyes", self.eyes),
            ("face", self.face),
            ("guide", self.guide),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    pub fn check_finite(&self) -> Result<(), LossError> {
        match self.fields().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, value)) => Err(LossError::NonFiniteLoss {
                name,
                value,
                step: self.step,
            }),
            None => Ok(()),
        }
    }

    /// Bitwise equality of every field.
    pub fn bit_eq(&self, other: &LossReport) -> bool {
        self.step == other.step
            && self
                .fields()
                .iter()
                .zip(other.fields())
                .all(|((_, a), (_, b))| a.to_bits() == b.to_bits())
    }
}

/// Append one report as a JSON line. Field order is the struct order:
/// step, adv_g, adv_d, diversity, style_recon, cycle, makeup, lips, eyes,
/// face, guide, total_g, total_d.
pub fn append_report<W: Write>(out: &mut W, report: &LossReport) -> Result<(), LossError> {
    let line = serde_json::to_string(report).map_err(std::io::Error::other)?;
    writeln!(out, "{line}")?;
    Ok(())
}

pub fn parse_log(text: &str) -> Result<Vec<LossReport>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
