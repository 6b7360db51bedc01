//! Transfer, removal and style interpolation with frozen EMA weights.

use std::path::Path;

use thiserror::Error;

use crate::autograd::Tensor;
use crate::config::TrainConfig;
use crate::dataset::{
    decode_image, derive_region_masks, landmark_heatmap, load_label_map, parse_landmarks,
    preprocess_image, DatasetError, Heatmap, ImageTensor, LabelMap, RegionMasks,
};
use crate::domain::{Domain, LatentCode, StyleCode};
use crate::networks::{NetworkError, Networks, Params};
use crate::training::{load_checkpoint, CheckpointError, ModelBundle};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("weights must be non-negative and sum to 1 (sum = {sum})")]
    WeightSumViolation { sum: f64 },
    #[error("{codes} codes but {weights} weights")]
    CountMismatch { codes: usize, weights: usize },
    #[error("style codes have differing dimensions {0} and {1}")]
    DimMismatch(usize, usize),
    #[error("at least one reference is required")]
    NoReferences,
    #[error("a sweep needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("inference requires EMA weights, model holds {0:?} weights")]
    NotEma(ParamSource),
    #[error("input is {got}², model expects {expected}²")]
    Resolution { expected: usize, got: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which parameter copy a frozen model was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSource {
    Ema,
    /// Raw training weights, for diagnostics only; inference refuses them.
    Live,
}

/// Immutable style encoder, mapping network and generator.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    nets: Networks,
    source: ParamSource,
    eye_ring_px: usize,
    heatmap_sigma: f64,
}

impl FrozenModel {
    /// The inference-facing copy: EMA shadows of G, SE and MN.
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        Self::build(bundle, ParamSource::Ema)
    }

    pub fn from_live_weights(bundle: &ModelBundle) -> Self {
        Self::build(bundle, ParamSource::Live)
    }

    fn build(bundle: &ModelBundle, source: ParamSource) -> Self {
        let (se, mn, gen) = match source {
            ParamSource::Ema => (&bundle.ema.se, &bundle.ema.mn, &bundle.ema.gen),
            ParamSource::Live => (&bundle.nets.se, &bundle.nets.mn, &bundle.nets.gen),
        };
        Self {
            nets: Networks {
                config: bundle.config.model.clone(),
                se: se.clone(),
                mn: mn.clone(),
                gen: gen.clone(),
                disc: Params::default(),
            },
            source,
            eye_ring_px: bundle.config.eye_ring_px(),
            heatmap_sigma: bundle.config.heatmap_sigma,
        }
    }

    pub fn load(path: &Path) -> Result<Self, InferenceError> {
        Ok(Self::from_bundle(&load_checkpoint(path)?))
    }

    pub fn source(&self) -> ParamSource {
        self.source
    }

    pub fn resolution(&self) -> usize {
        self.nets.config.resolution
    }

    pub fn style_dim(&self) -> usize {
        self.nets.config.style_dim
    }

    /// Digest of the generator weights in use.
    pub fn generator_digest(&self) -> String {
        self.nets.gen.digest()
    }

    fn nets(&self) -> Result<&Networks, InferenceError> {
        match self.source {
            ParamSource::Ema => Ok(&self.nets),
            other => Err(InferenceError::NotEma(other)),
        }
    }

    fn check(&self, face: &Face) -> Result<(), InferenceError> {
        let got = face.image.resolution();
        if got != self.resolution() {
            return Err(InferenceError::Resolution {
                expected: self.resolution(),
                got,
            });
        }
        Ok(())
    }

    /// Preprocess decoded inputs at the model's resolution.
    pub fn face_from_bytes(
        &self,
        image: &[u8],
        parsing: Option<&[u8]>,
        landmarks: Option<&str>,
    ) -> Result<Face, InferenceError> {
        let raw = decode_image(image)?;
        let res = self.resolution();
        let img = preprocess_image(&raw, res)?;
        let labels = match parsing {
            Some(bytes) => Some(LabelMap::from_image(&decode_image(bytes)?, res)),
            None => None,
        };
        let pts = match landmarks {
            Some(text) => {
                let sx = res as f64 / raw.width() as f64;
                let sy = res as f64 / raw.height() as f64;
                Some(
                    parse_landmarks(text)?
                        .into_iter()
                        .map(|(x, y)| (x * sx, y * sy))
                        .collect::<Vec<_>>(),
                )
            }
            None => None,
        };
        Face::new(img, labels.as_ref(), pts.as_deref(), self.eye_ring_px, self.heatmap_sigma)
    }

    /// Load an image with optional parsing map and landmark files.
    pub fn face_from_files(
        &self,
        image: &Path,
        parsing: Option<&Path>,
        landmarks: Option<&Path>,
    ) -> Result<Face, InferenceError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DatasetError::Io { path, source }
        };
        let bytes = std::fs::read(image).map_err(io(image))?;
        let seg = match parsing {
            Some(p) => Some(load_label_map(p, self.resolution())?),
            None => None,
        };
        let lm = match landmarks {
            Some(p) => Some(std::fs::read_to_string(p).map_err(io(p))?),
            None => None,
        };
        let mut face = self.face_from_bytes(&bytes, None, lm.as_deref())?;
        if let Some(seg) = seg {
            face.masks = derive_region_masks(&seg, self.eye_ring_px)?;
        }
        Ok(face)
    }

    /// `SE_domain(face ∘ full_face)`.
    pub fn style_code(&self, face: &Face, domain: Domain) -> Result<StyleCode, InferenceError> {
        self.check(face)?;
        let r = self.resolution();
        let mask = face.masks.full_face.tensor().clone().reshape(&[1, 1, r, r]);
        let s = self.nets()?.encode_style(&face.image.as_batch(), &mask, &[domain])?;
        Ok(StyleCode::unbatch(&s).remove(0))
    }

    /// `MN_domain(z)`.
    pub fn latent_style(&self, z: &LatentCode, domain: Domain) -> Result<StyleCode, InferenceError> {
        let s = self.nets()?.map_latent(&LatentCode::batch(std::slice::from_ref(z)), &[domain])?;
        Ok(StyleCode::unbatch(&s).remove(0))
    }

    /// `G_sg(source, style)`.
    pub fn render(&self, source: &Face, style: &StyleCode) -> Result<ImageTensor, InferenceError> {
        self.check(source)?;
        if style.dim() != self.style_dim() {
            return Err(NetworkError::StyleDimMismatch {
                expected: self.style_dim(),
                got: style.dim(),
            }
            .into());
        }
        let r = self.resolution();
        let hm = source.heatmap.tensor().clone().reshape(&[1, 1, r, r]);
        let out = self.nets()?.generate(
            &source.image.as_batch(),
            &hm,
            &StyleCode::batch(std::slice::from_ref(style)),
        )?;
        Ok(ImageTensor::from_batch(&out, 0))
    }

    /// Apply the reference's makeup to the source.
    pub fn transfer(&self, source: &Face, reference: &Face) -> Result<ImageTensor, InferenceError> {
        let s = self.style_code(reference, Domain::Makeup)?;
        self.render(source, &s)
    }

    /// Makeup removal guided by a bare-faced reference or a latent code.
    pub fn remove(&self, source: &Face, guidance: &RemovalGuidance) -> Result<ImageTensor, InferenceError> {
        let s = match guidance {
            RemovalGuidance::Reference(r) => self.style_code(r, Domain::NonMakeup)?,
            RemovalGuidance::Latent(z) => self.latent_style(z, Domain::NonMakeup)?,
        };
        self.render(source, &s)
    }

    /// Render the convex mix of the references' makeup codes.
    pub fn interpolate(
        &self,
        source: &Face,
        references: &[Face],
        weights: &[f64],
    ) -> Result<ImageTensor, InferenceError> {
        if references.is_empty() {
            return Err(InferenceError::NoReferences);
        }
        let codes = references
            .iter()
            .map(|r| self.style_code(r, Domain::Makeup))
            .collect::<Result<Vec<_>, _>>()?;
        let s = interpolate_styles(&codes, weights)?;
        self.render(source, &s)
    }

    /// Light-to-heavy frames: the style moves from the source's own code
    /// (`α = 0`) to the reference code (`α = 1`) on a uniform grid.
    pub fn strength_sweep(
        &self,
        source: &Face,
        source_domain: Domain,
        reference: &Face,
        steps: usize,
    ) -> Result<Vec<ImageTensor>, InferenceError> {
        let own = self.style_code(source, source_domain)?;
        let target = self.style_code(reference, source_domain.opposite())?;
        sweep_codes(&own, &target, steps)?
            .iter()
            .map(|s| self.render(source, s))
            .collect()
    }

    /// Frames between `MN(z_a)` and `MN(z_b)`, interpolated after the mapping
    /// network.
    pub fn latent_sweep(
        &self,
        source: &Face,
        seed_a: u64,
        seed_b: u64,
        steps: usize,
        domain: Domain,
    ) -> Result<Vec<ImageTensor>, InferenceError> {
        let a = self.latent_style(&LatentCode::from_seed(seed_a), domain)?;
        let b = self.latent_style(&LatentCode::from_seed(seed_b), domain)?;
        sweep_codes(&a, &b, steps)?
            .iter()
            .map(|s| self.render(source, s))
            .collect()
    }

    /// Render an [`InterpolationSpec`].
    pub fn run(&self, source: &Face, references: &[Face], spec: &InterpolationSpec) -> Result<ImageTensor, InferenceError> {
        match spec.mode {
            InterpolationMode::StyleGuided => self.interpolate(source, references, &spec.weights),
            InterpolationMode::LatentGuided => {
                let (a, b) = spec.latent_seeds.unwrap_or((0, 1));
                let sa = self.latent_style(&LatentCode::from_seed(a), spec.domain)?;
                let sb = self.latent_style(&LatentCode::from_seed(b), spec.domain)?;
                self.render(source, &blend(&sa, &sb, spec.alpha))
            }
            InterpolationMode::SourceBlend => {
                let reference = references.first().ok_or(InferenceError::NoReferences)?;
                let own = self.style_code(source, spec.domain.opposite())?;
                let target = self.style_code(reference, spec.domain)?;
                self.render(source, &blend(&own, &target, spec.alpha))
            }
        }
    }
}

/// Preprocessed inference input.
#[derive(Clone, Debug)]
pub struct Face {
    pub image: ImageTensor,
    pub masks: RegionMasks,
    pub heatmap: Heatmap,
}

impl Face {
    /// Without a parsing map every pixel is kept; without landmarks the
    /// heatmap is zero.
    pub fn new(
        image: ImageTensor,
        parsing: Option<&LabelMap>,
        landmarks: Option<&[(f64, f64)]>,
        eye_ring_px: usize,
        heatmap_sigma: f64,
    ) -> Result<Self, InferenceError> {
        let res = image.resolution();
        let masks = match parsing {
            Some(map) => derive_region_masks(map, eye_ring_px)?,
            None => RegionMasks::unmasked(res),
        };
        let heatmap = match landmarks {
            Some(pts) => landmark_heatmap(pts, res, heatmap_sigma)?,
            None => Heatmap::zeros(res),
        };
        Ok(Self {
            image,
            masks,
            heatmap,
        })
    }
}

pub enum RemovalGuidance<'a> {
    Reference(&'a Face),
    Latent(LatentCode),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationMode {
    /// Convex mix of K reference codes.
    StyleGuided,
    /// Blend between two latent draws with `alpha`.
    LatentGuided,
    /// Blend from the source's own code to one reference with `alpha`.
    SourceBlend,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationSpec {
    pub weights: Vec<f64>,
    pub mode: InterpolationMode,
    pub alpha: f64,
    pub latent_seeds: Option<(u64, u64)>,
    /// Target domain of the generated image.
    pub domain: Domain,
}

const WEIGHT_TOL: f64 = 1e-6;

/// Convex combination `Σ wᵢ sᵢ`. Weights must be non-negative and sum to 1
/// within 1e-6; they are renormalized before mixing. One-hot weights return
/// the selected code unchanged.
pub fn interpolate_styles(codes: &[StyleCode], weights: &[f64]) -> Result<StyleCode, InferenceError> {
    if codes.is_empty() {
        return Err(InferenceError::NoReferences);
    }
    if codes.len() != weights.len() {
        return Err(InferenceError::CountMismatch {
            codes: codes.len(),
            weights: weights.len(),
        });
    }
    let d = codes[0].dim();
    if let Some(c) = codes.iter().find(|c| c.dim() != d) {
        return Err(InferenceError::DimMismatch(d, c.dim()));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(InferenceError::WeightSumViolation { sum });
    }
    if let Some(j) = weights.iter().position(|&w| w == 1.0) {
        return Ok(codes[j].clone());
    }
    let mut out = vec![0.0; d];
    for (c, &w) in codes.iter().zip(weights) {
        let w = w / sum;
        for (o, v) in out.iter_mut().zip(c.values()) {
            *o += w * v;
        }
    }
    Ok(StyleCode(out))
}

/// `a + α(b − a)`, exact at both endpoints.
pub fn blend(a: &StyleCode, b: &StyleCode, alpha: f64) -> StyleCode {
    if alpha <= 0.0 {
        return a.clone();
    }
    if alpha >= 1.0 {
        return b.clone();
    }
    StyleCode(
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| x + alpha * (y - x))
            .collect(),
    )
}

/// `steps` codes on the uniform grid from `a` to `b`.
pub fn sweep_codes(a: &StyleCode, b: &StyleCode, steps: usize) -> Result<Vec<StyleCode>, InferenceError> {
    if steps < 2 {
        return Err(InferenceError::TooFewSteps(steps));
    }
    if a.dim() != b.dim() {
        return Err(InferenceError::DimMismatch(a.dim(), b.dim()));
    }
    Ok((0..steps)
        .map(|i| blend(a, b, i as f64 / (steps - 1) as f64))
        .collect())
}

/// Mean absolute difference between two images.
pub fn mean_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (x, y): (&Tensor, &Tensor) = (a.tensor(), b.tensor());
    x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64
}

/// Desk-scale frozen model straight from an initialization, mostly for tests.
pub fn untrained_model(config: &TrainConfig, seed: u64) -> FrozenModel {
    let bundle = ModelBundle::init(config, seed).expect("valid config");
    FrozenModel::from_bundle(&bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn code(v: &[f64]) -> StyleCode {
        StyleCode(v.to_vec())
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = code(&[0.1, -0.7, 3.3]);
        let b = code(&[0.0, 0.0, 0.0]);
        let c = code(&[1.0, 1.0, 1.0]);
        assert_eq!(interpolate_styles(&[a.clone(), b.clone()], &[1.0, 0.0]).unwrap(), a);
        let mid = interpolate_styles(&[b, c], &[0.5, 0.5]).unwrap();
        assert_eq!(mid, code(&[0.5, 0.5, 0.5]));
    }

    #[test]
    fn random_mix_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let codes: Vec<StyleCode> = (0..4)
            .map(|_| StyleCode((0..16).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let got = interpolate_styles(&codes, &w).unwrap();
        for i in 0..16 {
            let want: f64 = (0..4).map(|k| w[k] * codes[k].values()[i]).sum();
            assert!((got.values()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_validation() {
        let c = vec![code(&[1.0]), code(&[2.0])];
        assert!(matches!(
            interpolate_styles(&c, &[0.6, 0.6]),
            Err(InferenceError::WeightSumViolation { .. })
        ));
        assert!(matches!(
            interpolate_styles(&c, &[1.5, -0.5]),
            Err(InferenceError::WeightSumViolation { .. })
        ));
        assert!(matches!(
            interpolate_styles(&c, &[1.0]),
            Err(InferenceError::CountMismatch { .. })
        ));
        assert!(matches!(
            interpolate_styles(&[code(&[1.0]), code(&[1.0, 2.0])], &[0.5, 0.5]),
            Err(InferenceError::DimMismatch(1, 2))
        ));
        assert!(interpolate_styles(&c, &[0.5, 0.5 + 5e-7]).is_ok());
    }

    #[test]
    fn sweeps_hit_endpoints() {
        let a = code(&[0.3, 0.1]);
        let b = code(&[-1.0, 2.0]);
        let s = sweep_codes(&a, &b, 2).unwrap();
        assert_eq!(s, vec![a.clone(), b.clone()]);
        let s = sweep_codes(&a, &a, 5).unwrap();
        assert!(s.iter().all(|c| *c == a));
        assert!(matches!(sweep_codes(&a, &b, 1), Err(InferenceError::TooFewSteps(1))));
    }
}
