//! Style encoder, mapping network, generator and discriminator.

pub mod arch;
mod params;

use thiserror::Error;

pub use arch::{Content, NetKind, TrunkOutput, LRELU_SLOPE, NORM_EPS};
pub use params::{he_init, Binding, ParamSpec, Params};

use crate::autograd::{channel_stats, Graph, Tensor};
use crate::config::{ModelConfig, LATENT_DIM};
use crate::domain::Domain;

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("channel mismatch: features have {features}, parameters have {params}")]
    ChannelMismatch { features: usize, params: usize },
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("style code has dimension {got}, model expects {expected}")]
    StyleDimMismatch { expected: usize, got: usize },
    #[error("latent code has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch of {images} images but {conditions} domain conditions")]
    BatchMismatch { images: usize, conditions: usize },
    #[error("adaptive normalization needs at least two spatial positions")]
    DegenerateSpatial,
}

/// Tensor-level AdaIN on `[C, H, W]` or `[N, C, H, W]` features with one
/// `(gamma, beta)` pair per channel, shared over the batch.
pub fn adain(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor, NetworkError> {
    let shape = x.shape().to_vec();
    let (n, c, hw) = match shape.as_slice() {
        [c, h, w] => (1, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        _ => {
            return Err(NetworkError::ShapeMismatch {
                what: "adain features",
                expected: vec![0, 0, 0],
                got: shape,
            })
        }
    };
    if gamma.len() != c || beta.len() != c {
        return Err(NetworkError::ChannelMismatch {
            features: c,
            params: gamma.len().min(beta.len()),
        });
    }
    if hw < 2 {
        return Err(NetworkError::DegenerateSpatial);
    }
    let planar = x.clone().reshape(&[n, c, hw, 1]);
    let (means, stds) = channel_stats(&planar);
    let mut out = planar.into_data();
    for (p, plane) in out.chunks_mut(hw).enumerate() {
        let ch = p % c;
        let d = stds[p] + NORM_EPS;
        for v in plane {
            *v = gamma[ch] * (*v - means[p]) / d + beta[ch];
        }
    }
    Ok(Tensor::new(shape, out))
}

/// Parameters of all four networks for one model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub config: ModelConfig,
    pub se: Params,
    pub mn: Params,
    pub gen: Params,
    pub disc: Params,
}

impl Networks {
    /// He-initialized networks; each network draws from its own seed stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mk = |kind: NetKind, k: u64| he_init(&kind.specs(config), seed.wrapping_mul(4).wrapping_add(k));
        Self {
            config: config.clone(),
            se: mk(NetKind::StyleEncoder, 0),
            mn: mk(NetKind::Mapping, 1),
            gen: mk(NetKind::Generator, 2),
            disc: mk(NetKind::Discriminator, 3),
        }
    }

    pub fn get(&self, kind: NetKind) -> &Params {
        match kind {
            NetKind::StyleEncoder => &self.se,
            NetKind::Mapping => &self.mn,
            NetKind::Generator => &self.gen,
            NetKind::Discriminator => &self.disc,
        }
    }

    pub fn get_mut(&mut self, kind: NetKind) -> &mut Params {
        match kind {
            NetKind::StyleEncoder => &mut self.se,
            NetKind::Mapping => &mut self.mn,
            NetKind::Generator => &mut self.gen,
            NetKind::Discriminator => &mut self.disc,
        }
    }

    /// Scalar parameter count per network.
    pub fn param_counts(&self) -> Vec<(NetKind, usize)> {
        NetKind::ALL
            .iter()
            .map(|&k| (k, self.get(k).num_scalars()))
            .collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<usize, NetworkError> {
        let r = self.config.resolution;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(NetworkError::ShapeMismatch {
                what: "images",
                expected: vec![s.first().copied().unwrap_or(1), 3, r, r],
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    fn check_map(&self, what: &'static str, t: &Tensor, n: usize) -> Result<(), NetworkError> {
        let r = self.config.resolution;
        if t.shape() != [n, 1, r, r] {
            return Err(NetworkError::ShapeMismatch {
                what,
                expected: vec![n, 1, r, r],
                got: t.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_domains(n: usize, domains: &[Domain]) -> Result<(), NetworkError> {
        if domains.len() != n {
            return Err(NetworkError::BatchMismatch {
                images: n,
                conditions: domains.len(),
            });
        }
        Ok(())
    }

    fn check_style(&self, style: &Tensor, n: usize) -> Result<(), NetworkError> {
        let s = style.shape();
        if s.len() != 2 || s[0] != n {
            return Err(NetworkError::ShapeMismatch {
                what: "style codes",
                expected: vec![n, self.config.style_dim],
                got: s.to_vec(),
            });
        }
        if s[1] != self.config.style_dim {
            return Err(NetworkError::StyleDimMismatch {
                expected: self.config.style_dim,
                got: s[1],
            });
        }
        Ok(())
    }

    /// Style codes `[N, style_dim]` of reference images `[N, 3, H, W]`.
    pub fn encode_style(
        &self,
        images: &Tensor,
        full_face: &Tensor,
        domains: &[Domain],
    ) -> Result<Tensor, NetworkError> {
        let n = self.check_images(images)?;
        self.check_map("full-face mask", full_face, n)?;
        Self::check_domains(n, domains)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let m = g.constant(full_face.clone());
        let out = arch::encode_style(&mut g, &Binding::frozen(&self.se), &self.config, x, m, domains);
        Ok(g.value(out).clone())
    }

    /// Style codes `[N, style_dim]` from latent codes `[N, 16]`.
    pub fn map_latent(&self, z: &Tensor, domains: &[Domain]) -> Result<Tensor, NetworkError> {
        let s = z.shape();
        if s.len() != 2 {
            return Err(NetworkError::ShapeMismatch {
                what: "latent codes",
                expected: vec![domains.len(), LATENT_DIM],
                got: s.to_vec(),
            });
        }
        if s[1] != LATENT_DIM {
            return Err(NetworkError::DimensionMismatch {
                expected: LATENT_DIM,
                got: s[1],
            });
        }
        Self::check_domains(s[0], domains)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = arch::map_latent(&mut g, &Binding::frozen(&self.mn), &self.config, zv, domains);
        Ok(g.value(out).clone())
    }

    /// Encoder stage outputs (skips, shallow to deep) followed by the bottleneck.
    pub fn encode_content(
        &self,
        images: &Tensor,
        heatmaps: &Tensor,
    ) -> Result<Vec<Tensor>, NetworkError> {
        let n = self.check_images(images)?;
        self.check_map("heatmap", heatmaps, n)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let c = arch::encode_content(&mut g, &Binding::frozen(&self.gen), &self.config, x, heatmaps);
        let mut out: Vec<Tensor> = c.skips.iter().map(|&v| g.value(v).clone()).collect();
        out.push(g.value(c.bottleneck).clone());
        Ok(out)
    }

    /// `G_s(Enc(images), style)`, values in `[-1, 1]`.
    pub fn generate(
        &self,
        images: &Tensor,
        heatmaps: &Tensor,
        style: &Tensor,
    ) -> Result<Tensor, NetworkError> {
        let n = self.check_images(images)?;
        self.check_map("heatmap", heatmaps, n)?;
        self.check_style(style, n)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let s = g.constant(style.clone());
        let out = arch::generate(&mut g, &Binding::frozen(&self.gen), &self.config, x, heatmaps, s);
        Ok(g.value(out).clone())
    }

    /// `G_i(Enc(images))`, the style-free reconstruction.
    pub fn reconstruct_invariant(
        &self,
        images: &Tensor,
        heatmaps: &Tensor,
    ) -> Result<Tensor, NetworkError> {
        let n = self.check_images(images)?;
        self.check_map("heatmap", heatmaps, n)?;
        let mut g = Graph::new();
        let b = Binding::frozen(&self.gen);
        let x = g.constant(images.clone());
        let c = arch::encode_content(&mut g, &b, &self.config, x, heatmaps);
        let out = arch::decode_invariant(&mut g, &b, &self.config, &c);
        Ok(g.value(out).clone())
    }

    /// Raw discriminator logits, one per image.
    pub fn discriminate(&self, images: &Tensor, domains: &[Domain]) -> Result<Vec<f64>, NetworkError> {
        let n = self.check_images(images)?;
        Self::check_domains(n, domains)?;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = arch::discriminate(&mut g, &Binding::frozen(&self.disc), &self.config, x, domains);
        Ok(g.value(out).data().to_vec())
    }
}
