//! Core value types shared by every module.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::config::LATENT_DIM;

/// Makeup class of an image. The discriminant is the one-hot index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    NonMakeup = 0,
    Makeup = 1,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::NonMakeup, Domain::Makeup];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn opposite(self) -> Domain {
        match self {
            Domain::NonMakeup => Domain::Makeup,
            Domain::Makeup => Domain::NonMakeup,
        }
    }

    /// One-hot condition vector `c`.
    pub fn onehot(self) -> [f64; 2] {
        let mut v = [0.0; 2];
        v[self.index()] = 1.0;
        v
    }

    /// Directory name used by the dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::NonMakeup => "non-makeup",
            Domain::Makeup => "makeup",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "makeup" | "1" => Some(Domain::Makeup),
            "non-makeup" | "non_makeup" | "nonmakeup" | "0" => Some(Domain::NonMakeup),
            _ => None,
        }
    }
}

/// One-hot rows `[N, 2]` for a batch of domains.
pub fn onehot_rows(domains: &[Domain]) -> Tensor {
    let data = domains.iter().flat_map(|d| d.onehot()).collect();
    Tensor::new(vec![domains.len(), 2], data)
}

/// Style vector `s` driving the AdaIN parameters of the styled decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCode(pub Vec<f64>);

impl StyleCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stack codes into a `[N, D]` tensor.
    pub fn batch(codes: &[StyleCode]) -> Tensor {
        let d = codes[0].dim();
        let data: Vec<f64> = codes.iter().flat_map(|c| c.0.iter().copied()).collect();
        Tensor::new(vec![codes.len(), d], data)
    }

    /// Split a `[N, D]` tensor into codes.
    pub fn unbatch(t: &Tensor) -> Vec<StyleCode> {
        let d = t.shape()[1];
        t.data().chunks(d).map(|c| StyleCode(c.to_vec())).collect()
    }
}

/// Latent input `z` of the mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub [f64; LATENT_DIM]);

impl LatentCode {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut z = [0.0; LATENT_DIM];
        for v in &mut z {
            *v = rng.sample(StandardNormal);
        }
        Self(z)
    }

    pub fn zeros() -> Self {
        Self([0.0; LATENT_DIM])
    }

    pub fn from_slice(v: &[f64]) -> Option<Self> {
        <[f64; LATENT_DIM]>::try_from(v).ok().map(Self)
    }

    /// Deterministic draw keyed by a user-facing seed.
    pub fn from_seed(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Self::sample(&mut rng)
    }

    pub fn batch(codes: &[LatentCode]) -> Tensor {
        let data = codes.iter().flat_map(|c| c.0).collect();
        Tensor::new(vec![codes.len(), LATENT_DIM], data)
    }
}
