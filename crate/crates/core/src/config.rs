//! Model, loss-weight and training configuration.
//!
//! Configuration files are plain text, one `key = value` per line; `#` starts
//! a comment. Keys are the field names of [`TrainConfig`], [`ModelConfig`] and
//! [`LossWeights`] flattened into one namespace (see `README.md`).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LATENT_DIM: usize = 16;
pub const NUM_DOMAINS: usize = 2;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture dimensions shared by all four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    pub style_dim: usize,
    /// Channel width of the first convolution in every network.
    pub base_channels: usize,
    pub max_channels: usize,
    /// Stride-2 stages in the generator encoder (mirrored by both decoders).
    pub down_stages: usize,
    pub encoder_res_blocks: usize,
    pub decoder_res_blocks: usize,
    /// Stride-2 convolutions in the style-encoder / discriminator trunk.
    pub trunk_down_stages: usize,
    pub mapping_hidden: usize,
    pub mapping_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            style_dim: 64,
            base_channels: 32,
            max_channels: 256,
            down_stages: 2,
            encoder_res_blocks: 2,
            decoder_res_blocks: 2,
            trunk_down_stages: 6,
            mapping_hidden: 256,
            mapping_layers: 6,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for 64² CPU runs.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            style_dim: 16,
            base_channels: 8,
            max_channels: 32,
            down_stages: 2,
            encoder_res_blocks: 1,
            decoder_res_blocks: 1,
            trunk_down_stages: 4,
            mapping_hidden: 32,
            mapping_layers: 6,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.style_dim == 0 || self.base_channels == 0 || self.mapping_hidden == 0 {
            return fail("dimensions must be positive");
        }
        if self.max_channels < self.base_channels {
            return fail("max_channels must be >= base_channels");
        }
        if self.mapping_layers == 0 {
            return fail("mapping_layers must be >= 1");
        }
        let div = 1usize << self.down_stages.max(self.trunk_down_stages);
        if self.resolution == 0 || self.resolution % div != 0 {
            return fail("resolution must be divisible by 2^(number of downsampling stages)");
        }
        if self.resolution >> self.trunk_down_stages < 1 {
            return fail("trunk downsamples below 1 pixel");
        }
        Ok(())
    }

    /// Channel count after `stage` doublings of the base width.
    pub fn channels_at(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }

    /// Number of convolution layers in the style-encoder trunk (K).
    pub fn trunk_conv_layers(&self) -> usize {
        1 + self.trunk_down_stages
    }

    /// Hex SHA-256 of the canonical key/value rendering.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        write_model_kv(&mut text, self);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Loss coefficients. Defaults carry the published values where given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_sd: f64,
    pub lambda_sr: f64,
    pub lambda_cyc: f64,
    pub lambda_makeup: f64,
    pub lambda_guide: f64,
    pub lambda_lips: f64,
    pub lambda_eyes: f64,
    pub lambda_face: f64,
    pub lambda_gamma: f64,
    pub lambda_beta: f64,
    /// Optional R1 penalty on real discriminator inputs; 0 disables it.
    pub lambda_r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_sd: -1.0,
            lambda_sr: 1.0,
            lambda_cyc: 1.0,
            lambda_makeup: 1.0,
            lambda_guide: 1.0,
            lambda_lips: 10.0,
            lambda_eyes: 10.0,
            lambda_face: 0.1,
            lambda_gamma: 0.5,
            lambda_beta: 0.5,
            lambda_r1: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let all = [
            self.lambda_adv,
            self.lambda_sd,
            self.lambda_sr,
            self.lambda_cyc,
            self.lambda_makeup,
            self.lambda_guide,
            self.lambda_lips,
            self.lambda_eyes,
            self.lambda_face,
            self.lambda_gamma,
            self.lambda_beta,
            self.lambda_r1,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(ConfigError::Invalid("loss weights must be finite".into()));
        }
        if self.lambda_r1 != 0.0 {
            // the tape has no second-order gradients
            return Err(ConfigError::Invalid(
                "lambda_r1 > 0 is not supported; the R1 penalty needs double backpropagation".into(),
            ));
        }
        Ok(())
    }
}

/// Which guidance modes a generator step trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceSchedule {
    /// Latent- and style-guided losses in every step.
    Both,
    /// Even steps latent-guided, odd steps style-guided.
    Alternate,
}

impl FromStr for GuidanceSchedule {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "both" => Ok(Self::Both),
            "alternate" => Ok(Self::Alternate),
            _ => Err(()),
        }
    }
}

impl GuidanceSchedule {
    fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::Alternate => "alternate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_g: f64,
    pub lr_se: f64,
    pub lr_d: f64,
    pub lr_mn: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub guidance: GuidanceSchedule,
    /// Gaussian std (pixels at `model.resolution`) for landmark heatmaps.
    pub heatmap_sigma: f64,
    /// Eye-shadow ring width at 256²; scaled with resolution.
    pub eye_ring_px_at_256: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            batch_size: 4,
            total_steps: 100_000,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            lr_g: 1e-4,
            lr_se: 1e-4,
            lr_d: 1e-4,
            lr_mn: 1e-6,
            ema_decay: 0.999,
            seed: 0,
            checkpoint_every: 1000,
            guidance: GuidanceSchedule::Both,
            heatmap_sigma: 1.5,
            eye_ring_px_at_256: 12,
        }
    }
}

impl TrainConfig {
    /// The 64² desk-scale configuration used by the smoke tests.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            total_steps: 500,
            checkpoint_every: 100,
            heatmap_sigma: 1.0,
            ..Self::default()
        }
    }

    /// Desk configuration with faster G and SE learning rates, used for the
    /// 500-step overfit run on the 8-image fixture.
    pub fn tiny_overfit() -> Self {
        Self {
            lr_g: 1e-3,
            lr_se: 1e-3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.weights.validate()?;
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        for (name, lr) in [
            ("lr_g", self.lr_g),
            ("lr_se", self.lr_se),
            ("lr_d", self.lr_d),
            ("lr_mn", self.lr_mn),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0")));
            }
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return fail("ema_decay must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be >= 1");
        }
        if !(self.heatmap_sigma > 0.0) {
            return fail("heatmap_sigma must be > 0");
        }
        Ok(())
    }

    /// Eye-shadow ring width at the configured resolution.
    pub fn eye_ring_px(&self) -> usize {
        ((self.eye_ring_px_at_256 * self.model.resolution) as f64 / 256.0).round() as usize
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parse `key = value` lines on top of the desk defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn p<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
            })
        }
        let m = &mut self.model;
        let w = &mut self.weights;
        match key {
            "resolution" => m.resolution = p(key, value)?,
            "style_dim" => m.style_dim = p(key, value)?,
            "base_channels" => m.base_channels = p(key, value)?,
            "max_channels" => m.max_channels = p(key, value)?,
            "down_stages" => m.down_stages = p(key, value)?,
            "encoder_res_blocks" => m.encoder_res_blocks = p(key, value)?,
            "decoder_res_blocks" => m.decoder_res_blocks = p(key, value)?,
            "trunk_down_stages" => m.trunk_down_stages = p(key, value)?,
            "mapping_hidden" => m.mapping_hidden = p(key, value)?,
            "mapping_layers" => m.mapping_layers = p(key, value)?,
            "lambda_adv" => w.lambda_adv = p(key, value)?,
            "lambda_sd" => w.lambda_sd = p(key, value)?,
            "lambda_sr" => w.lambda_sr = p(key, value)?,
            "lambda_cyc" => w.lambda_cyc = p(key, value)?,
            "lambda_makeup" => w.lambda_makeup = p(key, value)?,
            "lambda_guide" => w.lambda_guide = p(key, value)?,
            "lambda_lips" => w.lambda_lips = p(key, value)?,
            "lambda_eyes" => w.lambda_eyes = p(key, value)?,
            "lambda_face" => w.lambda_face = p(key, value)?,
            "lambda_gamma" => w.lambda_gamma = p(key, value)?,
            "lambda_beta" => w.lambda_beta = p(key, value)?,
            "lambda_r1" => w.lambda_r1 = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "total_steps" => self.total_steps = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "lr_g" => self.lr_g = p(key, value)?,
            "lr_se" => self.lr_se = p(key, value)?,
            "lr_d" => self.lr_d = p(key, value)?,
            "lr_mn" => self.lr_mn = p(key, value)?,
            "ema_decay" => self.ema_decay = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "guidance" => self.guidance = p(key, value)?,
            "heatmap_sigma" => self.heatmap_sigma = p(key, value)?,
            "eye_ring_px_at_256" => self.eye_ring_px_at_256 = p(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; `parse(to_kv_string())` round-trips.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        write_model_kv(&mut s, &self.model);
        let w = &self.weights;
        for (k, v) in [
            ("lambda_adv", w.lambda_adv),
            ("lambda_sd", w.lambda_sd),
            ("lambda_sr", w.lambda_sr),
            ("lambda_cyc", w.lambda_cyc),
            ("lambda_makeup", w.lambda_makeup),
            ("lambda_guide", w.lambda_guide),
            ("lambda_lips", w.lambda_lips),
            ("lambda_eyes", w.lambda_eyes),
            ("lambda_face", w.lambda_face),
            ("lambda_gamma", w.lambda_gamma),
            ("lambda_beta", w.lambda_beta),
            ("lambda_r1", w.lambda_r1),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        for (k, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
            ("weight_decay", self.weight_decay),
            ("lr_g", self.lr_g),
            ("lr_se", self.lr_se),
            ("lr_d", self.lr_d),
            ("lr_mn", self.lr_mn),
            ("ema_decay", self.ema_decay),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "guidance = {}", self.guidance.as_str());
        let _ = writeln!(s, "heatmap_sigma = {:?}", self.heatmap_sigma);
        let _ = writeln!(s, "eye_ring_px_at_256 = {}", self.eye_ring_px_at_256);
        s
    }
}

fn write_model_kv(s: &mut String, m: &ModelConfig) {
    for (k, v) in [
        ("resolution", m.resolution),
        ("style_dim", m.style_dim),
        ("base_channels", m.base_channels),
        ("max_channels", m.max_channels),
        ("down_stages", m.down_stages),
        ("encoder_res_blocks", m.encoder_res_blocks),
        ("decoder_res_blocks", m.decoder_res_blocks),
        ("trunk_down_stages", m.trunk_down_stages),
        ("mapping_hidden", m.mapping_hidden),
        ("mapping_layers", m.mapping_layers),
    ] {
        let _ = writeln!(s, "{k} = {v}");
    }
}
