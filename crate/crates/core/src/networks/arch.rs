//! Layer layout and graph-level forward passes of the four networks.
//!
//! Parameter names are `<network>.<layer>.<w|b>` with network prefixes
//! `se` (style encoder), `mn` (mapping network), `gen` (generator: `enc`,
//! `dec_s`, `dec_i`) and `disc` (discriminator).

use super::params::{Binding, ParamSpec, SpecBuilder};
use crate::autograd::{Graph, Tensor, Var};
use crate::config::{ModelConfig, LATENT_DIM, NUM_DOMAINS};
use crate::domain::Domain;

pub const NORM_EPS: f64 = 1e-5;
pub const LRELU_SLOPE: f64 = 0.2;

/// Which network a parameter set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetKind {
    StyleEncoder,
    Mapping,
    Generator,
    Discriminator,
}

impl NetKind {
    pub const ALL: [NetKind; 4] = [
        NetKind::StyleEncoder,
        NetKind::Mapping,
        NetKind::Generator,
        NetKind::Discriminator,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            NetKind::StyleEncoder => "se",
            NetKind::Mapping => "mn",
            NetKind::Generator => "gen",
            NetKind::Discriminator => "disc",
        }
    }

    pub fn specs(self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut b = SpecBuilder::default();
        match self {
            NetKind::StyleEncoder => {
                trunk_specs(&mut b, "se", cfg);
                let c = cfg.channels_at(cfg.trunk_down_stages);
                for d in 0..NUM_DOMAINS {
                    b.linear(&format!("se.head{d}"), c, cfg.style_dim);
                }
            }
            NetKind::Discriminator => {
                trunk_specs(&mut b, "disc", cfg);
                let c = cfg.channels_at(cfg.trunk_down_stages);
                // one output row per domain branch
                b.linear("disc.heads", c, NUM_DOMAINS);
            }
            NetKind::Mapping => {
                let mut fin = LATENT_DIM;
                for i in 0..cfg.mapping_layers {
                    b.linear(&format!("mn.fc{i}"), fin, cfg.mapping_hidden);
                    fin = cfg.mapping_hidden;
                }
                for d in 0..NUM_DOMAINS {
                    b.linear(&format!("mn.head{d}"), fin, cfg.style_dim);
                }
            }
            NetKind::Generator => generator_specs(&mut b, cfg),
        }
        b.specs
    }
}

fn trunk_specs(b: &mut SpecBuilder, prefix: &str, cfg: &ModelConfig) {
    b.conv(&format!("{prefix}.conv0"), 3, cfg.channels_at(0), 3);
    for i in 1..=cfg.trunk_down_stages {
        b.conv(
            &format!("{prefix}.conv{i}"),
            cfg.channels_at(i - 1),
            cfg.channels_at(i),
            3,
        );
    }
}

fn generator_specs(b: &mut SpecBuilder, cfg: &ModelConfig) {
    let k = cfg.down_stages;
    b.conv("gen.enc.stem", 3, cfg.channels_at(0), 3);
    for i in 1..=k {
        b.conv(
            &format!("gen.enc.down{i}"),
            cfg.channels_at(i - 1),
            cfg.channels_at(i),
            3,
        );
    }
    let cb = cfg.channels_at(k);
    for r in 0..cfg.encoder_res_blocks {
        b.conv(&format!("gen.enc.res{r}.conv1"), cb, cb, 3);
        b.conv(&format!("gen.enc.res{r}.conv2"), cb, cb, 3);
    }
    for (dec, styled) in [("dec_s", true), ("dec_i", false)] {
        for r in 0..cfg.decoder_res_blocks {
            for j in 1..=2 {
                b.conv(&format!("gen.{dec}.res{r}.conv{j}"), cb, cb, 3);
                if styled {
                    b.linear(&format!("gen.{dec}.res{r}.ada{j}"), cfg.style_dim, 2 * cb);
                }
            }
        }
        for i in (1..=k).rev() {
            let (cin, cout) = (cfg.channels_at(i), cfg.channels_at(i - 1));
            b.conv(&format!("gen.{dec}.up{i}"), cin, cout, 3);
            if styled {
                b.linear(&format!("gen.{dec}.up{i}.ada"), cfg.style_dim, 2 * cout);
            }
        }
        b.conv(&format!("gen.{dec}.to_rgb"), cfg.channels_at(0), 3, 3);
    }
}

/// Per-domain one-hot weights, used to select unshared heads row by row.
fn domain_rows(domains: &[Domain], d: usize) -> Vec<f64> {
    domains.iter().map(|x| x.onehot()[d]).collect()
}

/// AdaIN: instance-normalize `x`, then scale by `1 + ĝ` and shift by `β`
/// where `(ĝ, β)` come from a learned linear map of the style code.
pub fn adain_layer(g: &mut Graph, b: &Binding, head: &str, x: Var, style: Var) -> Var {
    let c = g.shape(x)[1];
    let (w, bias) = b.wb(g, head);
    let fc = g.linear(style, w, bias);
    let gamma_hat = g.slice_cols(fc, 0, c);
    let gamma = g.add_scalar(gamma_hat, 1.0);
    let beta = g.slice_cols(fc, c, c);
    let n = g.instance_norm(x, NORM_EPS);
    g.affine_channel(n, gamma, beta)
}

fn conv(g: &mut Graph, b: &Binding, layer: &str, x: Var, stride: usize) -> Var {
    let (w, bias) = b.wb(g, layer);
    g.conv2d(x, w, bias, stride, 1)
}

/// Output of the shared convolution trunk of SE and D.
pub struct TrunkOutput {
    /// Spatially pooled final activation, `[N, C]`.
    pub pooled: Var,
    /// Raw output of every convolution layer, shallow to deep.
    pub features: Vec<Var>,
}

pub fn trunk(g: &mut Graph, b: &Binding, prefix: &str, cfg: &ModelConfig, x: Var) -> TrunkOutput {
    let mut features = Vec::with_capacity(cfg.trunk_conv_layers());
    let mut h = conv(g, b, &format!("{prefix}.conv0"), x, 1);
    features.push(h);
    for i in 1..=cfg.trunk_down_stages {
        let a = g.leaky_relu(h, LRELU_SLOPE);
        h = conv(g, b, &format!("{prefix}.conv{i}"), a, 2);
        features.push(h);
    }
    let a = g.leaky_relu(h, LRELU_SLOPE);
    TrunkOutput {
        pooled: g.mean_spatial(a),
        features,
    }
}

/// `s_e = SE_c(image ∘ full_face_mask)`, shape `[N, style_dim]`.
pub fn encode_style(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    image: Var,
    full_face_mask: Var,
    domains: &[Domain],
) -> Var {
    let masked = g.mul_channel_bcast(image, full_face_mask);
    let t = trunk(g, b, "se", cfg, masked);
    select_heads(g, b, "se", t.pooled, domains)
}

fn select_heads(g: &mut Graph, b: &Binding, prefix: &str, h: Var, domains: &[Domain]) -> Var {
    let mut out: Option<Var> = None;
    for d in 0..NUM_DOMAINS {
        let (w, bias) = b.wb(g, &format!("{prefix}.head{d}"));
        let y = g.linear(h, w, bias);
        let y = g.scale_rows(y, domain_rows(domains, d));
        out = Some(match out {
            Some(acc) => g.add(acc, y),
            None => y,
        });
    }
    out.expect("at least one domain")
}

/// `s_m = MN_c(z)`: shared ReLU MLP followed by the domain's linear head.
pub fn map_latent(g: &mut Graph, b: &Binding, cfg: &ModelConfig, z: Var, domains: &[Domain]) -> Var {
    let mut h = z;
    for i in 0..cfg.mapping_layers {
        let (w, bias) = b.wb(g, &format!("mn.fc{i}"));
        let y = g.linear(h, w, bias);
        h = g.relu(y);
    }
    select_heads(g, b, "mn", h, domains)
}

/// Raw logit of the domain-selected discriminator branch, shape `[N]`.
pub fn discriminate(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    image: Var,
    domains: &[Domain],
) -> Var {
    let t = trunk(g, b, "disc", cfg, image);
    let (w, bias) = b.wb(g, "disc.heads");
    let logits = g.linear(t.pooled, w, bias);
    let sel = Tensor::new(
        vec![domains.len(), NUM_DOMAINS],
        domains.iter().flat_map(|d| d.onehot()).collect(),
    );
    g.row_dot(logits, sel)
}

/// Shared-encoder output: bottleneck plus the stage outputs used as skips.
#[derive(Clone, Debug)]
pub struct Content {
    pub bottleneck: Var,
    /// `skips[i]` is the (heatmap-augmented) output of encoder stage `i`,
    /// at resolution `H / 2^i`.
    pub skips: Vec<Var>,
}

/// Bilinear resize (half-pixel centres) of a `[N, 1, H, W]` map.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// `Enc(image)` with the landmark heatmap added to every stage output.
pub fn encode_content(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    image: Var,
    heatmap: &Tensor,
) -> Content {
    let res = g.shape(image)[2];
    let mut skips = Vec::with_capacity(cfg.down_stages + 1);
    let mut h = image;
    for stage in 0..=cfg.down_stages {
        let (layer, stride) = if stage == 0 {
            ("gen.enc.stem".to_string(), 1)
        } else {
            (format!("gen.enc.down{stage}"), 2)
        };
        let y = conv(g, b, &layer, h, stride);
        let y = g.instance_norm(y, NORM_EPS);
        let y = g.leaky_relu(y, LRELU_SLOPE);
        let size = res >> stage;
        let hm = g.constant(resize_bilinear(heatmap, size, size));
        h = g.add_channel_bcast(y, hm);
        skips.push(h);
    }
    for r in 0..cfg.encoder_res_blocks {
        let y = conv(g, b, &format!("gen.enc.res{r}.conv1"), h, 1);
        let y = g.instance_norm(y, NORM_EPS);
        let y = g.leaky_relu(y, LRELU_SLOPE);
        let y = conv(g, b, &format!("gen.enc.res{r}.conv2"), y, 1);
        let y = g.instance_norm(y, NORM_EPS);
        h = g.add(h, y);
    }
    Content {
        bottleneck: h,
        skips,
    }
}

/// Style-guided decoder when `style` is given, style-invariant otherwise.
fn decode(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    content: &Content,
    style: Option<Var>,
) -> Var {
    let dec = if style.is_some() { "dec_s" } else { "dec_i" };
    let norm = |g: &mut Graph, head: &str, x: Var| match style {
        Some(s) => adain_layer(g, b, head, x, s),
        None => g.instance_norm(x, NORM_EPS),
    };
    let mut h = content.bottleneck;
    for r in 0..cfg.decoder_res_blocks {
        let y = conv(g, b, &format!("gen.{dec}.res{r}.conv1"), h, 1);
        let y = norm(g, &format!("gen.{dec}.res{r}.ada1"), y);
        let y = g.leaky_relu(y, LRELU_SLOPE);
        let y = conv(g, b, &format!("gen.{dec}.res{r}.conv2"), y, 1);
        let y = norm(g, &format!("gen.{dec}.res{r}.ada2"), y);
        h = g.add(h, y);
    }
    for i in (1..=cfg.down_stages).rev() {
        let u = g.upsample2x(h);
        let y = conv(g, b, &format!("gen.{dec}.up{i}"), u, 1);
        let y = norm(g, &format!("gen.{dec}.up{i}.ada"), y);
        let y = g.leaky_relu(y, LRELU_SLOPE);
        h = g.add(y, content.skips[i - 1]);
    }
    let y = conv(g, b, &format!("gen.{dec}.to_rgb"), h, 1);
    g.tanh(y)
}

/// `G_s(content, s)`.
pub fn decode_styled(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    content: &Content,
    style: Var,
) -> Var {
    decode(g, b, cfg, content, Some(style))
}

/// `G_i(content)`: same topology, instance normalization, no style input.
pub fn decode_invariant(g: &mut Graph, b: &Binding, cfg: &ModelConfig, content: &Content) -> Var {
    decode(g, b, cfg, content, None)
}

/// `G_sg(image, s) = G_s(Enc(image), s)`.
pub fn generate(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    image: Var,
    heatmap: &Tensor,
    style: Var,
) -> Var {
    let content = encode_content(g, b, cfg, image, heatmap);
    decode_styled(g, b, cfg, &content, style)
}
