//! Exact histogram matching and the masked feature-space histogram loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::{Graph, Tensor, Var};
use crate::config::ModelConfig;
use crate::networks::{arch, Binding, Params};

#[derive(Debug, Error, PartialEq)]
pub enum HistogramError {
    #[error("histogram matching needs non-empty populations")]
    EmptyPopulation,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Indices of `values` in ascending order, ties broken by position.
fn stable_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

/// Linear-interpolated quantile of an ascending `sorted` slice at fractional
/// position `p` in `[0, len - 1]`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = p - lo as f64;
    if t == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + t * (sorted[hi] - sorted[lo])
    }
}

/// Replace each source value by the target quantile at the value's rank.
///
/// The source is ranked by a stable sort, so tied values get consecutive
/// ranks. Rank `r` of `n` maps to the target order statistic at position
/// `r (m - 1) / (n - 1)`, interpolated linearly; a single source value maps
/// to the target median position.
pub fn match_histogram(source: &[f64], target: &[f64]) -> Result<Vec<f64>, HistogramError> {
    if source.is_empty() || target.is_empty() {
        return Err(HistogramError::EmptyPopulation);
    }
    let (n, m) = (source.len(), target.len());
    let mut sorted_t = target.to_vec();
    sorted_t.sort_by(f64::total_cmp);
    let mut out = vec![0.0; n];
    for (rank, &i) in stable_order(source).iter().enumerate() {
        let p = if n == 1 {
            (m - 1) as f64 / 2.0
        } else {
            rank as f64 * (m - 1) as f64 / (n - 1) as f64
        };
        out[i] = quantile(&sorted_t, p);
    }
    Ok(out)
}

/// Nearest-neighbour downsampling of `[N, 1, H, W]` masks to `h × w`,
/// binarized at `> 0.5`.
pub fn downsample_mask(mask: &Tensor, h: usize, w: usize) -> Tensor {
    let s = mask.shape();
    let (n, mh, mw) = (s[0], s[2], s[3]);
    let src = mask.data();
    Tensor::from_fn(&[n, 1, h, w], |i| {
        let (b, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = y * mh / h;
        let sx = x * mw / w;
        if src[b * mh * mw + sy * mw + sx] > 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

/// Why a sample contributed nothing to one layer's loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmptyRegion {
    pub layer: usize,
    pub sample: usize,
}

/// Fixed histogram-matched targets for one feature layer.
#[derive(Clone, Debug)]
pub struct LayerTarget {
    /// Matched values at in-mask positions, zero elsewhere.
    pub target: Tensor,
    /// `[N, 1, h, w]` support actually used by the loss.
    pub support: Tensor,
    /// `channels × Σ support`, the normalizer of the mean-reduced norm.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct HistogramTargets {
    pub layers: Vec<LayerTarget>,
    pub empty: Vec<EmptyRegion>,
}

fn masked_positions(mask: &[f64]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.5)
        .map(|(i, _)| i)
        .collect()
}

/// Per-channel histogram matching of the generated features onto the
/// reference features, over each layer's downsampled mask supports.
pub fn compute_targets(
    gen_feats: &[Tensor],
    ref_feats: &[Tensor],
    gen_mask: &Tensor,
    ref_mask: &Tensor,
) -> Result<HistogramTargets, HistogramError> {
    if gen_feats.len() != ref_feats.len() {
        return Err(HistogramError::ShapeMismatch(format!(
            "{} generated layers vs {} reference layers",
            gen_feats.len(),
            ref_feats.len()
        )));
    }
    let mut layers = Vec::with_capacity(gen_feats.len());
    let mut empty = Vec::new();
    for (l, (gf, rf)) in gen_feats.iter().zip(ref_feats).enumerate() {
        let s = gf.shape();
        if s.len() != 4 || rf.shape() != s {
            return Err(HistogramError::ShapeMismatch(format!(
                "layer {l}: {:?} vs {:?}",
                s,
                rf.shape()
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let gm = downsample_mask(gen_mask, h, w);
        let rm = downsample_mask(ref_mask, h, w);
        let mut target = Tensor::zeros(s);
        let mut support = Tensor::zeros(&[n, 1, h, w]);
        let mut count = 0;
        for b in 0..n {
            let gpos = masked_positions(&gm.data()[b * hw..(b + 1) * hw]);
            let rpos = masked_positions(&rm.data()[b * hw..(b + 1) * hw]);
            if gpos.is_empty() || rpos.is_empty() {
                empty.push(EmptyRegion { layer: l, sample: b });
                continue;
            }
            for &p in &gpos {
                support.data_mut()[b * hw + p] = 1.0;
            }
            count += c * gpos.len();
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let src: Vec<f64> = gpos.iter().map(|&p| gf.data()[base + p]).collect();
                let tgt: Vec<f64> = rpos.iter().map(|&p| rf.data()[base + p]).collect();
                let matched = match_histogram(&src, &tgt)?;
                for (&p, v) in gpos.iter().zip(matched) {
                    target.data_mut()[base + p] = v;
                }
            }
        }
        layers.push(LayerTarget {
            target,
            support,
            count,
        });
    }
    Ok(HistogramTargets { layers, empty })
}

/// `Σ_l sqrt(Σ_support (φ_l − target_l)² / count_l)` with the targets held
/// constant; layers without support contribute zero.
pub fn loss_from_targets(g: &mut Graph, gen_feats: &[Var], targets: &HistogramTargets) -> Var {
    let mut total = g.constant(Tensor::scalar(0.0));
    for (&f, t) in gen_feats.iter().zip(&targets.layers) {
        if t.count == 0 {
            continue;
        }
        let tv = g.constant(t.target.clone());
        let m = g.constant(t.support.clone());
        let diff = g.sub(f, tv);
        let masked = g.mul_channel_bcast(diff, m);
        let ss = g.sum_square(masked);
        let ms = g.scale(ss, 1.0 / t.count as f64);
        let norm = g.sqrt(ms);
        total = g.add(total, norm);
    }
    total
}

/// Style-encoder trunk features of `image ∘ mask`, one per convolution layer.
pub fn masked_feature_vars(
    g: &mut Graph,
    se: &Binding,
    cfg: &ModelConfig,
    image: Var,
    mask: &Tensor,
) -> Vec<Var> {
    let m = g.constant(mask.clone());
    let x = g.mul_channel_bcast(image, m);
    arch::trunk(g, se, "se", cfg, x).features
}

/// Tensor-level feature extraction; `images` `[N, 3, H, W]`, `mask` `[N, 1, H, W]`.
pub fn extract_masked_features(
    se: &Params,
    cfg: &ModelConfig,
    images: &Tensor,
    mask: &Tensor,
) -> Result<Vec<Tensor>, HistogramError> {
    check_pair(images, mask)?;
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let feats = masked_feature_vars(&mut g, &Binding::frozen(se), cfg, x, mask);
    Ok(feats.iter().map(|&v| g.value(v).clone()).collect())
}

fn check_pair(images: &Tensor, mask: &Tensor) -> Result<(), HistogramError> {
    let s = images.shape();
    let m = mask.shape();
    if s.len() != 4 || m.len() != 4 || m[0] != s[0] || m[1] != 1 || m[2..] != s[2..] {
        return Err(HistogramError::ShapeMismatch(format!(
            "image {s:?} vs mask {m:?}"
        )));
    }
    Ok(())
}

/// Graph-level region loss: gradients flow into `generated` (and the
/// style-encoder parameters if bound trainable); the reference side and the
/// matched targets are constants.
#[allow(clippy::too_many_arguments)]
pub fn region_histogram_loss_var(
    g: &mut Graph,
    se: &Binding,
    cfg: &ModelConfig,
    generated: Var,
    reference: &Tensor,
    gen_mask: &Tensor,
    ref_mask: &Tensor,
) -> Result<(Var, Vec<EmptyRegion>), HistogramError> {
    check_pair(g.value(generated), gen_mask)?;
    let feats = masked_feature_vars(g, se, cfg, generated, gen_mask);
    let gen_vals: Vec<Tensor> = feats.iter().map(|&v| g.value(v).clone()).collect();
    let ref_vals = extract_masked_features(se.params, cfg, reference, ref_mask)?;
    let targets = compute_targets(&gen_vals, &ref_vals, gen_mask, ref_mask)?;
    let loss = loss_from_targets(g, &feats, &targets);
    Ok((loss, targets.empty))
}

/// Value of the region loss plus the empty-support flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLoss {
    pub value: f64,
    pub empty: Vec<EmptyRegion>,
}

pub fn region_histogram_loss(
    se: &Params,
    cfg: &ModelConfig,
    generated: &Tensor,
    reference: &Tensor,
    gen_mask: &Tensor,
    ref_mask: &Tensor,
) -> Result<RegionLoss, HistogramError> {
    let mut g = Graph::new();
    let x = g.constant(generated.clone());
    let (loss, empty) = region_histogram_loss_var(
        &mut g,
        &Binding::frozen(se),
        cfg,
        x,
        reference,
        gen_mask,
        ref_mask,
    )?;
    Ok(RegionLoss {
        value: g.value(loss).item(),
        empty,
    })
}

/// Sort-based reference implementation: ranks by counting, quantile by
/// explicit bracketing. Independent of [`match_histogram`]'s code path.
pub fn oracle_match(source: &[f64], target: &[f64]) -> Vec<f64> {
    let n = source.len();
    let m = target.len();
    let mut t = target.to_vec();
    // insertion sort keeps the oracle free of library sorting
    for i in 1..m {
        let mut j = i;
        while j > 0 && t[j - 1] > t[j] {
            t.swap(j - 1, j);
            j -= 1;
        }
    }
    source
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let rank = source
                .iter()
                .enumerate()
                .filter(|&(j, &u)| u < v || (u == v && j < i))
                .count();
            if n == m {
                return t[rank];
            }
            let pos = if n == 1 {
                0.5 * (m - 1) as f64
            } else {
                (rank * (m - 1)) as f64 / (n - 1) as f64
            };
            let k = (0..m).rev().find(|&k| k as f64 <= pos).unwrap_or(0);
            if k + 1 >= m {
                t[m - 1]
            } else {
                let frac = pos - k as f64;
                (1.0 - frac) * t[k] + frac * t[k + 1]
            }
        })
        .collect()
}

/// Outcome of the randomized oracle comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfTestReport {
    pub pairs: usize,
    pub max_oracle_error: f64,
    pub max_idempotence_error: f64,
    pub multiset_failures: usize,
}

impl SelfTestReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_oracle_error <= tol && self.max_idempotence_error <= tol && self.multiset_failures == 0
    }
}

/// Random population of length `1..=max_len` drawn from a small lattice so
/// ties are common.
pub fn random_population(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<f64> {
    let len = rng.random_range(1..=max_len);
    let lattice = rng.random_bool(0.5);
    (0..len)
        .map(|_| {
            if lattice {
                rng.random_range(-4i32..=4) as f64 * 0.5
            } else {
                rng.random_range(-3.0..3.0)
            }
        })
        .collect()
}

/// Compare [`match_histogram`] with [`oracle_match`] on random pairs,
/// including ties and unequal lengths.
pub fn self_test(pairs: usize, max_len: usize, seed: u64) -> SelfTestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SelfTestReport {
        pairs,
        max_oracle_error: 0.0,
        max_idempotence_error: 0.0,
        multiset_failures: 0,
    };
    for i in 0..pairs {
        let s = random_population(&mut rng, max_len);
        let t = if i % 4 == 0 {
            // equal lengths exercise exact multiset transfer
            let mut t = random_population(&mut rng, max_len);
            t.resize(s.len(), 0.25);
            t
        } else {
            random_population(&mut rng, max_len)
        };
        let out = match_histogram(&s, &t).expect("non-empty");
        let want = oracle_match(&s, &t);
        for (a, b) in out.iter().zip(&want) {
            report.max_oracle_error = report.max_oracle_error.max((a - b).abs());
        }
        let again = match_histogram(&out, &t).expect("non-empty");
        for (a, b) in again.iter().zip(&out) {
            report.max_idempotence_error = report.max_idempotence_error.max((a - b).abs());
        }
        if s.len() == t.len() {
            let mut so = out.clone();
            let mut st = t.clone();
            so.sort_by(f64::total_cmp);
            st.sort_by(f64::total_cmp);
            if so != st {
                report.multiset_failures += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{numerical_gradient, relative_error};
    use crate::networks::Networks;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn worked_example() {
        let out = match_histogram(&[4.0, 1.0, 3.0, 2.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(out, vec![40.0, 10.0, 30.0, 20.0]);
    }

    #[test]
    fn ties_follow_stable_ranks() {
        let s = [5.0, 5.0, 5.0];
        assert_eq!(match_histogram(&s, &[7.0, 7.0, 7.0]).unwrap(), vec![7.0; 3]);
        let out = match_histogram(&s, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(out, oracle_match(&s, &[3.0, 1.0, 2.0]));
        assert_eq!(out, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn unequal_lengths_interpolate() {
        assert_eq!(match_histogram(&[2.0, 1.0], &[0.0, 1.0, 4.0]).unwrap(), vec![4.0, 0.0]);
        assert_eq!(match_histogram(&[9.0], &[0.0, 1.0, 4.0, 5.0]).unwrap(), vec![2.5]);
        // three source ranks over five targets: positions 0, 2, 4
        let out = match_histogram(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(out, vec![1.0, 3.0, 5.0]);
        assert_eq!(match_histogram(&[], &[1.0]), Err(HistogramError::EmptyPopulation));
        assert_eq!(match_histogram(&[1.0], &[]), Err(HistogramError::EmptyPopulation));
    }

    #[test]
    fn self_test_passes() {
        let r = self_test(200, 64, 1);
        assert!(r.passed(1e-9), "{r:?}");
    }

    #[test]
    fn mask_downsampling_is_nearest() {
        let m = Tensor::new(
            vec![1, 1, 4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 1.0, 1.0,
            ],
        );
        assert_eq!(downsample_mask(&m, 2, 2).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(downsample_mask(&m, 4, 4).data(), m.data());
    }

    fn tiny() -> (ModelConfig, Networks) {
        let mut cfg = ModelConfig::desk();
        cfg.resolution = 8;
        cfg.base_channels = 2;
        cfg.max_channels = 4;
        cfg.trunk_down_stages = 2;
        let nets = Networks::init(&cfg, 3);
        (cfg, nets)
    }

    fn rand_img(seed: u64, n: usize, res: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, res, res], |_| rng.random_range(-1.0..1.0))
    }

    fn block_mask(n: usize, res: usize, lo: usize, hi: usize) -> Tensor {
        Tensor::from_fn(&[n, 1, res, res], |i| {
            let (y, x) = ((i / res) % res, i % res);
            if (lo..hi).contains(&y) && (lo..hi).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn self_match_is_zero() {
        let (cfg, nets) = tiny();
        let img = rand_img(1, 2, 8);
        let m = block_mask(2, 8, 2, 7);
        let r = region_histogram_loss(&nets.se, &cfg, &img, &img, &m, &m).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.empty.is_empty());
    }

    #[test]
    fn zero_masks_flag_every_layer() {
        let (cfg, nets) = tiny();
        let img = rand_img(1, 1, 8);
        let z = Tensor::zeros(&[1, 1, 8, 8]);
        let r = region_histogram_loss(&nets.se, &cfg, &img, &rand_img(2, 1, 8), &z, &z).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.empty.len(), cfg.trunk_conv_layers());
    }

    #[test]
    fn feature_stack_depth_and_masking() {
        let (cfg, nets) = tiny();
        let img = rand_img(4, 1, 8);
        let ones = Tensor::ones(&[1, 1, 8, 8]);
        let zeros = Tensor::zeros(&[1, 1, 8, 8]);
        let f1 = extract_masked_features(&nets.se, &cfg, &img, &ones).unwrap();
        assert_eq!(f1.len(), cfg.trunk_conv_layers());
        let plain = extract_masked_features(&nets.se, &cfg, &img, &ones).unwrap();
        assert!(f1.iter().zip(&plain).all(|(a, b)| a.bit_eq(b)));
        let f0 = extract_masked_features(&nets.se, &cfg, &img, &zeros).unwrap();
        let fz = extract_masked_features(&nets.se, &cfg, &Tensor::zeros(&[1, 3, 8, 8]), &ones).unwrap();
        assert!(f0.iter().zip(&fz).all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn pixel_space_collapse_matches_oracle() {
        // identity feature extractor on 1×1×2×2 images
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.2, 0.9, 0.1]);
        let y = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, -1.0, 5.0]);
        let gm = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        let rm = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let targets = compute_targets(&[x.clone()], &[y.clone()], &gm, &rm).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let loss = loss_from_targets(&mut g, &[xv], &targets);
        let src = [0.3, -0.2, 0.1];
        let matched = oracle_match(&src, &[1.0, -1.0, 5.0]);
        let want = (src
            .iter()
            .zip(&matched)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 3.0)
            .sqrt();
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn reference_permutation_within_mask_is_invisible() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.2, 0.9, 0.1]);
        let y1 = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, -1.0, 5.0]);
        let y2 = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 2.0, 1.0, -1.0]);
        let gm = Tensor::ones(&[1, 1, 2, 2]);
        let rm = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]);
        let a = compute_targets(&[x.clone()], &[y1], &gm, &rm).unwrap();
        let b = compute_targets(&[x], &[y2], &gm, &rm).unwrap();
        assert!(a.layers[0].target.bit_eq(&b.layers[0].target));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (cfg, nets) = tiny();
        let img = rand_img(5, 1, 8);
        let reference = rand_img(6, 1, 8);
        let gm = block_mask(1, 8, 1, 7);
        let rm = block_mask(1, 8, 2, 8);
        let se = Binding::frozen(&nets.se);
        let gen_feats = extract_masked_features(&nets.se, &cfg, &img, &gm).unwrap();
        let ref_feats = extract_masked_features(&nets.se, &cfg, &reference, &rm).unwrap();
        let targets = compute_targets(&gen_feats, &ref_feats, &gm, &rm).unwrap();
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.variable(x.clone());
            let f = masked_feature_vars(&mut g, &se, &cfg, v, &gm);
            let l = loss_from_targets(&mut g, &f, &targets);
            (g, v, l)
        };
        let (g, v, l) = eval(&img);
        let analytic = g.backward(l).get(v).unwrap().clone();
        let numeric = numerical_gradient(&img, 1e-5, |x| {
            let (g, _, l) = eval(x);
            g.value(l).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-3, "{err}");
    }

    proptest! {
        #[test]
        fn multiset_transfer_and_rank_order(
            s in proptest::collection::vec(-10.0f64..10.0, 1..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<f64> = (0..s.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = match_histogram(&s, &t).unwrap();
            let mut a = out.clone();
            let mut b = t.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] < s[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }

        #[test]
        fn idempotent_and_self_identity(
            s in proptest::collection::vec(-10.0f64..10.0, 1..40),
            t in proptest::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let once = match_histogram(&s, &t).unwrap();
            let twice = match_histogram(&once, &t).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            prop_assert_eq!(match_histogram(&s, &s).unwrap(), s.clone());
            for (a, b) in once.iter().zip(oracle_match(&s, &t)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
