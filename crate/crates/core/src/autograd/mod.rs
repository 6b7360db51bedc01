//! Minimal eager reverse-mode automatic differentiation over `f64` tensors.

pub mod check;
mod graph;
mod kernels;
mod tensor;

pub use graph::{sigmoid, softplus, Gradients, Graph, Var};
pub use kernels::channel_stats;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::check::{numerical_gradient, relative_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(build(x))/dx against central differences.
    fn check(x: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numerical_gradient(x, 1e-5, |p| {
            let mut g = Graph::new();
            let v = g.constant(p.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        });
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(y));
        let w = g.constant(w);
        let p = g.mul(y, w);
        g.mean(p)
    }

    #[test]
    fn grad_conv2d_all_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        for stride in [1, 2] {
            check(&x, |g, v| {
                let wv = g.constant(w.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(v, wv, bv, stride, 1);
                weighted_sum(g, y, 7)
            });
            check(&w, |g, wv| {
                let xv = g.constant(x.clone());
                let bv = g.constant(b.clone());
                let y = g.conv2d(xv, wv, bv, stride, 1);
                weighted_sum(g, y, 7)
            });
        }
    }

    #[test]
    fn grad_instance_norm_and_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let gamma = rand_tensor(&mut rng, &[2, 3]);
        check(&x, |g, v| {
            let y = g.instance_norm(v, 1e-5);
            weighted_sum(g, y, 3)
        });
        check(&gamma, |g, gv| {
            let xv = g.constant(x.clone());
            let bv = g.constant(Tensor::zeros(&[2, 3]));
            let y = g.affine_channel(xv, gv, bv);
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn grad_linear_and_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[4]);
        check(&x, |g, v| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.linear(v, wv, bv);
            let y = g.leaky_relu(y, 0.2);
            let y = g.tanh(y);
            let y = g.softplus(y);
            weighted_sum(g, y, 5)
        });
        check(&w, |g, wv| {
            let xv = g.constant(x.clone());
            let bv = g.constant(b.clone());
            let y = g.linear(xv, wv, bv);
            let y = g.slice_cols(y, 1, 2);
            let y = g.scale_rows(y, vec![1.0, 0.0, -2.0]);
            weighted_sum(g, y, 6)
        });
    }

    #[test]
    fn grad_broadcasts_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let m = rand_tensor(&mut rng, &[2, 1, 4, 4]);
        check(&m, |g, mv| {
            let xv = g.constant(x.clone());
            let a = g.mul_channel_bcast(xv, mv);
            let b = g.add_channel_bcast(a, mv);
            let u = g.upsample2x(b);
            let s = g.mean_spatial(u);
            weighted_sum(g, s, 8)
        });
        check(&x, |g, v| {
            let a = g.mean_abs(v);
            let r = g.rms(v);
            let s = g.add(a, r);
            g.add_scalar(s, 3.0)
        });
        let logits = rand_tensor(&mut rng, &[3, 2]);
        check(&logits, |g, v| {
            let sel = g.row_dot(v, Tensor::new(vec![3, 2], vec![1., 0., 0., 1., 1., 0.]));
            let sp = g.softplus(sel);
            g.mean(sp)
        });
    }

    #[test]
    fn sqrt_has_zero_subgradient_at_origin() {
        let mut g = Graph::new();
        let v = g.variable(Tensor::zeros(&[2, 2]));
        let r = g.rms(v);
        let grads = g.backward(r);
        assert!(grads.get(v).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut g = Graph::new();
        let w = Tensor::ones(&[1, 2]);
        let a = g.param("frozen.w", &w, false);
        let b = g.param("live.w", &w, true);
        let again = g.param("live.w", &w, true);
        assert_eq!(b, again);
        let s = g.add(a, b);
        let out = g.mean(s);
        let grads = g.backward(out);
        assert!(grads.get(a).is_none());
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg["live.w"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }
}
