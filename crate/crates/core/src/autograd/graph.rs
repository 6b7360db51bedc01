use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulChannelBcast(Var, Var),
    AddChannelBcast(Var, Var),
    ScaleRows(Var, Vec<f64>),
    RowDot(Var, Tensor),
    AffineChannel {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    InstanceNorm {
        x: Var,
        means: Vec<f64>,
        stds: Vec<f64>,
        eps: f64,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Upsample2x(Var),
    MeanSpatial(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Mean(Var),
    MeanAbs(Var),
    SumSquare(Var),
    Sqrt(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and records how to propagate gradients
/// back to its parents. Parameters are bound by name; binding the same name
/// twice returns the same leaf so gradients from repeated forward passes
/// accumulate into one entry.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(String, bool), Var>,
    trainable: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a named parameter. Frozen parameters behave as constants; a
    /// frozen and a trainable binding of one name are distinct leaves.
    pub fn param(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        let key = (name.to_string(), trainable);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `x[N,C,H,W] * m[N,1,H,W]`, broadcasting over channels.
    pub fn mul_channel_bcast(&mut self, x: Var, m: Var) -> Var {
        let v = channel_bcast(self.value(x), self.value(m), |a, b| a * b);
        let rg = self.rg(x) || self.rg(m);
        self.push(v, Op::MulChannelBcast(x, m), rg)
    }

    /// `x[N,C,H,W] + h[N,1,H,W]`, broadcasting over channels.
    pub fn add_channel_bcast(&mut self, x: Var, h: Var) -> Var {
        let v = channel_bcast(self.value(x), self.value(h), |a, b| a + b);
        let rg = self.rg(x) || self.rg(h);
        self.push(v, Op::AddChannelBcast(x, h), rg)
    }

    /// Multiply row `i` of `x` (leading axis) by the constant `k[i]`.
    pub fn scale_rows(&mut self, x: Var, k: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape()[0], k.len());
        let per = xv.len() / k.len();
        let mut v = xv.clone();
        for (row, &s) in v.data_mut().chunks_mut(per).zip(&k) {
            for e in row {
                *e *= s;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::ScaleRows(x, k), rg)
    }

    /// Row-wise dot product of `x[N,F]` with a constant `c[N,F]`, giving `[N]`.
    pub fn row_dot(&mut self, x: Var, c: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), c.shape());
        let f = xv.shape()[1];
        let out: Vec<f64> = xv
            .data()
            .chunks(f)
            .zip(c.data().chunks(f))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect();
        let n = out.len();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n], out), Op::RowDot(x, c), rg)
    }

    /// `x[N,C,H,W] * gamma[N,C] + beta[N,C]`.
    pub fn affine_channel(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let hw = s[2] * s[3];
        assert_eq!(self.value(gamma).shape(), &s[..2], "gamma shape");
        assert_eq!(self.value(beta).shape(), &s[..2], "beta shape");
        let mut v = xv.clone();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        for (idx, plane) in v.data_mut().chunks_mut(hw).enumerate() {
            for e in plane {
                *e = *e * gv[idx] + bv[idx];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(v, Op::AffineChannel { x, gamma, beta }, rg)
    }

    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (v, means, stds) = kernels::instance_norm_forward(self.value(x), eps);
        let rg = self.rg(x);
        self.push(
            v,
            Op::InstanceNorm {
                x,
                means,
                stds,
                eps,
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let v = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        assert_eq!(self.shape(x)[1], self.shape(w)[1], "linear fan-in mismatch");
        let v = kernels::linear_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(v, Op::Linear { x, w, b }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > 0.0 { a } else { a * slope });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        let rg = self.rg(x);
        self.push(v, Op::Softplus(x), rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = kernels::upsample2x_forward(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::Upsample2x(x), rg)
    }

    /// Spatial average `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let hw = s[2] * s[3];
        let out: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = vec![s[0], s[1]];
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::MeanSpatial(x), rg)
    }

    /// Columns `start..start+len` of `x[N,F]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let f = xv.shape()[1];
        assert!(start + len <= f);
        let out: Vec<f64> = xv
            .data()
            .chunks(f)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let shape = vec![xv.shape()[0], len];
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out), Op::SliceCols { x, start }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.data().iter().map(|a| a.abs()).sum::<f64>() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::MeanAbs(x), rg)
    }

    pub fn sum_square(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).data().iter().map(|a| a * a).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumSquare(x), rg)
    }

    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0).sqrt());
        let rg = self.rg(x);
        self.push(v, Op::Sqrt(x), rg)
    }

    /// Root-mean-square of all elements.
    pub fn rms(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let ss = self.sum_square(x);
        let ms = self.scale(ss, 1.0 / n);
        self.sqrt(ms)
    }

    /// Names of trainable parameters bound so far, in binding order.
    pub fn trainable_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.trainable.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradient of each trainable parameter (zeros when unreachable).
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
                (name.clone(), g)
            })
            .collect()
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::ones(self.shape(out)));
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulChannelBcast(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                if self.rg(*x) {
                    self.accumulate(grads, *x, channel_bcast(g, mv, |a, b| a * b));
                }
                if self.rg(*m) {
                    let prod = g.zip_map(xv, |a, b| a * b);
                    self.accumulate(grads, *m, reduce_channels(&prod));
                }
            }
            Op::AddChannelBcast(x, h) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*h) {
                    self.accumulate(grads, *h, reduce_channels(g));
                }
            }
            Op::ScaleRows(x, k) => {
                let per = g.len() / k.len();
                let mut d = g.clone();
                for (row, &s) in d.data_mut().chunks_mut(per).zip(k) {
                    for e in row {
                        *e *= s;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::RowDot(x, c) => {
                let f = c.shape()[1];
                let mut d = c.clone();
                for (row, &s) in d.data_mut().chunks_mut(f).zip(g.data()) {
                    for e in row {
                        *e *= s;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::AffineChannel { x, gamma, beta } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let hw = s[2] * s[3];
                let gv = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = g.clone();
                    for (idx, plane) in dx.data_mut().chunks_mut(hw).enumerate() {
                        for e in plane {
                            *e *= gv[idx];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::new(s[..2].to_vec(), d));
                }
                if self.rg(*beta) {
                    let d: Vec<f64> = g.data().chunks(hw).map(|a| a.iter().sum()).collect();
                    self.accumulate(grads, *beta, Tensor::new(s[..2].to_vec(), d));
                }
            }
            Op::InstanceNorm {
                x,
                means,
                stds,
                eps,
            } => {
                let dx = kernels::instance_norm_backward(self.value(*x), g, means, stds, *eps);
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    geom,
                    self.rg(*x),
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, cg.dw);
                self.accumulate(grads, *b, cg.db);
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::LeakyRelu(x, slope) => {
                let d = g.zip_map(self.value(*x), |gg, a| if a > 0.0 { gg } else { gg * slope });
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gg, y| gg * (1.0 - y * y));
                self.accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = g.zip_map(self.value(*x), |gg, a| gg * sigmoid(a));
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2x(x) => self.accumulate(grads, *x, kernels::upsample2x_backward(g)),
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut d = Tensor::zeros(s);
                for (plane, gg) in d.data_mut().chunks_mut(hw).zip(g.data()) {
                    plane.fill(gg / hw as f64);
                }
                self.accumulate(grads, *x, d);
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (f, len) = (s[1], g.shape()[1]);
                let mut d = Tensor::zeros(s);
                for (row, grow) in d.data_mut().chunks_mut(f).zip(g.data().chunks(len)) {
                    row[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, Tensor::full(s, g.item() / n));
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let k = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, xv.map(|a| k * sign(a)));
            }
            Op::SumSquare(x) => {
                let k = g.item();
                self.accumulate(grads, *x, self.value(*x).map(|a| 2.0 * k * a));
            }
            Op::Sqrt(x) => {
                let y = node.value.item();
                let d = if y > 0.0 { g.item() / (2.0 * y) } else { 0.0 };
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), vec![d]));
            }
        }
    }
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn channel_bcast(x: &Tensor, m: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let s = x.shape();
    let ms = m.shape();
    assert!(
        ms.len() == 4 && ms[0] == s[0] && ms[1] == 1 && ms[2] == s[2] && ms[3] == s[3],
        "channel broadcast of {ms:?} onto {s:?}"
    );
    let hw = s[2] * s[3];
    let c = s[1];
    let mut out = x.clone();
    for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let n = idx / c;
        let mp = &m.data()[n * hw..(n + 1) * hw];
        for (e, &mv) in plane.iter_mut().zip(mp) {
            *e = f(*e, mv);
        }
    }
    out
}

fn reduce_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s[2] * s[3];
    let mut out = vec![0.0; s[0] * hw];
    for (idx, plane) in x.data().chunks(hw).enumerate() {
        let n = idx / s[1];
        for (o, v) in out[n * hw..(n + 1) * hw].iter_mut().zip(plane) {
            *o += v;
        }
    }
    Tensor::new(vec![s[0], 1, s[2], s[3]], out)
}
