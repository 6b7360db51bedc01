//! Forward and backward kernels for the heavier graph operations.
//!
//! All kernels are deterministic: per-sample work may run on the rayon pool,
//! but cross-sample reductions are summed in batch order.

use rayon::prelude::*;

use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// `x[N,C,H,W] * w[O,C,k,k] + b[O]`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let out_ch = w.shape()[0];
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.in_channels * g.height * g.width;
    let mut out = vec![0.0; n * out_ch * p];
    out.par_chunks_mut(out_ch * p)
        .enumerate()
        .for_each(|(i, y)| {
            let mut cols = vec![0.0; rows * p];
            im2col(&x.data()[i * in_per..(i + 1) * in_per], g, &mut cols);
            for (o, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[o]);
            }
            gemm(
                out_ch,
                rows,
                p,
                w.data(),
                (rows as isize, 1),
                &cols,
                (p as isize, 1),
                1.0,
                y,
                (p as isize, 1),
            );
        });
    Tensor::new(vec![n, out_ch, g.out_height(), g.out_width()], out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let n = x.shape()[0];
    let out_ch = w.shape()[0];
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_per = g.in_channels * g.height * g.width;
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![0.0; rows * p];
            im2col(&x.data()[i * in_per..(i + 1) * in_per], g, &mut cols);
            let dy = &grad_out.data()[i * out_ch * p..(i + 1) * out_ch * p];
            let mut dw = vec![0.0; out_ch * rows];
            // dW = dY[O,P] * cols^T[P,R]
            gemm(
                out_ch,
                p,
                rows,
                dy,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                0.0,
                &mut dw,
                (rows as isize, 1),
            );
            let db: Vec<f64> = dy.chunks(p).map(|c| c.iter().sum()).collect();
            let dx = need_dx.then(|| {
                // dcols = W^T[R,O] * dY[O,P]
                gemm(
                    rows,
                    out_ch,
                    p,
                    w.data(),
                    (1, rows as isize),
                    dy,
                    (p as isize, 1),
                    0.0,
                    &mut cols,
                    (p as isize, 1),
                );
                let mut dx = vec![0.0; in_per];
                col2im(&cols, g, &mut dx);
                dx
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[out_ch]);
    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_per));
    for (sdw, sdb, sdx) in per_sample {
        for (a, b) in dw.data_mut().iter_mut().zip(&sdw) {
            *a += b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(&sdb) {
            *a += b;
        }
        if let (Some(acc), Some(s)) = (dx.as_mut(), sdx) {
            acc.extend_from_slice(&s);
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw,
        db,
    }
}

/// Per-(sample, channel) spatial mean and standard deviation (population).
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let hw = s[2] * s[3];
    let mut means = Vec::with_capacity(s[0] * s[1]);
    let mut stds = Vec::with_capacity(s[0] * s[1]);
    for plane in x.data().chunks(hw) {
        let mean = plane.iter().sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        means.push(mean);
        stds.push(var.sqrt());
    }
    (means, stds)
}

pub fn instance_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let hw = s[2] * s[3];
    let (means, stds) = channel_stats(x);
    let mut out = x.clone();
    for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let d = stds[idx] + eps;
        for v in plane {
            *v = (*v - means[idx]) / d;
        }
    }
    (out, means, stds)
}

/// Gradient of `y = (x - mean) / (std + eps)` with population std.
pub fn instance_norm_backward(
    x: &Tensor,
    grad_out: &Tensor,
    means: &[f64],
    stds: &[f64],
    eps: f64,
) -> Tensor {
    let s = x.shape();
    let hw = s[2] * s[3];
    let m = hw as f64;
    let mut dx = Tensor::zeros(s);
    for (idx, ((dxp, xp), gp)) in dx
        .data_mut()
        .chunks_mut(hw)
        .zip(x.data().chunks(hw))
        .zip(grad_out.data().chunks(hw))
        .enumerate()
    {
        let (mu, sigma) = (means[idx], stds[idx]);
        let d = sigma + eps;
        let g_mean = gp.iter().sum::<f64>() / m;
        let g_dot: f64 = gp.iter().zip(xp).map(|(g, x)| g * (x - mu)).sum();
        let coef = if sigma > 0.0 { g_dot / (d * d * m * sigma) } else { 0.0 };
        for ((o, g), x) in dxp.iter_mut().zip(gp).zip(xp) {
            *o = (g - g_mean) / d - coef * (x - mu);
        }
    }
    dx
}

/// `x[N,F] * w[O,F]^T + b[O]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(
        n,
        f,
        o,
        x.data(),
        (f as isize, 1),
        w.data(),
        (1, f as isize),
        1.0,
        &mut out,
        (o as isize, 1),
    );
    Tensor::new(vec![n, o], out)
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = vec![0.0; n * f];
    gemm(
        n,
        o,
        f,
        grad_out.data(),
        (o as isize, 1),
        w.data(),
        (f as isize, 1),
        0.0,
        &mut dx,
        (f as isize, 1),
    );
    let mut dw = vec![0.0; o * f];
    gemm(
        o,
        n,
        f,
        grad_out.data(),
        (1, o as isize),
        x.data(),
        (f as isize, 1),
        0.0,
        &mut dw,
        (f as isize, 1),
    );
    let mut db = vec![0.0; o];
    for row in grad_out.data().chunks(o) {
        for (a, b) in db.iter_mut().zip(row) {
            *a += b;
        }
    }
    (
        Tensor::new(vec![n, f], dx),
        Tensor::new(vec![o, f], dw),
        Tensor::new(vec![o], db),
    )
}

pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.data().chunks(h * w) {
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for xx in 0..2 * w {
                out.push(row[xx / 2]);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)
}

pub fn upsample2x_backward(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let (h2, w2) = (s[2], s[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = vec![0.0; s[0] * s[1] * h * w];
    for (dst, src) in out.chunks_mut(h * w).zip(grad_out.data().chunks(h2 * w2)) {
        for y in 0..h2 {
            for x in 0..w2 {
                dst[(y / 2) * w + x / 2] += src[y * w2 + x];
            }
        }
    }
    Tensor::new(vec![s[0], s[1], h, w], out)
}
