//! Forward operations and their backward rules.
//!
//! Each op validates shapes (panicking with the op name and offending axes),
//! computes its output, and — when the tape is recording and an input
//! requires grad — records a closure that accumulates input gradients from
//! the output gradient. Closures read data at backward time; parameter
//! buffers are only mutated between steps, after the tape has been consumed.
//!
//! `matmul` and `conv3x3` parallelize over disjoint output regions; every
//! element is still reduced by one sequential inner loop, so results are
//! bit-identical regardless of worker count.

use rand::Rng;
use rayon::prelude::*;

use super::{Tape, Tensor};

/// Minimum multiply count before a kernel bothers spawning rayon tasks.
const PAR_THRESHOLD: usize = 16_384;

/// Every differentiable op kind the engine implements, in a fixed order.
/// The gradient-check driver walks this list so its report covers each op
/// exactly once.
pub const OP_KINDS: &[&str] = &[
    "matmul",
    "transpose",
    "conv1x1",
    "conv3x3",
    "batchnorm",
    "relu",
    "sigmoid",
    "softmax",
    "dropout",
    "bilinear_upsample",
    "avg_pool2",
    "global_avg_pool",
    "add",
    "add_scalar",
    "sub",
    "mul",
    "scale",
    "concat",
    "slice_rows",
    "reshape",
    "sum",
    "mean",
    "log",
    "exp",
    "l2_normalize",
];

/// Running statistics for a batchnorm op, owned by the layer that uses it.
#[derive(Clone)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> BnStats {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

fn dims2(t: &Tensor, op: &str, role: &str) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(
        s.len(),
        2,
        "{op}: {role} must be 2-d, got shape {s:?}"
    );
    (s[0], s[1])
}

fn dims4(t: &Tensor, op: &str, role: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(
        s.len(),
        4,
        "{op}: {role} must be 4-d, got shape {s:?}"
    );
    (s[0], s[1], s[2], s[3])
}

/// How a right-hand operand lines up against the left in elementwise ops.
enum Broadcast {
    Same,
    Scalar,
    /// rhs shape equals a suffix of lhs shape, repeated over leading axes.
    Suffix,
}

fn broadcast_of(op: &str, lhs: &[usize], rhs: &[usize]) -> Broadcast {
    if rhs.iter().product::<usize>() == 1 {
        return Broadcast::Scalar;
    }
    if lhs == rhs {
        return Broadcast::Same;
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Broadcast::Suffix;
    }
    panic!("{op}: shapes {lhs:?} and {rhs:?} do not align (need equal, scalar, or suffix match)");
}

impl Tape {
    fn wants_grad(&self, inputs: &[&Tensor]) -> bool {
        self.is_recording() && inputs.iter().any(|t| t.requires_grad())
    }

    fn make_output(&self, shape: &[usize], data: Vec<f64>, rg: bool) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.set_requires_grad(rg);
        t
    }

    /// Matrix product of `a` `[m, k]` and `b` `[k, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = dims2(a, "matmul", "lhs");
        let (k2, n) = dims2(b, "matmul", "rhs");
        assert_eq!(
            k, k2,
            "matmul: inner axes disagree: lhs [{m}, {k}] x rhs [{k2}, {n}]"
        );
        let out_data = {
            let ad = a.data();
            let bd = b.data();
            matmul_raw(&ad, &bd, m, k, n)
        };
        let out = self.make_output(&[m, n], out_data, self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record("matmul", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let da = if a2.requires_grad() {
                    let bd = b2.data();
                    let bs: &[f64] = &bd;
                    // da[i, kk] = sum_j g[i, j] * b[kk, j]
                    let mut da = vec![0.0; m * k];
                    par_rows(&mut da, k, m * k * n, |i, row| {
                        let grow = &g[i * n..][..n];
                        for (kk, slot) in row.iter_mut().enumerate() {
                            let brow = &bs[kk * n..][..n];
                            let mut acc = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *slot = acc;
                        }
                    });
                    Some(da)
                } else {
                    None
                };
                let db = if b2.requires_grad() {
                    let ad = a2.data();
                    let as_: &[f64] = &ad;
                    // db[kk, j] = sum_i a[i, kk] * g[i, j]
                    let mut db = vec![0.0; k * n];
                    par_rows(&mut db, n, m * k * n, |kk, row| {
                        for i in 0..m {
                            let av = as_[i * k + kk];
                            let grow = &g[i * n..][..n];
                            for (slot, gv) in row.iter_mut().zip(grow) {
                                *slot += av * gv;
                            }
                        }
                    });
                    Some(db)
                } else {
                    None
                };
                if let Some(da) = da {
                    a2.accum_grad(&da);
                }
                if let Some(db) = db {
                    b2.accum_grad(&db);
                }
            });
        }
        out
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self, a: &Tensor) -> Tensor {
        let (r, c) = dims2(a, "transpose", "input");
        let mut data = vec![0.0; r * c];
        {
            let ad = a.data();
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = ad[i * c + j];
                }
            }
        }
        let out = self.make_output(&[c, r], data, self.wants_grad(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record("transpose", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut da = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                a2.accum_grad(&da);
            });
        }
        out
    }

    /// Pointwise (1x1) convolution over a channels-first token layout:
    /// `x` is `[c_in, t]`, `w` is `[c_out, c_in]`, optional `bias` is `[c_out]`.
    pub fn conv1x1(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let (ci, t) = dims2(x, "conv1x1", "input");
        let (co, ci2) = dims2(w, "conv1x1", "weight");
        assert_eq!(
            ci, ci2,
            "conv1x1: weight expects {ci2} input channels, input has {ci}"
        );
        if let Some(b) = bias {
            assert_eq!(
                b.numel(),
                co,
                "conv1x1: bias has {} elements for {co} output channels",
                b.numel()
            );
        }
        let mut data = {
            let xd = x.data();
            let wd = w.data();
            matmul_raw(&wd, &xd, co, ci, t)
        };
        if let Some(b) = bias {
            let bd = b.data();
            for o in 0..co {
                let row = &mut data[o * t..][..t];
                for v in row.iter_mut() {
                    *v += bd[o];
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let out = self.make_output(&[co, t], data, self.wants_grad(&inputs));
        if out.requires_grad() {
            let (x2, w2, o2) = (x.clone(), w.clone(), out.clone());
            let b2 = bias.cloned();
            self.record("conv1x1", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx = if x2.requires_grad() {
                    let wd = w2.data();
                    // dx[i, tt] = sum_o w[o, i] * g[o, tt]
                    let mut dx = vec![0.0; ci * t];
                    for o in 0..co {
                        let grow = &g[o * t..][..t];
                        for i in 0..ci {
                            let wv = wd[o * ci + i];
                            let xrow = &mut dx[i * t..][..t];
                            for (s, gv) in xrow.iter_mut().zip(grow) {
                                *s += wv * gv;
                            }
                        }
                    }
                    Some(dx)
                } else {
                    None
                };
                let dw = if w2.requires_grad() {
                    let xd = x2.data();
                    let mut dw = vec![0.0; co * ci];
                    for o in 0..co {
                        let grow = &g[o * t..][..t];
                        for i in 0..ci {
                            let xrow = &xd[i * t..][..t];
                            let mut acc = 0.0;
                            for (gv, xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                            dw[o * ci + i] = acc;
                        }
                    }
                    Some(dw)
                } else {
                    None
                };
                if let Some(dx) = dx {
                    x2.accum_grad(&dx);
                }
                if let Some(dw) = dw {
                    w2.accum_grad(&dw);
                }
                if let Some(b) = &b2 {
                    if b.requires_grad() {
                        let mut db = vec![0.0; co];
                        for o in 0..co {
                            let grow = &g[o * t..][..t];
                            db[o] = grow.iter().sum();
                        }
                        b.accum_grad(&db);
                    }
                }
            });
        }
        out
    }

    /// 3x3 convolution, stride 1, zero padding 1, no bias.
    /// `x` is `[n, c_in, h, w]`, `weight` is `[c_out, c_in, 3, 3]`.
    pub fn conv3x3(&self, x: &Tensor, weight: &Tensor) -> Tensor {
        let (n, ci, h, w) = dims4(x, "conv3x3", "input");
        let (co, ci2, kh, kw) = dims4(weight, "conv3x3", "weight");
        assert_eq!(
            (kh, kw),
            (3, 3),
            "conv3x3: kernel must be 3x3, got {kh}x{kw}"
        );
        assert_eq!(
            ci, ci2,
            "conv3x3: weight expects {ci2} input channels, input has {ci}"
        );
        let plane = h * w;
        let mut data = vec![0.0; n * co * plane];
        {
            let xd = x.data();
            let wd = weight.data();
            let xs: &[f64] = &xd;
            let ws: &[f64] = &wd;
            data.par_chunks_mut(plane).enumerate().for_each(|(idx, out_plane)| {
                let ni = idx / co;
                let o = idx % co;
                for c in 0..ci {
                    let xp = &xs[(ni * ci + c) * plane..][..plane];
                    let wk = &ws[(o * ci + c) * 9..][..9];
                    conv_plane_accum(out_plane, xp, wk, h, w);
                }
            });
        }
        let out = self.make_output(&[n, co, h, w], data, self.wants_grad(&[x, weight]));
        if out.requires_grad() {
            let (x2, w2, o2) = (x.clone(), weight.clone(), out.clone());
            self.record("conv3x3", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let gs: &[f64] = &g;
                let dx = if x2.requires_grad() {
                    let wd = w2.data();
                    let ws: &[f64] = &wd;
                    let mut dx = vec![0.0; n * ci * plane];
                    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, dplane)| {
                        let ni = idx / ci;
                        let c = idx % ci;
                        for o in 0..co {
                            let gp = &gs[(ni * co + o) * plane..][..plane];
                            let wk = &ws[(o * ci + c) * 9..][..9];
                            conv_plane_scatter(dplane, gp, wk, h, w);
                        }
                    });
                    Some(dx)
                } else {
                    None
                };
                let dw = if w2.requires_grad() {
                    let xd = x2.data();
                    let xs: &[f64] = &xd;
                    let mut dw = vec![0.0; co * ci * 9];
                    dw.par_chunks_mut(9).enumerate().for_each(|(idx, slot)| {
                        let o = idx / ci;
                        let c = idx % ci;
                        for ni in 0..n {
                            let gp = &gs[(ni * co + o) * plane..][..plane];
                            let xp = &xs[(ni * ci + c) * plane..][..plane];
                            conv_weight_accum(slot, gp, xp, h, w);
                        }
                    });
                    Some(dw)
                } else {
                    None
                };
                if let Some(dx) = dx {
                    x2.accum_grad(&dx);
                }
                if let Some(dw) = dw {
                    w2.accum_grad(&dw);
                }
            });
        }
        out
    }

    /// Batch normalization over axis 1 of a rank >= 2 tensor laid out
    /// `[n, c, ...]`. Train mode normalizes with batch statistics (biased
    /// variance) and folds them into `stats`; eval mode uses the running
    /// statistics.
    pub fn batchnorm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &mut BnStats,
        training: bool,
    ) -> Tensor {
        let shape = x.shape();
        assert!(
            shape.len() >= 2,
            "batchnorm: input must have rank >= 2, got shape {shape:?}"
        );
        let lead = shape[0];
        let channels = shape[1];
        let spatial: usize = shape[2..].iter().product();
        assert_eq!(
            gamma.numel(),
            channels,
            "batchnorm: gamma has {} elements for {channels} channels",
            gamma.numel()
        );
        assert_eq!(
            beta.numel(),
            channels,
            "batchnorm: beta has {} elements for {channels} channels",
            beta.numel()
        );
        assert_eq!(
            stats.running_mean.len(),
            channels,
            "batchnorm: stats track {} channels, input has {channels}",
            stats.running_mean.len()
        );

        let m = (lead * spatial) as f64;
        let (mean, var) = if training {
            let xd = x.data();
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut acc = 0.0;
                for l in 0..lead {
                    let chunk = &xd[(l * channels + c) * spatial..][..spatial];
                    for v in chunk {
                        acc += v;
                    }
                }
                let mu = acc / m;
                let mut vacc = 0.0;
                for l in 0..lead {
                    let chunk = &xd[(l * channels + c) * spatial..][..spatial];
                    for v in chunk {
                        let d = v - mu;
                        vacc += d * d;
                    }
                }
                mean[c] = mu;
                var[c] = vacc / m;
            }
            for c in 0..channels {
                stats.running_mean[c] =
                    stats.momentum * stats.running_mean[c] + (1.0 - stats.momentum) * mean[c];
                stats.running_var[c] =
                    stats.momentum * stats.running_var[c] + (1.0 - stats.momentum) * var[c];
            }
            (mean, var)
        } else {
            (stats.running_mean.clone(), stats.running_var.clone())
        };

        let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.numel()];
        let mut data = vec![0.0; x.numel()];
        {
            let xd = x.data();
            let gd = gamma.data();
            let bd = beta.data();
            for l in 0..lead {
                for c in 0..channels {
                    let base = (l * channels + c) * spatial;
                    for i in 0..spatial {
                        let xh = (xd[base + i] - mean[c]) * istd[c];
                        xhat[base + i] = xh;
                        data[base + i] = gd[c] * xh + bd[c];
                    }
                }
            }
        }
        let out = self.make_output(&shape, data, self.wants_grad(&[x, gamma, beta]));
        if out.requires_grad() {
            let (x2, g2, b2, o2) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.record("batchnorm", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for l in 0..lead {
                    for c in 0..channels {
                        let base = (l * channels + c) * spatial;
                        for i in 0..spatial {
                            sum_g[c] += g[base + i];
                            sum_gx[c] += g[base + i] * xhat[base + i];
                        }
                    }
                }
                if x2.requires_grad() {
                    let gd = g2.data();
                    let mut dx = vec![0.0; g.len()];
                    for l in 0..lead {
                        for c in 0..channels {
                            let base = (l * channels + c) * spatial;
                            let k = gd[c] * istd[c];
                            for i in 0..spatial {
                                let centered = if training {
                                    g[base + i] - sum_g[c] / m - xhat[base + i] * sum_gx[c] / m
                                } else {
                                    g[base + i]
                                };
                                dx[base + i] = k * centered;
                            }
                        }
                    }
                    drop(gd);
                    x2.accum_grad(&dx);
                }
                if g2.requires_grad() {
                    g2.accum_grad(&sum_gx);
                }
                if b2.requires_grad() {
                    b2.accum_grad(&sum_g);
                }
            });
        }
        out
    }

    pub fn relu(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let out = self.make_output(&x.shape(), data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("relu", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let xd = x2.data();
                    xd.iter()
                        .zip(&g)
                        .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect()
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    pub fn sigmoid(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = self.make_output(&x.shape(), data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("sigmoid", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let yd = o2.data();
                    yd.iter().zip(&g).map(|(y, gv)| gv * y * (1.0 - y)).collect()
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Row-wise softmax over the last axis of a 1-d or 2-d tensor.
    pub fn softmax(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("softmax: expected rank 1 or 2, got shape {shape:?}"),
        };
        let mut data = vec![0.0; rows * cols];
        {
            let xd = x.data();
            for r in 0..rows {
                let row = &xd[r * cols..][..cols];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut data[r * cols..][..cols];
                let mut denom = 0.0;
                for (d, v) in dst.iter_mut().zip(row) {
                    let e = (v - mx).exp();
                    *d = e;
                    denom += e;
                }
                for d in dst.iter_mut() {
                    *d /= denom;
                }
            }
        }
        let out = self.make_output(&shape, data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("softmax", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let yd = o2.data();
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let y = &yd[r * cols..][..cols];
                        let gr = &g[r * cols..][..cols];
                        let mut dot = 0.0;
                        for (yv, gv) in y.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        let dst = &mut dx[r * cols..][..cols];
                        for ((d, yv), gv) in dst.iter_mut().zip(y).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    dx
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Inverted dropout: train mode zeroes each element with probability `p`
    /// and scales survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(&self, x: &Tensor, p: f64, training: bool, rng: &mut dyn rand::RngCore) -> Tensor {
        assert!(
            (0.0..1.0).contains(&p),
            "dropout: probability {p} outside [0, 1)"
        );
        if !training || p == 0.0 {
            return x.clone();
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = self.make_output(&x.shape(), data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("dropout", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = g.iter().zip(&mask).map(|(gv, m)| gv * m).collect();
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Bilinear interpolation of a 2-d grid to `out_hw`, using half-pixel
    /// centers `src = (dst + 0.5) * scale - 0.5` with edge clamping.
    pub fn bilinear_upsample(&self, x: &Tensor, out_hw: (usize, usize)) -> Tensor {
        let (h, w) = dims2(x, "bilinear_upsample", "input");
        let (oh, ow) = out_hw;
        assert!(oh > 0 && ow > 0, "bilinear_upsample: empty target {oh}x{ow}");
        let taps = bilinear_taps(h, w, oh, ow);
        let data: Vec<f64> = {
            let xd = x.data();
            taps.iter()
                .map(|t| {
                    t.w00 * xd[t.i00] + t.w01 * xd[t.i01] + t.w10 * xd[t.i10] + t.w11 * xd[t.i11]
                })
                .collect()
        };
        let out = self.make_output(&[oh, ow], data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("bilinear_upsample", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut dx = vec![0.0; h * w];
                for (t, gv) in taps.iter().zip(&g) {
                    dx[t.i00] += t.w00 * gv;
                    dx[t.i01] += t.w01 * gv;
                    dx[t.i10] += t.w10 * gv;
                    dx[t.i11] += t.w11 * gv;
                }
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// 2x2 average pooling with stride 2 on `[n, c, h, w]`; h and w even.
    pub fn avg_pool2(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = dims4(x, "avg_pool2", "input");
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2: spatial dims must be even, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        {
            let xd = x.data();
            for p in 0..n * c {
                let src = &xd[p * h * w..][..h * w];
                let dst = &mut data[p * oh * ow..][..oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let base = 2 * y * w + 2 * xx;
                        dst[y * ow + xx] =
                            (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * 0.25;
                    }
                }
            }
        }
        let out = self.make_output(&[n, c, oh, ow], data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("avg_pool2", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let gp = &g[p * oh * ow..][..oh * ow];
                    let dst = &mut dx[p * h * w..][..h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gp[y * ow + xx] * 0.25;
                            let base = 2 * y * w + 2 * xx;
                            dst[base] += gv;
                            dst[base + 1] += gv;
                            dst[base + w] += gv;
                            dst[base + w + 1] += gv;
                        }
                    }
                }
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Mean over all trailing axes after the channel axis: `[n, c, ...] -> [n, c]`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert!(
            shape.len() >= 3,
            "global_avg_pool: input must have rank >= 3, got shape {shape:?}"
        );
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let mut data = vec![0.0; n * c];
        {
            let xd = x.data();
            for p in 0..n * c {
                let src = &xd[p * spatial..][..spatial];
                let mut acc = 0.0;
                for v in src {
                    acc += v;
                }
                data[p] = acc / spatial as f64;
            }
        }
        let out = self.make_output(&[n, c], data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("global_avg_pool", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut dx = vec![0.0; n * c * spatial];
                for p in 0..n * c {
                    let gv = g[p] / spatial as f64;
                    for v in dx[p * spatial..][..spatial].iter_mut() {
                        *v = gv;
                    }
                }
                x2.accum_grad(&dx);
            });
        }
        out
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.elementwise_linear("add", a, b, 1.0)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.elementwise_linear("sub", a, b, -1.0)
    }

    /// Elementwise product. The right operand may be a scalar or a suffix of
    /// the left shape (broadcast over leading axes), e.g. an `[h, w]` mask
    /// against a `[c, h, w]` image.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let ashape = a.shape();
        let bshape = b.shape();
        let bc = broadcast_of("mul", &ashape, &bshape);
        let bn = b.numel();
        let data: Vec<f64> = {
            let ad = a.data();
            let bd = b.data();
            match bc {
                Broadcast::Same => ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect(),
                Broadcast::Scalar => ad.iter().map(|x| x * bd[0]).collect(),
                Broadcast::Suffix => ad
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x * bd[i % bn])
                    .collect(),
            }
        };
        let out = self.make_output(&ashape, data, self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record("mul", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let da = if a2.requires_grad() {
                    let bd = b2.data();
                    Some(match broadcast_of("mul", &a2.shape(), &b2.shape()) {
                        Broadcast::Same => g.iter().zip(bd.iter()).map(|(gv, y)| gv * y).collect(),
                        Broadcast::Scalar => g.iter().map(|gv| gv * bd[0]).collect(),
                        Broadcast::Suffix => g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * bd[i % bn])
                            .collect::<Vec<f64>>(),
                    })
                } else {
                    None
                };
                let db = if b2.requires_grad() {
                    let ad = a2.data();
                    let mut db = vec![0.0; bn];
                    for (i, (gv, av)) in g.iter().zip(ad.iter()).enumerate() {
                        db[i % bn] += gv * av;
                    }
                    Some(db)
                } else {
                    None
                };
                if let Some(da) = da {
                    a2.accum_grad(&da);
                }
                if let Some(db) = db {
                    b2.accum_grad(&db);
                }
            });
        }
        out
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|v| v * factor).collect();
        let out = self.make_output(&a.shape(), data, self.wants_grad(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record("scale", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = g.iter().map(|gv| gv * factor).collect();
                a2.accum_grad(&dx);
            });
        }
        out
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, a: &Tensor, value: f64) -> Tensor {
        let data: Vec<f64> = a.data().iter().map(|v| v + value).collect();
        let out = self.make_output(&a.shape(), data, self.wants_grad(&[a]));
        if out.requires_grad() {
            let (a2, o2) = (a.clone(), out.clone());
            self.record("add_scalar", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                a2.accum_grad(&g);
            });
        }
        out
    }

    /// Concatenate tensors along `axis`. All other extents must agree.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = parts[0].shape();
        assert!(
            axis < first.len(),
            "concat: axis {axis} out of range for rank {}",
            first.len()
        );
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(
                s.len(),
                first.len(),
                "concat: rank mismatch {:?} vs {:?}",
                s,
                first
            );
            for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: axis {d} disagrees: {a} vs {b} (shapes {s:?} vs {first:?})"
                );
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let lead: usize = first[..axis].iter().product();
        let trail: usize = first[axis + 1..].iter().product();

        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * trail).collect();
        let out_block = axis_total * trail;
        let mut data = vec![0.0; lead * out_block];
        for l in 0..lead {
            let mut offset = 0;
            for (p, &blk) in parts.iter().zip(&blocks) {
                let pd = p.data();
                data[l * out_block + offset..][..blk].copy_from_slice(&pd[l * blk..][..blk]);
                offset += blk;
            }
        }
        let out = self.make_output(&out_shape, data, self.wants_grad(parts));
        if out.requires_grad() {
            let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let o2 = out.clone();
            self.record("concat", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut offset = 0;
                for (p, &blk) in owned.iter().zip(&blocks) {
                    if p.requires_grad() {
                        let mut dp = vec![0.0; lead * blk];
                        for l in 0..lead {
                            dp[l * blk..][..blk]
                                .copy_from_slice(&g[l * out_block + offset..][..blk]);
                        }
                        p.accum_grad(&dp);
                    }
                    offset += blk;
                }
            });
        }
        out
    }

    /// Rows `r0..r1` of a 2-d tensor.
    pub fn slice_rows(&self, x: &Tensor, r0: usize, r1: usize) -> Tensor {
        let (r, c) = dims2(x, "slice_rows", "input");
        assert!(
            r0 < r1 && r1 <= r,
            "slice_rows: range {r0}..{r1} invalid for {r} rows"
        );
        let data = x.data()[r0 * c..r1 * c].to_vec();
        let out = self.make_output(&[r1 - r0, c], data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("slice_rows", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let mut dx = vec![0.0; r * c];
                dx[r0 * c..r1 * c].copy_from_slice(&g);
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Tensor {
        let numel: usize = new_shape.iter().product();
        assert_eq!(
            numel,
            x.numel(),
            "reshape: {:?} ({} elements) cannot view as {:?} ({} elements)",
            x.shape(),
            x.numel(),
            new_shape,
            numel
        );
        let out = self.make_output(new_shape, x.to_vec(), self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("reshape", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                x2.accum_grad(&g);
            });
        }
        out
    }

    /// Sum of all elements, as a `[1]` tensor. Left-to-right accumulation.
    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let mut acc = 0.0;
        for v in x.data().iter() {
            acc += v;
        }
        let out = self.make_output(&[1], vec![acc], self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("sum", &out, move || {
                let g = o2.grad_snapshot().unwrap()[0];
                let dx = vec![g; x2.numel()];
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let n = x.numel();
        let mut acc = 0.0;
        for v in x.data().iter() {
            acc += v;
        }
        let out = self.make_output(&[1], vec![acc / n as f64], self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("mean", &out, move || {
                let g = o2.grad_snapshot().unwrap()[0] / n as f64;
                let dx = vec![g; n];
                x2.accum_grad(&dx);
            });
        }
        out
    }

    pub fn log(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v.ln()).collect();
        let out = self.make_output(&x.shape(), data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("log", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let xd = x2.data();
                    g.iter().zip(xd.iter()).map(|(gv, xv)| gv / xv).collect()
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    pub fn exp(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let out = self.make_output(&x.shape(), data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("exp", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let yd = o2.data();
                    g.iter().zip(yd.iter()).map(|(gv, yv)| gv * yv).collect()
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// Normalize rows of a 1-d or 2-d tensor to unit L2 norm. Norms are
    /// clamped below at 1e-12 so an all-zero row passes through scaled.
    pub fn l2_normalize(&self, x: &Tensor) -> Tensor {
        const NORM_FLOOR: f64 = 1e-12;
        let shape = x.shape();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("l2_normalize: expected rank 1 or 2, got shape {shape:?}"),
        };
        let mut norms = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        {
            let xd = x.data();
            for r in 0..rows {
                let row = &xd[r * cols..][..cols];
                let mut acc = 0.0;
                for v in row {
                    acc += v * v;
                }
                let n = acc.sqrt().max(NORM_FLOOR);
                norms[r] = n;
                for (d, v) in data[r * cols..][..cols].iter_mut().zip(row) {
                    *d = v / n;
                }
            }
        }
        let out = self.make_output(&shape, data, self.wants_grad(&[x]));
        if out.requires_grad() {
            let (x2, o2) = (x.clone(), out.clone());
            self.record("l2_normalize", &out, move || {
                let g = o2.grad_snapshot().unwrap();
                let dx: Vec<f64> = {
                    let yd = o2.data();
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let y = &yd[r * cols..][..cols];
                        let gr = &g[r * cols..][..cols];
                        let mut dot = 0.0;
                        for (yv, gv) in y.iter().zip(gr) {
                            dot += yv * gv;
                        }
                        for ((d, yv), gv) in dx[r * cols..][..cols].iter_mut().zip(y).zip(gr) {
                            *d = (gv - yv * dot) / norms[r];
                        }
                    }
                    dx
                };
                x2.accum_grad(&dx);
            });
        }
        out
    }

    /// `a + sign * b` with the usual rhs broadcasting (add and sub).
    fn elementwise_linear(&self, op: &'static str, a: &Tensor, b: &Tensor, sign: f64) -> Tensor {
        let ashape = a.shape();
        let bshape = b.shape();
        let bc = broadcast_of(op, &ashape, &bshape);
        let bn = b.numel();
        let data: Vec<f64> = {
            let ad = a.data();
            let bd = b.data();
            match bc {
                Broadcast::Same => ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(x, y)| x + sign * y)
                    .collect(),
                Broadcast::Scalar => ad.iter().map(|x| x + sign * bd[0]).collect(),
                Broadcast::Suffix => ad
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + sign * bd[i % bn])
                    .collect(),
            }
        };
        let out = self.make_output(&ashape, data, self.wants_grad(&[a, b]));
        if out.requires_grad() {
            let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
            self.record(op, &out, move || {
                let g = o2.grad_snapshot().unwrap();
                if a2.requires_grad() {
                    a2.accum_grad(&g);
                }
                if b2.requires_grad() {
                    let mut db = vec![0.0; bn];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bn] += gv * sign;
                    }
                    b2.accum_grad(&db);
                }
            });
        }
        out
    }
}

// ---------------------------------------------------------------------------
// raw kernels

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par_rows(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..][..k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..][..n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    });
    out
}

/// Run `body` once per `width`-sized row of `buf`, in parallel when the
/// total work is large enough. Each row is written by exactly one call.
fn par_rows(buf: &mut [f64], width: usize, work: usize, body: impl Fn(usize, &mut [f64]) + Sync) {
    if work < PAR_THRESHOLD {
        for (i, row) in buf.chunks_mut(width).enumerate() {
            body(i, row);
        }
    } else {
        buf.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    }
}

/// out[y, x] += sum_{ky, kx} wk[ky, kx] * xp[y + ky - 1, x + kx - 1], zero padded.
fn conv_plane_accum(out: &mut [f64], xp: &[f64], wk: &[f64], h: usize, w: usize) {
    for ky in 0..3usize {
        let dy = ky as isize - 1;
        for kx in 0..3usize {
            let dx = kx as isize - 1;
            let wv = wk[ky * 3 + kx];
            let y0 = (-dy).max(0) as usize;
            let y1 = ((h as isize - dy).min(h as isize)) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = ((w as isize - dx).min(w as isize)) as usize;
            for y in y0..y1 {
                let src = &xp[((y as isize + dy) as usize) * w..][..w];
                let dst = &mut out[y * w..][..w];
                for x in x0..x1 {
                    dst[x] += wv * src[(x as isize + dx) as usize];
                }
            }
        }
    }
}

/// dplane[y, x] += sum_{ky, kx} wk[ky, kx] * gp[y - (ky - 1), x - (kx - 1)]:
/// the transpose of `conv_plane_accum`.
fn conv_plane_scatter(dplane: &mut [f64], gp: &[f64], wk: &[f64], h: usize, w: usize) {
    for ky in 0..3usize {
        let dy = ky as isize - 1;
        for kx in 0..3usize {
            let dx = kx as isize - 1;
            let wv = wk[ky * 3 + kx];
            let y0 = dy.max(0) as usize;
            let y1 = ((h as isize + dy).min(h as isize)) as usize;
            let x0 = dx.max(0) as usize;
            let x1 = ((w as isize + dx).min(w as isize)) as usize;
            for y in y0..y1 {
                let src = &gp[((y as isize - dy) as usize) * w..][..w];
                let dst = &mut dplane[y * w..][..w];
                for x in x0..x1 {
                    dst[x] += wv * src[(x as isize - dx) as usize];
                }
            }
        }
    }
}

/// slot[ky, kx] += sum_{y, x} gp[y, x] * xp[y + ky - 1, x + kx - 1].
fn conv_weight_accum(slot: &mut [f64], gp: &[f64], xp: &[f64], h: usize, w: usize) {
    for ky in 0..3usize {
        let dy = ky as isize - 1;
        for kx in 0..3usize {
            let dx = kx as isize - 1;
            let y0 = (-dy).max(0) as usize;
            let y1 = ((h as isize - dy).min(h as isize)) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = ((w as isize - dx).min(w as isize)) as usize;
            let mut acc = 0.0;
            for y in y0..y1 {
                let grow = &gp[y * w..][..w];
                let xrow = &xp[((y as isize + dy) as usize) * w..][..w];
                for x in x0..x1 {
                    acc += grow[x] * xrow[(x as isize + dx) as usize];
                }
            }
            slot[ky * 3 + kx] += acc;
        }
    }
}

struct BilinearTap {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    w00: f64,
    w01: f64,
    w10: f64,
    w11: f64,
}

fn bilinear_taps(h: usize, w: usize, oh: usize, ow: usize) -> Vec<BilinearTap> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
    let mut taps = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let src_y = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = src_y.floor();
        let fy = src_y - y0;
        let y0c = clamp(y0 as isize, h);
        let y1c = clamp(y0 as isize + 1, h);
        for ox in 0..ow {
            let src_x = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = src_x.floor();
            let fx = src_x - x0;
            let x0c = clamp(x0 as isize, w);
            let x1c = clamp(x0 as isize + 1, w);
            taps.push(BilinearTap {
                i00: y0c * w + x0c,
                i01: y0c * w + x1c,
                i10: y1c * w + x0c,
                i11: y1c * w + x1c,
                w00: (1.0 - fy) * (1.0 - fx),
                w01: (1.0 - fy) * fx,
                w10: fy * (1.0 - fx),
                w11: fy * fx,
            });
        }
    }
    taps
}

/// Plain (non-tape) bilinear resize of one 2-d plane; shares the coordinate
/// convention with the op so augmentation crops and mask upsampling agree.
pub(crate) fn bilinear_resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    bilinear_taps(h, w, oh, ow)
        .iter()
        .map(|t| t.w00 * src[t.i00] + t.w01 * src[t.i01] + t.w10 * src[t.i10] + t.w11 * src[t.i11])
        .collect()
}
