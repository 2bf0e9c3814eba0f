//! The learnable mask generator and the baseline mask policies.
//!
//! The generator turns a pair of feature maps and a mixing ratio into a
//! pixel-wise mask: the ratio is folded into the features through a learned
//! scalar, one attention matrix over the concatenated token sets captures
//! both cross- and self-relations, a small content head scores every token,
//! and the attended scores pass through a sigmoid and bilinear upsampling.
//! The constant (`mixup_mask`) and rectangle (`cutmix_mask`) policies are
//! provided for comparison.

use rand::Rng;

use crate::nn::{kaiming_uniform, BatchNorm};
use crate::tensor::{Tape, Tensor};

/// Pixel-wise mask pair plus the ratio that produced it.
/// Invariants: every coordinate of `s_i` is in [0, 1] and `s_j = 1 - s_i`.
pub struct MixMask {
    pub s_i: Tensor,
    pub s_j: Tensor,
    pub lam: f64,
}

impl MixMask {
    fn from_si(s_i: Tensor, tape: &Tape, lam: f64) -> MixMask {
        let ones = Tensor::full(&s_i.shape(), 1.0);
        let s_j = tape.sub(&ones, &s_i);
        MixMask { s_i, s_j, lam }
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.s_i.shape();
        assert_eq!(s.len(), 2, "mask must be 2-d, got {s:?}");
        (s[0], s[1])
    }

    /// Spatial mean of `s_i`.
    pub fn mean(&self) -> f64 {
        let d = self.s_i.data();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Spatial variance of `s_i` (biased).
    pub fn spatial_variance(&self) -> f64 {
        let d = self.s_i.data();
        let mu = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d.len() as f64
    }

    /// Detached copy, cut off from any tape.
    pub fn detach(&self) -> MixMask {
        MixMask {
            s_i: self.s_i.detach(),
            s_j: self.s_j.detach(),
            lam: self.lam,
        }
    }
}

/// Token scoring head: either the two-layer non-linear module (1x1 conv,
/// batchnorm, ReLU, dropout, 1x1 conv) or a single linear projection kept
/// as an ablation switch.
#[derive(Clone)]
pub enum ContentHead {
    NonLinear {
        w1: Tensor,
        bn: BatchNorm,
        w2: Tensor,
        b2: Tensor,
        dropout_p: f64,
    },
    Linear {
        w: Tensor,
        b: Tensor,
    },
}

/// The mask generator. Cloning shares parameter storage: the clone sees
/// (and makes) in-place updates of the original's weights.
#[derive(Clone)]
pub struct Mixer {
    /// Ratio-encoding scalar, constrained to [0, 1], zero-initialized.
    pub gamma: Tensor,
    /// Token projection for the attention logits, `[d_p, c_l]`.
    pub proj: Tensor,
    pub content: ContentHead,
    pub c_l: usize,
    pub d_p: usize,
}

impl Mixer {
    /// A generator for `c_l`-channel features, projecting tokens to `d_p`
    /// dimensions. `nonlinear_content` selects the content head variant;
    /// the non-linear head is the default, the linear one exists to
    /// reproduce the degenerate constant-mask behavior.
    pub fn new(
        c_l: usize,
        d_p: usize,
        nonlinear_content: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Mixer {
        let hidden = d_p.max(2);
        let content = if nonlinear_content {
            ContentHead::NonLinear {
                w1: kaiming_uniform(&[hidden, c_l], c_l, rng),
                bn: BatchNorm::new(hidden),
                w2: kaiming_uniform(&[1, hidden], hidden, rng),
                b2: Tensor::param(&[1], vec![0.0]),
                dropout_p: 0.1,
            }
        } else {
            ContentHead::Linear {
                w: kaiming_uniform(&[1, c_l], c_l, rng),
                b: Tensor::param(&[1], vec![0.0]),
            }
        };
        Mixer {
            gamma: Tensor::param(&[1], vec![0.0]),
            proj: kaiming_uniform(&[d_p, c_l], c_l, rng),
            content,
            c_l,
            d_p,
        }
    }

    /// Fold the mixing ratio into a feature map: `(1 + gamma * lam) * z`.
    /// Differentiable in both `z` and `gamma`.
    pub fn encode_lambda(&self, tape: &Tape, z: &Tensor, lam: f64) -> Tensor {
        let coef = tape.add_scalar(&tape.scale(&self.gamma, lam), 1.0);
        tape.mul(z, &coef)
    }

    /// Attention over all tokens of the concatenated pair: rows of the
    /// returned `[t, t]` matrix are probability distributions over keys.
    ///
    /// Logits are dot products divided by a data-dependent normalizer,
    /// the mean squared token norm over sqrt(d_p). Dividing by the token
    /// energy makes the logits invariant to a joint rescaling of all
    /// tokens, so the ratio-encoding scalar acts purely through the
    /// contrast between the two halves instead of through softmax
    /// sharpness; sqrt(d_p) keeps the logit range stable across widths.
    pub fn mixing_attention(&self, tape: &Tape, z_tilde: &Tensor) -> Tensor {
        let proj = tape.conv1x1(z_tilde, &self.proj, None);
        let logits = tape.matmul(&tape.transpose(&proj), &proj);
        // N(z) = mean_t |p_t|^2 / sqrt(d_p), as a differentiable scalar
        let energy = tape.add_scalar(
            &tape.scale(&tape.mean_all(&tape.mul(&proj, &proj)), (self.d_p as f64).sqrt()),
            1e-12,
        );
        let inv_norm = tape.exp(&tape.scale(&tape.log(&energy), -1.0));
        tape.softmax(&tape.mul(&logits, &inv_norm))
    }

    /// Per-token content scores for a `[c_l, t]` token tensor, as a `[t]`
    /// vector. Eval mode is deterministic: dropout off, running batch stats.
    pub fn content_forward(
        &self,
        tape: &Tape,
        z_tilde: &Tensor,
        training: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Tensor {
        let t = z_tilde.shape()[1];
        let scores = match &self.content {
            ContentHead::NonLinear {
                w1,
                bn,
                w2,
                b2,
                dropout_p,
            } => {
                let h = tape.conv1x1(z_tilde, w1, None);
                let hidden = h.shape()[0];
                let normed = tape.reshape(
                    &bn.forward(tape, &tape.reshape(&h, &[1, hidden, t]), training),
                    &[hidden, t],
                );
                let act = tape.dropout(&tape.relu(&normed), *dropout_p, training, rng);
                tape.conv1x1(&act, w2, Some(b2))
            }
            ContentHead::Linear { w, b } => tape.conv1x1(z_tilde, w, Some(b)),
        };
        tape.reshape(&scores, &[t])
    }

    /// Generate the mask for a feature pair. `z_i` and `z_j` are `[c_l, h_l,
    /// w_l]` maps from the same encoder layer; the mask is upsampled to
    /// `out_hw`. Differentiable end to end in the features and all
    /// generator parameters.
    pub fn generate_mask(
        &self,
        tape: &Tape,
        z_i: &Tensor,
        z_j: &Tensor,
        lam: f64,
        out_hw: (usize, usize),
        training: bool,
        rng: &mut dyn rand::RngCore,
    ) -> MixMask {
        assert!(
            lam > 0.0 && lam < 1.0,
            "generate_mask: lambda {lam} outside the open interval (0, 1)"
        );
        let shape = z_i.shape();
        assert_eq!(
            shape,
            z_j.shape(),
            "generate_mask: feature shapes disagree: {:?} vs {:?}",
            shape,
            z_j.shape()
        );
        assert_eq!(shape.len(), 3, "generate_mask: features must be [c, h, w]");
        let (c, hl, wl) = (shape[0], shape[1], shape[2]);
        assert_eq!(
            c, self.c_l,
            "generate_mask: built for {} channels, got {c}",
            self.c_l
        );
        let t_half = hl * wl;

        let zi = self.encode_lambda(tape, &tape.reshape(z_i, &[c, t_half]), lam);
        let zj = self.encode_lambda(tape, &tape.reshape(z_j, &[c, t_half]), 1.0 - lam);
        let z_tilde = tape.concat(&[&zi, &zj], 1);

        let attention = self.mixing_attention(tape, &z_tilde);
        let scores = tape.reshape(
            &self.content_forward(tape, &z_tilde, training, rng),
            &[2 * t_half, 1],
        );
        // contract the query rows of sample i against all token scores
        let rows_i = tape.slice_rows(&attention, 0, t_half);
        let raw = tape.reshape(&tape.matmul(&rows_i, &scores), &[hl, wl]);
        let s_small = tape.sigmoid(&raw);
        let s_i = tape.bilinear_upsample(&s_small, out_hw);
        MixMask::from_si(s_i, tape, lam)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![self.gamma.clone(), self.proj.clone()];
        match &self.content {
            ContentHead::NonLinear { w1, bn, w2, b2, .. } => {
                p.extend([
                    w1.clone(),
                    bn.gamma.clone(),
                    bn.beta.clone(),
                    w2.clone(),
                    b2.clone(),
                ]);
            }
            ContentHead::Linear { w, b } => p.extend([w.clone(), b.clone()]),
        }
        p
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.params() {
            p.set_requires_grad(flag);
        }
    }

    /// Re-apply the [0, 1] constraint on gamma; call after optimizer steps.
    pub fn clamp_gamma(&self) {
        self.gamma.update_data(|g| g[0] = g[0].clamp(0.0, 1.0));
    }

    /// Full state (parameters and batchnorm buffers) as named tensors.
    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = vec![
            ("gamma".to_string(), vec![1], self.gamma.to_vec()),
            ("proj".to_string(), self.proj.shape(), self.proj.to_vec()),
        ];
        match &self.content {
            ContentHead::NonLinear { w1, bn, w2, b2, .. } => {
                let stats = bn.stats.borrow();
                let ch = stats.running_mean.len();
                out.push(("content.w1".into(), w1.shape(), w1.to_vec()));
                out.push(("content.bn.gamma".into(), vec![ch], bn.gamma.to_vec()));
                out.push(("content.bn.beta".into(), vec![ch], bn.beta.to_vec()));
                out.push((
                    "content.bn.running_mean".into(),
                    vec![ch],
                    stats.running_mean.clone(),
                ));
                out.push((
                    "content.bn.running_var".into(),
                    vec![ch],
                    stats.running_var.clone(),
                ));
                out.push(("content.w2".into(), w2.shape(), w2.to_vec()));
                out.push(("content.b2".into(), vec![1], b2.to_vec()));
            }
            ContentHead::Linear { w, b } => {
                out.push(("content.w".into(), w.shape(), w.to_vec()));
                out.push(("content.b".into(), vec![1], b.to_vec()));
            }
        }
        out
    }

    /// Load a state table produced by [`Mixer::export_state`]. Reports the
    /// offending name on a missing entry or shape mismatch.
    pub fn import_state(
        &self,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<(), StateError> {
        let lookup = |name: &str| -> Result<&(String, Vec<usize>, Vec<f64>), StateError> {
            entries
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| StateError::Missing { name: name.into() })
        };
        let assign = |t: &Tensor, name: &str| -> Result<(), StateError> {
            let (_, shape, data) = lookup(name)?;
            if *shape != t.shape() {
                return Err(StateError::ShapeMismatch {
                    name: name.into(),
                    expected: t.shape(),
                    got: shape.clone(),
                });
            }
            t.update_data(|d| d.copy_from_slice(data));
            Ok(())
        };
        assign(&self.gamma, "gamma")?;
        assign(&self.proj, "proj")?;
        match &self.content {
            ContentHead::NonLinear { w1, bn, w2, b2, .. } => {
                assign(w1, "content.w1")?;
                assign(&bn.gamma, "content.bn.gamma")?;
                assign(&bn.beta, "content.bn.beta")?;
                assign(w2, "content.w2")?;
                assign(b2, "content.b2")?;
                let mut stats = bn.stats.borrow_mut();
                crate::encoder::assign_buffer(
                    entries,
                    "content.bn.running_mean",
                    &mut stats.running_mean,
                )?;
                crate::encoder::assign_buffer(
                    entries,
                    "content.bn.running_var",
                    &mut stats.running_var,
                )?;
            }
            ContentHead::Linear { w, b } => {
                assign(w, "content.w")?;
                assign(b, "content.b")?;
            }
        }
        Ok(())
    }
}

/// State-table errors shared by everything that imports named tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateError {
    Missing {
        name: String,
    },
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

impl std::fmt::Display for StateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateError::Missing { name } => write!(f, "missing tensor `{name}`"),
            StateError::ShapeMismatch {
                name,
                expected,
                got,
            } => write!(f, "tensor `{name}` has shape {got:?}, expected {expected:?}"),
        }
    }
}

impl std::error::Error for StateError {}

/// Rescale a mask so its spatial mean equals `lam` exactly: shrink `s_i`
/// when the mean is high, shrink `s_j` (and rebuild `s_i`) when it is low.
/// Operates on detached data; coordinates stay in [0, 1].
pub fn lambda_adjust(mask: &MixMask, lam: f64) -> MixMask {
    assert!(
        lam > 0.0 && lam < 1.0,
        "lambda_adjust: lambda {lam} outside the open interval (0, 1)"
    );
    let mu = mask.mean();
    let si = mask.s_i.to_vec();
    let shape = mask.s_i.shape();
    let (s_i, s_j): (Vec<f64>, Vec<f64>) = if mu > lam {
        let k = lam / mu;
        let si: Vec<f64> = si.iter().map(|v| k * v).collect();
        let sj: Vec<f64> = si.iter().map(|v| 1.0 - v).collect();
        (si, sj)
    } else if mu < lam {
        let k = (1.0 - lam) / (1.0 - mu);
        // grow s_i by shrinking its complement, then rebuild s_j from the
        // final s_i so the pair stays an exact complement
        let si: Vec<f64> = si.iter().map(|v| 1.0 - k * (1.0 - v)).collect();
        let sj: Vec<f64> = si.iter().map(|v| 1.0 - v).collect();
        (si, sj)
    } else {
        let sj: Vec<f64> = si.iter().map(|v| 1.0 - v).collect();
        (si, sj)
    };
    MixMask {
        s_i: Tensor::from_vec(&shape, s_i),
        s_j: Tensor::from_vec(&shape, s_j),
        lam,
    }
}

/// Pixelwise convex combination `s_i * x_i + s_j * x_j`, the mask broadcast
/// across channels.
pub fn mix_inputs(tape: &Tape, x_i: &Tensor, x_j: &Tensor, mask: &MixMask) -> Tensor {
    let shape = x_i.shape();
    assert_eq!(
        shape,
        x_j.shape(),
        "mix_inputs: image shapes disagree: {:?} vs {:?}",
        shape,
        x_j.shape()
    );
    assert_eq!(shape.len(), 3, "mix_inputs: images must be [c, h, w]");
    let (mh, mw) = mask.hw();
    assert_eq!(
        (shape[1], shape[2]),
        (mh, mw),
        "mix_inputs: mask {mh}x{mw} does not cover image {}x{}",
        shape[1],
        shape[2]
    );
    tape.add(&tape.mul(x_i, &mask.s_i), &tape.mul(x_j, &mask.s_j))
}

/// Constant mask: every coordinate equals `lam`.
pub fn mixup_mask(lam: f64, hw: (usize, usize)) -> MixMask {
    assert!(
        lam > 0.0 && lam < 1.0,
        "mixup_mask: lambda {lam} outside the open interval (0, 1)"
    );
    let s_i = Tensor::full(&[hw.0, hw.1], lam);
    let s_j = Tensor::full(&[hw.0, hw.1], 1.0 - lam);
    MixMask { s_i, s_j, lam }
}

/// Rectangle mask: zero inside a random rectangle whose side fractions are
/// sqrt(1 - lam), one outside. The center is uniform and the rectangle is
/// clipped to the image, so the realized area fraction of `x_i` is returned
/// in `mask.lam`.
pub fn cutmix_mask(lam: f64, hw: (usize, usize), rng: &mut dyn rand::RngCore) -> MixMask {
    assert!(
        lam > 0.0 && lam < 1.0,
        "cutmix_mask: lambda {lam} outside the open interval (0, 1)"
    );
    let (h, w) = hw;
    let ratio = (1.0 - lam).sqrt();
    let cut_h = (h as f64 * ratio).round() as usize;
    let cut_w = (w as f64 * ratio).round() as usize;
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let y0 = cy.saturating_sub(cut_h / 2);
    let y1 = (cy + cut_h.div_ceil(2)).min(h);
    let x0 = cx.saturating_sub(cut_w / 2);
    let x1 = (cx + cut_w.div_ceil(2)).min(w);

    let mut data = vec![1.0; h * w];
    for y in y0..y1 {
        for x in x0..x1 {
            data[y * w + x] = 0.0;
        }
    }
    let realized = data.iter().sum::<f64>() / (h * w) as f64;
    let s_j: Vec<f64> = data.iter().map(|v| 1.0 - v).collect();
    MixMask {
        s_i: Tensor::from_vec(&[h, w], data),
        s_j: Tensor::from_vec(&[h, w], s_j),
        lam: realized,
    }
}
