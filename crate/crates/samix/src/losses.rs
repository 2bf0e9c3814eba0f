//! Classification and generation objectives.
//!
//! The classification side carries the usual cross-entropy and infoNCE plus
//! their ratio-weighted mixup forms. The generation side adds the two-class
//! local terms (pbce over a logit pair, the instance BCE over a similarity
//! pair), the eta-balanced combination of a local and a global term, the
//! label-filtered infoNCE, and the mask priors (mean alignment and the
//! variance term) with the linearly decaying weight schedule.
//!
//! Every loss is built from tape ops, so gradients flow through whatever
//! produced the logits, embeddings, or masks.

use crate::mixer::MixMask;
use crate::tensor::{Tape, Tensor};

/// Scalar knobs shared by the loss family.
#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Weight of the global term in the eta-balanced objective, in [0, 1].
    pub eta: f64,
    /// Contrastive temperature, > 0.
    pub temperature: f64,
    /// Margin inside the mask-mean alignment term.
    pub epsilon_margin: f64,
    /// Current mask-loss weight (schedule value), >= 0.
    pub beta: f64,
    /// Negative dictionary capacity.
    pub queue_len: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: 0.5,
            temperature: 0.2,
            epsilon_margin: 0.1,
            beta: 0.1,
            queue_len: 512,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) {
        assert!(
            (0.0..=1.0).contains(&self.eta),
            "loss config: eta {} outside [0, 1]",
            self.eta
        );
        assert!(
            self.temperature > 0.0,
            "loss config: temperature {} must be positive",
            self.temperature
        );
        assert!(self.beta >= 0.0, "loss config: beta {} negative", self.beta);
        assert!(
            self.epsilon_margin >= 0.0,
            "loss config: margin {} negative",
            self.epsilon_margin
        );
    }
}

/// Ring buffer of encoded keys with FIFO eviction. Entries must arrive
/// unit-normalized; an optional label rides along for filtering.
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    entries: Vec<Vec<f64>>,
    labels: Vec<Option<usize>>,
    cursor: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> NegativeQueue {
        assert!(capacity > 0, "negative queue: zero capacity");
        NegativeQueue {
            dim,
            capacity,
            entries: Vec::new(),
            labels: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, embedding: &[f64], label: Option<usize>) {
        assert_eq!(
            embedding.len(),
            self.dim,
            "negative queue: entry has {} dims, queue holds {}",
            embedding.len(),
            self.dim
        );
        let norm: f64 = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            (norm - 1.0).abs() < 1e-6,
            "negative queue: entry norm {norm} is not unit"
        );
        if self.entries.len() < self.capacity {
            self.entries.push(embedding.to_vec());
            self.labels.push(label);
        } else {
            self.entries[self.cursor].copy_from_slice(embedding);
            self.labels[self.cursor] = label;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Current contents as a constant `[len, dim]` tensor.
    pub fn snapshot(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for e in &self.entries {
            data.extend_from_slice(e);
        }
        Tensor::from_vec(&[self.entries.len(), self.dim], data)
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }
}

/// Index selection as a differentiable op chain: `v[idx]` as a `[1]` tensor.
fn pick(tape: &Tape, v: &Tensor, idx: usize) -> Tensor {
    let n = v.numel();
    assert!(idx < n, "index {idx} out of range for {n} classes");
    let mut onehot = vec![0.0; n];
    onehot[idx] = 1.0;
    tape.sum_all(&tape.mul(v, &Tensor::from_vec(&v.shape(), onehot)))
}

/// `-log softmax(logits)[idx]` for a 1-d logits vector.
fn neg_log_softmax_at(tape: &Tape, logits: &Tensor, idx: usize) -> Tensor {
    let picked = pick(tape, &tape.log(&tape.softmax(logits)), idx);
    tape.scale(&picked, -1.0)
}

/// Cross-entropy of a class-logit vector against one label.
pub fn ce(tape: &Tape, logits: &Tensor, y: usize) -> Tensor {
    assert_eq!(logits.shape().len(), 1, "ce: logits must be a 1-d vector");
    neg_log_softmax_at(tape, logits, y)
}

/// Ratio-weighted two-target cross-entropy:
/// `lam * ce(logits, y_i) + (1 - lam) * ce(logits, y_j)`.
pub fn mixup_ce(tape: &Tape, logits: &Tensor, y_i: usize, y_j: usize, lam: f64) -> Tensor {
    assert!(
        (0.0..=1.0).contains(&lam),
        "mixup_ce: lambda {lam} outside [0, 1]"
    );
    let a = ce(tape, logits, y_i);
    let b = ce(tape, logits, y_j);
    tape.add(&tape.scale(&a, lam), &tape.scale(&b, 1.0 - lam))
}

/// Two-class local term: renormalize the softmax over just the logits of
/// classes `a` and `b`, then take the ratio-weighted cross-entropy.
pub fn pbce(tape: &Tape, logits: &Tensor, a: usize, b: usize, lam: f64) -> Tensor {
    assert_ne!(a, b, "pbce: the two classes must differ, both are {a}");
    assert!(
        (0.0..=1.0).contains(&lam),
        "pbce: lambda {lam} outside [0, 1]"
    );
    let la = pick(tape, logits, a);
    let lb = pick(tape, logits, b);
    let pair = tape.concat(&[&la, &lb], 0);
    let lsm = tape.log(&tape.softmax(&pair));
    let weighted = tape.add(
        &tape.scale(&pick(tape, &lsm, 0), lam),
        &tape.scale(&pick(tape, &lsm, 1), 1.0 - lam),
    );
    tape.scale(&weighted, -1.0)
}

fn dot(tape: &Tape, a: &Tensor, b: &Tensor) -> Tensor {
    tape.sum_all(&tape.mul(a, b))
}

/// Similarity logits `[q . pos, q . n_1, ..., q . n_k] / t` as one vector.
fn contrast_logits(tape: &Tape, z_q: &Tensor, z_pos: &Tensor, negatives: &Tensor, t: f64) -> Tensor {
    let d = z_q.numel();
    let pos = dot(tape, z_q, z_pos);
    let k = negatives.shape()[0];
    let negs = tape.reshape(
        &tape.matmul(negatives, &tape.reshape(z_q, &[d, 1])),
        &[k],
    );
    tape.scale(&tape.concat(&[&pos, &negs], 0), 1.0 / t)
}

/// Contrastive loss of a query against its positive key, with the queue as
/// the negative set (the positive sits in the denominator as usual).
pub fn infonce(tape: &Tape, z_q: &Tensor, z_pos: &Tensor, queue: &NegativeQueue, t: f64) -> Tensor {
    assert!(
        !queue.is_empty(),
        "infonce: negative queue is empty; run warmup first"
    );
    infonce_with_negatives(tape, z_q, z_pos, &queue.snapshot(), t)
}

/// [`infonce`] against an already-materialized `[k, d]` negative matrix, so
/// one queue snapshot can serve a whole batch.
pub fn infonce_with_negatives(
    tape: &Tape,
    z_q: &Tensor,
    z_pos: &Tensor,
    negatives: &Tensor,
    t: f64,
) -> Tensor {
    assert!(
        negatives.shape()[0] > 0,
        "infonce: empty negative set; run warmup first"
    );
    let logits = contrast_logits(tape, z_q, z_pos, negatives, t);
    neg_log_softmax_at(tape, &logits, 0)
}

/// Ratio-weighted contrastive loss of a mixed query against both source
/// keys. Each term contrasts against the queue only; the other source key
/// is a known positive and never enters the denominator.
pub fn mixup_infonce(
    tape: &Tape,
    z_m: &Tensor,
    z_i_k: &Tensor,
    z_j_k: &Tensor,
    queue: &NegativeQueue,
    lam: f64,
    t: f64,
) -> Tensor {
    assert!(
        !queue.is_empty(),
        "mixup_infonce: negative queue is empty; run warmup first"
    );
    mixup_infonce_with_negatives(tape, z_m, z_i_k, z_j_k, &queue.snapshot(), lam, t)
}

/// [`mixup_infonce`] against an already-materialized negative matrix.
pub fn mixup_infonce_with_negatives(
    tape: &Tape,
    z_m: &Tensor,
    z_i_k: &Tensor,
    z_j_k: &Tensor,
    negatives: &Tensor,
    lam: f64,
    t: f64,
) -> Tensor {
    assert!(
        (0.0..=1.0).contains(&lam),
        "mixup_infonce: lambda {lam} outside [0, 1]"
    );
    let li = infonce_with_negatives(tape, z_m, z_i_k, negatives, t);
    let lj = infonce_with_negatives(tape, z_m, z_j_k, negatives, t);
    tape.add(&tape.scale(&li, lam), &tape.scale(&lj, 1.0 - lam))
}

/// Two-instance local term: the mixed embedding is classified between its
/// two source keys by their similarities alone.
pub fn bce_instance(
    tape: &Tape,
    z_m: &Tensor,
    z_i_k: &Tensor,
    z_j_k: &Tensor,
    lam: f64,
    t: f64,
) -> Tensor {
    assert!(
        (0.0..=1.0).contains(&lam),
        "bce_instance: lambda {lam} outside [0, 1]"
    );
    let si = tape.scale(&dot(tape, z_m, z_i_k), 1.0 / t);
    let sj = tape.scale(&dot(tape, z_m, z_j_k), 1.0 / t);
    let pair = tape.concat(&[&si, &sj], 0);
    let lsm = tape.log(&tape.softmax(&pair));
    let weighted = tape.add(
        &tape.scale(&pick(tape, &lsm, 0), lam),
        &tape.scale(&pick(tape, &lsm, 1), 1.0 - lam),
    );
    tape.scale(&weighted, -1.0)
}

/// `l_plus + eta * l_minus`. At eta = 0 the local term is returned as is.
pub fn eta_balanced(tape: &Tape, l_plus: &Tensor, l_minus: &Tensor, eta: f64) -> Tensor {
    assert!(
        (0.0..=1.0).contains(&eta),
        "eta_balanced: eta {eta} outside [0, 1]"
    );
    if eta == 0.0 {
        return l_plus.clone();
    }
    tape.add(l_plus, &tape.scale(l_minus, eta))
}

/// infoNCE with label filtering plus the diagnostics the caller needs.
pub struct FilteredNce {
    pub loss: Tensor,
    /// Queue entries dropped because their label matched the query.
    pub excluded: usize,
    /// True when every negative was filtered and the loss degenerated to
    /// the positive-only term (identically zero).
    pub degenerate: bool,
}

/// infoNCE whose denominator excludes queue entries labeled like the query.
/// `labels` must align with the queue contents.
pub fn infonce_filtered(
    tape: &Tape,
    z_q: &Tensor,
    z_pos: &Tensor,
    queue: &NegativeQueue,
    labels: &[Option<usize>],
    y_q: usize,
    t: f64,
) -> FilteredNce {
    assert!(
        !queue.is_empty(),
        "infonce_filtered: negative queue is empty; run warmup first"
    );
    assert_eq!(
        labels.len(),
        queue.len(),
        "infonce_filtered: {} labels for {} queue entries",
        labels.len(),
        queue.len()
    );
    let snapshot = queue.snapshot();
    let dim = z_q.numel();
    let snap = snapshot.data();
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (i, label) in labels.iter().enumerate() {
        if *label == Some(y_q) {
            excluded += 1;
        } else {
            kept.extend_from_slice(&snap[i * dim..][..dim]);
        }
    }
    let kept_n = kept.len() / dim;
    if kept_n == 0 {
        // positive-only fallback: softmax over a single logit is 1
        let pos = tape.scale(&dot(tape, z_q, z_pos), 1.0 / t);
        let loss = neg_log_softmax_at(tape, &pos, 0);
        return FilteredNce {
            loss,
            excluded,
            degenerate: true,
        };
    }
    let negatives = Tensor::from_vec(&[kept_n, dim], kept);
    let logits = contrast_logits(tape, z_q, z_pos, &negatives, t);
    FilteredNce {
        loss: neg_log_softmax_at(tape, &logits, 0),
        excluded,
        degenerate: false,
    }
}

/// Mask prior: `beta * (l_mu + variance_sign * l_sigma)` where `l_mu` is the
/// margin-insensitive distance between the mask mean and `lam`, and
/// `l_sigma` is the spatial variance. The default sign of -1 rewards
/// variance (pushes masks away from the constant degenerate solution);
/// +1 penalizes it as a smoothing prior.
pub fn mask_loss(
    tape: &Tape,
    mask: &MixMask,
    lam: f64,
    eps: f64,
    beta: f64,
    variance_sign: f64,
) -> Tensor {
    assert!(beta >= 0.0, "mask_loss: beta {beta} negative");
    assert!(eps >= 0.0, "mask_loss: margin {eps} negative");
    assert!(
        variance_sign == 1.0 || variance_sign == -1.0,
        "mask_loss: variance sign must be +1 or -1, got {variance_sign}"
    );
    let mu = tape.mean_all(&mask.s_i);
    // |lam - mu| out of relu pieces, then the margin hinge
    let above = tape.relu(&tape.add_scalar(&tape.scale(&mu, -1.0), lam));
    let below = tape.relu(&tape.add_scalar(&mu, -lam));
    let l_mu = tape.relu(&tape.add_scalar(&tape.add(&above, &below), -eps));
    let centered = tape.sub(&mask.s_i, &mu);
    let l_sigma = tape.mean_all(&tape.mul(&centered, &centered));
    tape.scale(&tape.add(&l_mu, &tape.scale(&l_sigma, variance_sign)), beta)
}

/// Linear decay from `beta0` at step 0 to zero at `total_steps`.
pub fn beta_schedule(step: usize, total_steps: usize, beta0: f64) -> f64 {
    assert!(
        step <= total_steps,
        "beta_schedule: step {step} beyond total {total_steps}"
    );
    beta0 * (1.0 - step as f64 / total_steps as f64)
}

/// Mean of a list of scalar losses, as one scalar.
pub fn average(tape: &Tape, losses: &[Tensor]) -> Tensor {
    assert!(!losses.is_empty(), "average: no losses");
    let refs: Vec<&Tensor> = losses.iter().collect();
    tape.mean_all(&tape.concat(&refs, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v = rand_vec(rng, n, -1.0, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        v
    }

    /// Straight-line scalar cross-entropy: -log softmax(logits)[y].
    fn ce_oracle(logits: &[f64], y: usize) -> f64 {
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        -((logits[y] - mx).exp() / denom).ln()
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let tape = Tape::new();
        for c in [2usize, 5, 10] {
            let logits = Tensor::from_vec(&[c], vec![0.3; c]);
            let loss = ce(&tape, &logits, 1);
            assert!((loss.value() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_confident_logits() {
        let tape = Tape::new();
        let loss = ce(&tape, &Tensor::from_vec(&[2], vec![10.0, -10.0]), 0);
        // -log sigma(20)
        let expect = -(1.0f64 / (1.0 + (-20.0f64).exp())).ln();
        assert!((loss.value() - expect).abs() < 1e-12);
        assert!(loss.value() < 3e-9);

        let loss = ce(&tape, &Tensor::from_vec(&[3], vec![50.0, 0.0, 0.0]), 0);
        assert!(loss.value() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn ce_rejects_bad_index() {
        let tape = Tape::new();
        ce(&tape, &Tensor::from_vec(&[2], vec![0.0, 1.0]), 5);
    }

    #[test]
    fn mixup_ce_endpoints_and_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[5], rand_vec(&mut rng, 5, -2.0, 2.0));
        let full = mixup_ce(&tape, &logits, 2, 4, 1.0);
        assert!((full.value() - ce(&tape, &logits, 2).value()).abs() < 1e-15);
        // same targets collapse to plain cross-entropy for any lambda
        let same = mixup_ce(&tape, &logits, 3, 3, 0.42);
        assert!((same.value() - ce(&tape, &logits, 3).value()).abs() < 1e-12);
    }

    #[test]
    fn mixup_ce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        for _ in 0..100 {
            let raw = rand_vec(&mut rng, 6, -3.0, 3.0);
            let lam = rng.gen_range(0.01..0.99);
            let (yi, yj) = (rng.gen_range(0..6), rng.gen_range(0..6));
            let logits = Tensor::from_vec(&[6], raw.clone());
            let got = mixup_ce(&tape, &logits, yi, yj, lam).value();
            let want = lam * ce_oracle(&raw, yi) + (1.0 - lam) * ce_oracle(&raw, yj);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn pbce_symmetric_logits_is_ln_two() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[4], vec![1.2, 0.0, 1.2, -3.0]);
        let loss = pbce(&tape, &logits, 0, 2, 0.3);
        assert!((loss.value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pbce_confident_correct_vanishes() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[3], vec![40.0, 0.0, 1.0]);
        let loss = pbce(&tape, &logits, 0, 1, 1.0);
        assert!(loss.value() < 1e-9);
    }

    #[test]
    fn pbce_two_logit_example() {
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[2], vec![2.0, 1.0]);
        let loss = pbce(&tape, &logits, 0, 1, 0.5);
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = 0.5 * (-sigma(1.0).ln()) + 0.5 * (-sigma(-1.0).ln());
        assert!((loss.value() - want).abs() < 1e-12);
        assert!((loss.value() - 0.8132616875182229).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "must differ")]
    fn pbce_rejects_equal_classes() {
        let tape = Tape::new();
        pbce(&tape, &Tensor::from_vec(&[3], vec![0.0; 3]), 1, 1, 0.5);
    }

    fn orthogonal_queue(k: usize, dim: usize, avoid: usize) -> NegativeQueue {
        // unit basis vectors orthogonal to e_avoid
        let mut q = NegativeQueue::new(k, dim);
        let mut axis = 0;
        for _ in 0..k {
            if axis == avoid {
                axis += 1;
            }
            let mut v = vec![0.0; dim];
            v[axis % dim] = 1.0;
            q.push(&v, None);
            axis += 1;
        }
        q
    }

    #[test]
    fn infonce_orthogonal_negatives_closed_form() {
        let tape = Tape::new();
        let k = 7;
        let dim = 16;
        let mut zq = vec![0.0; dim];
        zq[0] = 1.0;
        let queue = orthogonal_queue(k, dim, 0);
        let z_q = Tensor::from_vec(&[dim], zq.clone());
        let z_pos = Tensor::from_vec(&[dim], zq);
        let loss = infonce(&tape, &z_q, &z_pos, &queue, 1.0);
        let e = std::f64::consts::E;
        let want = -(e / (e + k as f64)).ln();
        assert!((loss.value() - want).abs() < 1e-12, "{} vs {want}", loss.value());
    }

    #[test]
    fn infonce_indistinguishable_negative_is_ln_two() {
        let tape = Tape::new();
        let dim = 4;
        let mut v = vec![0.0; dim];
        v[1] = 1.0;
        let mut queue = NegativeQueue::new(1, dim);
        queue.push(&v, None);
        let z_q = Tensor::from_vec(&[dim], v.clone());
        let z_pos = Tensor::from_vec(&[dim], v);
        let loss = infonce(&tape, &z_q, &z_pos, &queue, 1.0);
        assert!((loss.value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_sharp_temperature_vanishes() {
        let tape = Tape::new();
        let dim = 8;
        let mut v = vec![0.0; dim];
        v[0] = 1.0;
        let queue = orthogonal_queue(4, dim, 0);
        let z_q = Tensor::from_vec(&[dim], v.clone());
        let z_pos = Tensor::from_vec(&[dim], v);
        let loss = infonce(&tape, &z_q, &z_pos, &queue, 0.01);
        assert!(loss.value() < 1e-9, "loss {}", loss.value());
    }

    #[test]
    #[should_panic(expected = "queue is empty")]
    fn infonce_rejects_empty_queue() {
        let tape = Tape::new();
        let v = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let queue = NegativeQueue::new(4, 2);
        infonce(&tape, &v, &v, &queue, 0.2);
    }

    /// Straight-line infonce: all dot products by hand.
    fn infonce_oracle(zq: &[f64], zpos: &[f64], negs: &[Vec<f64>], t: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pos = (dot(zq, zpos) / t).exp();
        let mut denom = pos;
        for n in negs {
            denom += (dot(zq, n) / t).exp();
        }
        -(pos / denom).ln()
    }

    #[test]
    fn mixup_infonce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let dim = 8;
        let k = 4;
        for _ in 0..100 {
            let mut queue = NegativeQueue::new(k, dim);
            let mut negs = Vec::new();
            for _ in 0..k {
                let v = unit_vec(&mut rng, dim);
                queue.push(&v, None);
                negs.push(v);
            }
            let zm = unit_vec(&mut rng, dim);
            let zi = unit_vec(&mut rng, dim);
            let zj = unit_vec(&mut rng, dim);
            let lam = rng.gen_range(0.01..0.99);
            let t = 0.2;
            let got = mixup_infonce(
                &tape,
                &Tensor::from_vec(&[dim], zm.clone()),
                &Tensor::from_vec(&[dim], zi.clone()),
                &Tensor::from_vec(&[dim], zj.clone()),
                &queue,
                lam,
                t,
            )
            .value();
            let want = lam * infonce_oracle(&zm, &zi, &negs, t)
                + (1.0 - lam) * infonce_oracle(&zm, &zj, &negs, t);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn mixup_infonce_endpoint_and_equal_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let dim = 8;
        let mut queue = NegativeQueue::new(3, dim);
        for _ in 0..3 {
            queue.push(&unit_vec(&mut rng, dim), None);
        }
        let zm = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zi = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zj = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let at_one = mixup_infonce(&tape, &zm, &zi, &zj, &queue, 1.0, 0.2).value();
        let direct = infonce(&tape, &zm, &zi, &queue, 0.2).value();
        assert!((at_one - direct).abs() < 1e-15);
        let same = mixup_infonce(&tape, &zm, &zi, &zi, &queue, 0.37, 0.2).value();
        let single = infonce(&tape, &zm, &zi, &queue, 0.2).value();
        assert!((same - single).abs() < 1e-12);
    }

    #[test]
    fn bce_instance_equidistant_is_ln_two() {
        let tape = Tape::new();
        // z_m equidistant from both keys
        let zm = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]);
        let zi = Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]);
        let zj = Tensor::from_vec(&[3], vec![0.0, 0.0, 1.0]);
        let loss = bce_instance(&tape, &zm, &zi, &zj, 0.5, 0.2);
        assert!((loss.value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_instance_similarity_example() {
        let tape = Tape::new();
        // dots 0.9 and 0.1 at temperature 0.2: logit gap of 4
        let zm = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]);
        let a: f64 = 0.9;
        let b: f64 = 0.1;
        let zi = Tensor::from_vec(&[3], vec![a, (1.0 - a * a).sqrt(), 0.0]);
        let zj = Tensor::from_vec(&[3], vec![b, 0.0, (1.0 - b * b).sqrt()]);
        let loss = bce_instance(&tape, &zm, &zi, &zj, 0.5, 0.2);
        let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = 0.5 * (-sigma(4.0).ln()) + 0.5 * (-sigma(-4.0).ln());
        assert!((loss.value() - want).abs() < 1e-12);
        assert!((loss.value() - 2.0181499279178094).abs() < 1e-9);
    }

    #[test]
    fn bce_instance_shift_invariance() {
        let tape = Tape::new();
        let zm = Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]);
        let build = |d: f64, axis: usize| {
            let mut v = vec![0.0; 3];
            v[0] = d;
            v[axis] = (1.0 - d * d).sqrt();
            Tensor::from_vec(&[3], v)
        };
        let base = bce_instance(&tape, &zm, &build(0.1, 1), &build(-0.2, 2), 0.3, 0.2).value();
        let shifted = bce_instance(&tape, &zm, &build(0.4, 1), &build(0.1, 2), 0.3, 0.2).value();
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn pbce_equals_bce_under_dictionary_substitution() {
        // class logits <-> scaled similarities: matched inputs give the
        // same value
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        for _ in 0..100 {
            let zm = unit_vec(&mut rng, 4);
            let zi = unit_vec(&mut rng, 4);
            let zj = unit_vec(&mut rng, 4);
            let t = 0.2;
            let lam = rng.gen_range(0.0..1.0);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let logits = Tensor::from_vec(&[2], vec![dot(&zm, &zi) / t, dot(&zm, &zj) / t]);
            let via_pbce = pbce(&tape, &logits, 0, 1, lam).value();
            let via_bce = bce_instance(
                &tape,
                &Tensor::from_vec(&[4], zm),
                &Tensor::from_vec(&[4], zi),
                &Tensor::from_vec(&[4], zj),
                lam,
                t,
            )
            .value();
            assert!((via_pbce - via_bce).abs() < 1e-12, "{via_pbce} vs {via_bce}");
        }
    }

    #[test]
    fn eta_balanced_arithmetic() {
        let tape = Tape::new();
        let plus = Tensor::scalar(0.8);
        let minus = Tensor::scalar(0.4);
        assert_eq!(eta_balanced(&tape, &plus, &minus, 0.0).value().to_bits(), 0.8f64.to_bits());
        assert!((eta_balanced(&tape, &plus, &minus, 1.0).value() - 1.2).abs() < 1e-15);
        assert!((eta_balanced(&tape, &plus, &minus, 0.5).value() - 1.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn eta_balanced_rejects_bad_eta() {
        let tape = Tape::new();
        let l = Tensor::scalar(1.0);
        eta_balanced(&tape, &l, &l, 1.5);
    }

    #[test]
    fn filtered_equals_plain_when_labels_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let dim = 8;
        let mut queue = NegativeQueue::new(5, dim);
        for i in 0..5 {
            queue.push(&unit_vec(&mut rng, dim), Some(i + 10));
        }
        let zq = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zp = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let labels = queue.labels().to_vec();
        let filtered = infonce_filtered(&tape, &zq, &zp, &queue, &labels, 3, 0.2);
        let plain = infonce(&tape, &zq, &zp, &queue, 0.2);
        assert_eq!(filtered.loss.value().to_bits(), plain.value().to_bits());
        assert_eq!(filtered.excluded, 0);
        assert!(!filtered.degenerate);
    }

    #[test]
    fn filtered_all_collisions_degenerates_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let dim = 8;
        let mut queue = NegativeQueue::new(4, dim);
        for _ in 0..4 {
            queue.push(&unit_vec(&mut rng, dim), Some(2));
        }
        let zq = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zp = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let labels = queue.labels().to_vec();
        let out = infonce_filtered(&tape, &zq, &zp, &queue, &labels, 2, 0.2);
        assert_eq!(out.loss.value(), 0.0);
        assert_eq!(out.excluded, 4);
        assert!(out.degenerate);
    }

    #[test]
    fn filtered_half_collisions_closed_form() {
        let tape = Tape::new();
        let dim = 16;
        let k = 8;
        let mut queue = NegativeQueue::new(k, dim);
        // orthogonal negatives; half carry the query label
        for i in 0..k {
            let mut v = vec![0.0; dim];
            v[i + 1] = 1.0;
            queue.push(&v, Some(if i % 2 == 0 { 1 } else { 7 }));
        }
        let mut z = vec![0.0; dim];
        z[0] = 1.0;
        let zq = Tensor::from_vec(&[dim], z.clone());
        let zp = Tensor::from_vec(&[dim], z);
        let labels = queue.labels().to_vec();
        let out = infonce_filtered(&tape, &zq, &zp, &queue, &labels, 1, 1.0);
        let e = std::f64::consts::E;
        let want = -(e / (e + (k / 2) as f64)).ln();
        assert!((out.loss.value() - want).abs() < 1e-12);
        assert_eq!(out.excluded, k / 2);
    }

    #[test]
    fn mask_loss_cases() {
        let tape = Tape::new();
        // constant mask at lambda: both terms vanish
        let m = crate::mixer::mixup_mask(0.5, (4, 4));
        let l = mask_loss(&tape, &m, 0.5, 0.1, 1.0, -1.0);
        assert_eq!(l.value(), 0.0);
        // constant 0.8 vs lambda 0.5 with margin 0.1: mean term is 0.2
        let m = crate::mixer::mixup_mask(0.8, (4, 4));
        let l = mask_loss(&tape, &m, 0.5, 0.1, 1.0, 1.0);
        assert!((l.value() - 0.2).abs() < 1e-12, "variance of a constant is zero");
        // binary half-ones mask: variance term is 0.25
        let mut data = vec![0.0; 16];
        for v in data.iter_mut().take(8) {
            *v = 1.0;
        }
        let sj: Vec<f64> = data.iter().map(|v| 1.0 - v).collect();
        let m = crate::mixer::MixMask {
            s_i: Tensor::from_vec(&[4, 4], data),
            s_j: Tensor::from_vec(&[4, 4], sj),
            lam: 0.5,
        };
        let l = mask_loss(&tape, &m, 0.5, 0.1, 1.0, 1.0);
        assert!((l.value() - 0.25).abs() < 1e-12);
        // the sign flips the variance contribution
        let l = mask_loss(&tape, &m, 0.5, 0.1, 1.0, -1.0);
        assert!((l.value() + 0.25).abs() < 1e-12);
        // beta scales everything
        let l = mask_loss(&tape, &m, 0.5, 0.1, 0.1, 1.0);
        assert!((l.value() - 0.025).abs() < 1e-12);
    }

    #[test]
    fn beta_schedule_is_linear() {
        assert_eq!(beta_schedule(0, 100, 0.1), 0.1);
        assert_eq!(beta_schedule(100, 100, 0.1), 0.0);
        assert!((beta_schedule(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn mixup_losses_are_affine_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let logits = Tensor::from_vec(&[5], rand_vec(&mut rng, 5, -2.0, 2.0));
        let (yi, yj) = (1, 3);
        let at_zero = mixup_ce(&tape, &logits, yi, yj, 0.0).value();
        let at_one = mixup_ce(&tape, &logits, yi, yj, 1.0).value();
        for _ in 0..20 {
            let lam = rng.gen_range(0.0..1.0);
            let got = mixup_ce(&tape, &logits, yi, yj, lam).value();
            assert!((got - (lam * at_one + (1.0 - lam) * at_zero)).abs() < 1e-9);
        }

        let dim = 8;
        let mut queue = NegativeQueue::new(4, dim);
        for _ in 0..4 {
            queue.push(&unit_vec(&mut rng, dim), None);
        }
        let zm = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zi = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zj = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let at_zero = mixup_infonce(&tape, &zm, &zi, &zj, &queue, 0.0, 0.2).value();
        let at_one = mixup_infonce(&tape, &zm, &zi, &zj, &queue, 1.0, 0.2).value();
        for _ in 0..20 {
            let lam = rng.gen_range(0.0..1.0);
            let got = mixup_infonce(&tape, &zm, &zi, &zj, &queue, lam, 0.2).value();
            assert!((got - (lam * at_one + (1.0 - lam) * at_zero)).abs() < 1e-9);
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tape = Tape::new();
        for _ in 0..50 {
            let logits = Tensor::from_vec(&[4], rand_vec(&mut rng, 4, -3.0, 3.0));
            let lam = rng.gen_range(0.0..1.0);
            assert!(ce(&tape, &logits, 0).value() >= 0.0);
            assert!(mixup_ce(&tape, &logits, 0, 2, lam).value() >= 0.0);
            assert!(pbce(&tape, &logits, 0, 3, lam).value() >= 0.0);
            let zm = Tensor::from_vec(&[4], unit_vec(&mut rng, 4));
            let zi = Tensor::from_vec(&[4], unit_vec(&mut rng, 4));
            let zj = Tensor::from_vec(&[4], unit_vec(&mut rng, 4));
            assert!(bce_instance(&tape, &zm, &zi, &zj, lam, 0.2).value() >= 0.0);
        }
    }

    #[test]
    fn queue_is_fifo_at_capacity() {
        let mut queue = NegativeQueue::new(3, 2);
        let vecs = [
            [1.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [0.0, -1.0],
        ];
        for (i, v) in vecs.iter().enumerate() {
            queue.push(v, Some(i));
            assert!(queue.len() <= 3);
        }
        assert_eq!(queue.len(), 3);
        // the first entry was evicted; slot 0 now holds the newest
        let snap = queue.snapshot().to_vec();
        assert_eq!(&snap[0..2], &[0.0, -1.0]);
        assert_eq!(&snap[2..4], &[0.0, 1.0]);
        assert_eq!(queue.labels()[0], Some(3));
    }

    #[test]
    #[should_panic(expected = "not unit")]
    fn queue_rejects_unnormalized_entries() {
        let mut queue = NegativeQueue::new(2, 2);
        queue.push(&[2.0, 0.0], None);
    }

    #[test]
    fn gradcheck_losses_against_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits0 = Tensor::from_vec(&[5], rand_vec(&mut rng, 5, -1.0, 1.0));
        let err = gradcheck(|t, x| mixup_ce(t, x, 1, 3, 0.3), &logits0, 1e-5).unwrap();
        assert!(err < 1e-6, "mixup_ce gradcheck {err}");
        let err = gradcheck(|t, x| pbce(t, x, 0, 4, 0.7), &logits0, 1e-5).unwrap();
        assert!(err < 1e-6, "pbce gradcheck {err}");

        let dim = 6;
        let mut queue = NegativeQueue::new(3, dim);
        for _ in 0..3 {
            queue.push(&unit_vec(&mut rng, dim), None);
        }
        let zi = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zj = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let zm0 = Tensor::from_vec(&[dim], unit_vec(&mut rng, dim));
        let err = gradcheck(
            |t, zm| mixup_infonce(t, zm, &zi, &zj, &queue, 0.4, 0.2),
            &zm0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "mixup_infonce gradcheck {err}");
        let err = gradcheck(
            |t, zm| bce_instance(t, zm, &zi, &zj, 0.4, 0.2),
            &zm0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "bce_instance gradcheck {err}");

        // mask prior through a sigmoid so the probe is unconstrained
        let raw0 = Tensor::from_vec(&[3, 3], rand_vec(&mut rng, 9, -1.5, 1.5));
        let err = gradcheck(
            |t, raw| {
                let s_i = t.sigmoid(raw);
                let ones = Tensor::full(&[3, 3], 1.0);
                let mask = crate::mixer::MixMask {
                    s_j: t.sub(&ones, &s_i),
                    s_i,
                    lam: 0.4,
                };
                mask_loss(t, &mask, 0.4, 0.1, 0.7, -1.0)
            },
            &raw0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "mask_loss gradcheck {err}");
    }
}
