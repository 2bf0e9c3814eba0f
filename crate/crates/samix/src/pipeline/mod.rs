//! Training orchestration: momentum alternating optimization for the
//! supervised and contrastive scenarios, the frozen-generator variant,
//! online clustering, linear probing, and checkpoint plumbing.
//!
//! Every step follows the same skeleton: the momentum encoder produces the
//! feature maps the generator consumes, two mixed batches are built (one
//! with detached masks for the online networks, one with live masks for the
//! generator), the two objectives are backpropagated and stepped
//! separately, and the momentum networks track the online ones by
//! exponential moving average. Stop-gradient boundaries are structural:
//! the online loss never records generator ops, and the generator loss
//! reaches only generator (and cluster-head) parameters because the
//! momentum weights do not require grad.

pub mod checkpoint;
mod cluster;

pub use checkpoint::{load_state_table, save_state_table, CheckpointError, StateTable};
pub use cluster::ClusterState;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_images, two_view, LambdaSampler, Sample, ViewPair};
use crate::encoder::{sample_features, sample_row, Encoder, Heads, TAP_CHANNELS};
use crate::losses::{
    average, bce_instance, ce, eta_balanced, mask_loss, mixup_ce, mixup_infonce_with_negatives,
    pbce, NegativeQueue,
};
use crate::mixer::{lambda_adjust, mix_inputs, MixMask, Mixer};
use crate::nn::{cosine_lr, Sgd};
use crate::tensor::{ema_update, Tape, Tensor};

/// Projection width used for attention tokens in the generator.
const MIXER_PROJ_DIM: usize = 32;

/// Generation-objective flavor for contrastive training: instance-level
/// (similarity-based) or cluster-level (pseudo-label based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Instance,
    Cluster,
}

/// All scalar knobs for a training run. CLI or tests fill this in; the
/// defaults are the small-dataset settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: f64,
    pub eta: f64,
    pub beta0: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub lr: f64,
    pub mixer_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub queue_len: usize,
    pub clusters: usize,
    pub momentum_decay: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Sign on the mask variance term: -1 rewards variance, +1 smooths.
    pub variance_sign: f64,
    pub nonlinear_content: bool,
    /// Extra learning-rate factor for the ratio-encoding scalar. The
    /// scalar starts at zero inside a clamp, so it needs a faster slot
    /// than the rest of the generator to leave the boundary early.
    pub gamma_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 2.0,
            eta: 0.5,
            beta0: 0.1,
            epsilon: 0.1,
            temperature: 0.2,
            lr: 0.05,
            mixer_lr: 0.1,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            queue_len: 512,
            clusters: 16,
            momentum_decay: 0.999,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            variance_sign: -1.0,
            nonlinear_content: true,
            gamma_lr_scale: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.alpha > 0.0, "config: alpha must be positive");
        assert!((0.0..=1.0).contains(&self.eta), "config: eta outside [0, 1]");
        assert!(self.beta0 >= 0.0, "config: beta0 negative");
        assert!(self.epsilon >= 0.0, "config: epsilon negative");
        assert!(self.temperature > 0.0, "config: temperature must be positive");
        assert!(self.lr > 0.0 && self.mixer_lr > 0.0, "config: lr must be positive");
        assert!(self.batch_size >= 2, "config: batch size below 2 cannot form pairs");
        assert!((0.0..=1.0).contains(&self.momentum_decay), "config: momentum decay outside [0, 1]");
    }
}

/// Online and momentum networks, the generator, their optimizers, and the
/// sampling state for one training run.
pub struct ModelState {
    pub online_encoder: Encoder,
    pub online_heads: Heads,
    pub momentum_encoder: Encoder,
    pub momentum_heads: Heads,
    pub mixer: Mixer,
    pub opt_online: Sgd,
    pub opt_mixer: Sgd,
    pub opt_gamma: Sgd,
    pub opt_cluster: Sgd,
    pub queue: NegativeQueue,
    pub cluster: Option<ClusterState>,
    pub lambda_q: LambdaSampler,
    pub lambda_k: LambdaSampler,
    pub rng: ChaCha8Rng,
    pub momentum_decay: f64,
    dataset_len: usize,
}

impl ModelState {
    pub fn new(num_classes: usize, dataset_len: usize, cfg: &TrainConfig) -> ModelState {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let online_encoder = Encoder::new(&mut rng);
        let online_heads = Heads::new(num_classes, cfg.clusters, &mut rng);
        let mixer = Mixer::new(TAP_CHANNELS, MIXER_PROJ_DIM, cfg.nonlinear_content, &mut rng);

        let momentum_encoder = Encoder::new(&mut rng);
        momentum_encoder
            .import_state(&online_encoder.export_state())
            .expect("fresh copies share shapes");
        let momentum_heads = Heads::new(num_classes, cfg.clusters, &mut rng);
        momentum_heads
            .import_state(&online_heads.export_state())
            .expect("fresh copies share shapes");
        momentum_encoder.set_requires_grad(false);
        momentum_heads.set_requires_grad(false);

        let mut online_params = online_encoder.params();
        online_params.extend(online_heads.params());
        let opt_online = Sgd::new(online_params, cfg.sgd_momentum, cfg.weight_decay);
        // the ratio-encoding scalar trains in its own momentum-free slot;
        // everything else in the generator shares one slot
        let mut mixer_params = mixer.params();
        let gamma_param = mixer_params.remove(0);
        let opt_mixer = Sgd::new(mixer_params, cfg.sgd_momentum, cfg.weight_decay);
        let opt_gamma = Sgd::new(vec![gamma_param], 0.0, 0.0);
        let opt_cluster = Sgd::new(online_heads.cluster_params(), cfg.sgd_momentum, cfg.weight_decay);

        ModelState {
            online_encoder,
            online_heads,
            momentum_encoder,
            momentum_heads,
            mixer,
            opt_online,
            opt_mixer,
            opt_gamma,
            opt_cluster,
            queue: NegativeQueue::new(cfg.queue_len, crate::encoder::PROJECT_DIM),
            cluster: None,
            lambda_q: LambdaSampler::new(cfg.alpha, cfg.seed.wrapping_add(1)),
            lambda_k: LambdaSampler::new(cfg.alpha, cfg.seed.wrapping_add(2)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3)),
            momentum_decay: cfg.momentum_decay,
            dataset_len,
        }
    }

    /// Momentum parameter list aligned with the online one, for the EMA.
    fn momentum_param_pairs(&self) -> Vec<(Tensor, Tensor)> {
        let mut pairs = Vec::new();
        let (mo, on) = (self.momentum_encoder.params(), self.online_encoder.params());
        pairs.extend(mo.into_iter().zip(on));
        let (mo, on) = (self.momentum_heads.all_params(), self.online_heads.all_params());
        pairs.extend(mo.into_iter().zip(on));
        pairs
    }
}

/// Update every momentum parameter toward its online twin.
pub fn ema_step(state: &ModelState) {
    for (target, source) in state.momentum_param_pairs() {
        ema_update(&target, &source, state.momentum_decay);
    }
}

/// Random pairing permutation with no fixed points: reshuffles until every
/// cell is off-diagonal, falling back to a rotation.
pub fn pair_permutation(n: usize, rng: &mut dyn rand::RngCore) -> Vec<usize> {
    assert!(n >= 2, "pairing needs at least two samples");
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..64 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, j)| i != *j) {
            return perm;
        }
    }
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Shuffled index batches for one epoch; a trailing batch of fewer than two
/// samples cannot form pairs and is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut dyn rand::RngCore) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

/// Cosine-with-warmup multiplier in [0, 1] for a given step.
pub fn schedule_at(step: usize, total_steps: usize) -> f64 {
    cosine_lr(1.0, step, total_steps, 0.05)
}

/// One metrics line per training step, machine-parseable.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_gen: f64,
    pub loss_mask: f64,
    pub mask_mean: f64,
    pub mask_var: f64,
    pub beta: f64,
}

impl StepMetrics {
    pub fn format_line(&self) -> String {
        format!(
            "step={} loss_cls={} loss_gen={} loss_mask={} mask_mean={} mask_var={} beta={}",
            self.step, self.loss_cls, self.loss_gen, self.loss_mask, self.mask_mean, self.mask_var, self.beta
        )
    }
}

/// Feature maps for the generator, from the momentum encoder. Nothing is
/// recorded: the inputs are constants and momentum weights carry no grad.
pub fn momentum_features(tape: &Tape, state: &ModelState, images: &Tensor) -> Tensor {
    state.momentum_encoder.forward(tape, images, true).features
}

fn image_hw(images: &Tensor) -> (usize, usize) {
    let s = images.shape();
    assert_eq!(s.len(), 4, "expected [n, c, h, w] images, got {s:?}");
    (s[2], s[3])
}

/// Mixed batch with detached masks: built under a paused tape, so the
/// result is a constant input for the online networks.
fn mixed_batch_detached(
    tape: &Tape,
    state: &mut ModelState,
    images: &Tensor,
    features: &Tensor,
    pairs: &[usize],
    lams: &[f64],
    eval_mode_with_adjust: bool,
) -> Tensor {
    let (h, w) = image_hw(images);
    let n = pairs.len();
    let ModelState { mixer, rng, .. } = state;
    tape.paused(|| {
        let mut data = Vec::with_capacity(images.numel());
        for p in 0..n {
            let zi = sample_features(tape, features, p);
            let zj = sample_features(tape, features, pairs[p]);
            let mask = if eval_mode_with_adjust {
                let raw = mixer.generate_mask(tape, &zi, &zj, lams[p], (h, w), false, rng);
                lambda_adjust(&raw, lams[p])
            } else {
                mixer.generate_mask(tape, &zi, &zj, lams[p], (h, w), true, rng)
            };
            let xi = sample_features(tape, images, p);
            let xj = sample_features(tape, images, pairs[p]);
            let xm = mix_inputs(tape, &xi, &xj, &mask);
            data.extend_from_slice(&xm.data());
        }
        Tensor::from_vec(&[n, 3, h, w], data)
    })
}

/// Mixed batch with live masks on the tape, plus the masks themselves.
fn mixed_batch_live(
    tape: &Tape,
    state: &mut ModelState,
    images: &Tensor,
    features: &Tensor,
    pairs: &[usize],
    lams: &[f64],
) -> (Tensor, Vec<MixMask>) {
    let (h, w) = image_hw(images);
    let n = pairs.len();
    let ModelState { mixer, rng, .. } = state;
    let mut parts = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for p in 0..n {
        let zi = sample_features(tape, features, p);
        let zj = sample_features(tape, features, pairs[p]);
        let mask = mixer.generate_mask(tape, &zi, &zj, lams[p], (h, w), true, rng);
        let xi = sample_features(tape, images, p);
        let xj = sample_features(tape, images, pairs[p]);
        let xm = mix_inputs(tape, &xi, &xj, &mask);
        parts.push(tape.reshape(&xm, &[1, 3, h, w]));
        masks.push(mask);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    (tape.concat(&refs, 0), masks)
}

/// Two-class local term with the collision fallback: when both labels
/// agree the pairwise renormalization is undefined and the term reduces to
/// plain cross-entropy on the shared class.
fn local_class_term(tape: &Tape, logits_row: &Tensor, a: usize, b: usize, lam: f64) -> Tensor {
    if a == b {
        ce(tape, logits_row, a)
    } else {
        pbce(tape, logits_row, a, b, lam)
    }
}

/// Supervised online objective: ratio-weighted cross-entropy on a mixed
/// batch whose masks are stop-gradiented. Backpropagating this loss leaves
/// every generator parameter untouched.
pub fn sl_online_loss(
    tape: &Tape,
    state: &mut ModelState,
    images: &Tensor,
    features: &Tensor,
    labels: &[usize],
    pairs: &[usize],
    lams: &[f64],
) -> Tensor {
    let xm = mixed_batch_detached(tape, state, images, features, pairs, lams, false);
    let out = state.online_encoder.forward(tape, &xm, true);
    let logits = state.online_heads.classify(tape, &out.embedding);
    let terms: Vec<Tensor> = (0..pairs.len())
        .map(|p| {
            let row = sample_row(tape, &logits, p);
            mixup_ce(tape, &row, labels[p], labels[pairs[p]], lams[p])
        })
        .collect();
    average(tape, &terms)
}

pub struct GenLoss {
    pub total: Tensor,
    pub gen_value: f64,
    pub mask_value: f64,
    pub mask_mean: f64,
    pub mask_var: f64,
}

/// Supervised generation objective: the eta-balanced pair of the two-class
/// local term and the ratio-weighted cross-entropy, both evaluated through
/// the momentum networks on a live-mask mixed batch, plus the mask prior.
/// Backpropagating this loss reaches only generator parameters.
pub fn sl_mixer_loss(
    tape: &Tape,
    state: &mut ModelState,
    images: &Tensor,
    features: &Tensor,
    labels: &[usize],
    pairs: &[usize],
    lams: &[f64],
    beta: f64,
    cfg: &TrainConfig,
) -> GenLoss {
    let n = pairs.len();
    let (xm, masks) = mixed_batch_live(tape, state, images, features, pairs, lams);
    let out = state.momentum_encoder.forward(tape, &xm, true);
    let logits = state.momentum_heads.classify(tape, &out.embedding);

    let mut gen_terms = Vec::with_capacity(n);
    let mut mask_terms = Vec::with_capacity(n);
    for p in 0..n {
        let row = sample_row(tape, &logits, p);
        let (yi, yj) = (labels[p], labels[pairs[p]]);
        let l_plus = local_class_term(tape, &row, yi, yj, lams[p]);
        let l_minus = mixup_ce(tape, &row, yi, yj, lams[p]);
        gen_terms.push(eta_balanced(tape, &l_plus, &l_minus, cfg.eta));
        mask_terms.push(mask_loss(tape, &masks[p], lams[p], cfg.epsilon, beta, cfg.variance_sign));
    }
    let gen = average(tape, &gen_terms);
    let mask = average(tape, &mask_terms);
    let total = tape.add(&gen, &mask);
    let mask_mean = masks.iter().map(|m| m.mean()).sum::<f64>() / n as f64;
    let mask_var = masks.iter().map(|m| m.spatial_variance()).sum::<f64>() / n as f64;
    GenLoss {
        gen_value: gen.value(),
        mask_value: mask.value(),
        total,
        mask_mean,
        mask_var,
    }
}

/// One supervised training step: momentum features, online update with
/// stop-gradiented masks, generator update through the momentum networks,
/// then the EMA. `sched` scales both learning rates; `beta` is the current
/// mask-prior weight.
pub fn train_step_sl(
    state: &mut ModelState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    step: usize,
    sched: f64,
    beta: f64,
) -> StepMetrics {
    let n = batch.len();
    let images = batch_images(batch);
    let labels: Vec<usize> = batch
        .iter()
        .map(|s| s.label.expect("supervised training needs labels"))
        .collect();

    let tape = Tape::new();
    let features = momentum_features(&tape, state, &images);
    let pairs = pair_permutation(n, &mut state.rng);
    let lams_q: Vec<f64> = (0..n).map(|_| state.lambda_q.sample()).collect();
    let lams_k: Vec<f64> = (0..n).map(|_| state.lambda_k.sample()).collect();

    let loss_cls = sl_online_loss(&tape, state, &images, &features, &labels, &pairs, &lams_q);
    let loss_cls_value = loss_cls.value();
    tape.backward(&loss_cls);
    state.opt_online.step(cfg.lr * sched);
    state.opt_online.zero_grads();

    let gen = sl_mixer_loss(&tape, state, &images, &features, &labels, &pairs, &lams_k, beta, cfg);
    tape.backward(&gen.total);
    state.opt_mixer.step(cfg.mixer_lr * sched);
    state.opt_gamma.step(cfg.mixer_lr * cfg.gamma_lr_scale * sched);
    state.mixer.clamp_gamma();
    state.opt_mixer.zero_grads();
    state.opt_gamma.zero_grads();

    ema_step(state);

    StepMetrics {
        step,
        loss_cls: loss_cls_value,
        loss_gen: gen.gen_value,
        loss_mask: gen.mask_value,
        mask_mean: gen.mask_mean,
        mask_var: gen.mask_var,
        beta,
    }
}

/// Frozen-generator supervised step: masks come from the (loaded) generator
/// in eval mode with the test-time mean adjustment, only the online
/// networks train, and the generator parameters are never touched.
pub fn train_step_pretrained(
    state: &mut ModelState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    step: usize,
    sched: f64,
) -> StepMetrics {
    let n = batch.len();
    let images = batch_images(batch);
    let labels: Vec<usize> = batch
        .iter()
        .map(|s| s.label.expect("supervised training needs labels"))
        .collect();

    let tape = Tape::new();
    let features = momentum_features(&tape, state, &images);
    let pairs = pair_permutation(n, &mut state.rng);
    let lams_q: Vec<f64> = (0..n).map(|_| state.lambda_q.sample()).collect();

    let xm = mixed_batch_detached(&tape, state, &images, &features, &pairs, &lams_q, true);
    let out = state.online_encoder.forward(&tape, &xm, true);
    let logits = state.online_heads.classify(&tape, &out.embedding);
    let terms: Vec<Tensor> = (0..n)
        .map(|p| {
            let row = sample_row(&tape, &logits, p);
            mixup_ce(&tape, &row, labels[p], labels[pairs[p]], lams_q[p])
        })
        .collect();
    let loss_cls = average(&tape, &terms);
    let loss_cls_value = loss_cls.value();
    tape.backward(&loss_cls);
    state.opt_online.step(cfg.lr * sched);
    state.opt_online.zero_grads();

    ema_step(state);

    StepMetrics {
        step,
        loss_cls: loss_cls_value,
        loss_gen: 0.0,
        loss_mask: 0.0,
        mask_mean: 0.0,
        mask_var: 0.0,
        beta: 0.0,
    }
}

/// Plain supervised step without any mixing; the comparison baseline.
pub fn train_step_vanilla(
    state: &mut ModelState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    step: usize,
    sched: f64,
) -> StepMetrics {
    let n = batch.len();
    let images = batch_images(batch);
    let labels: Vec<usize> = batch
        .iter()
        .map(|s| s.label.expect("supervised training needs labels"))
        .collect();
    let tape = Tape::new();
    let out = state.online_encoder.forward(&tape, &images, true);
    let logits = state.online_heads.classify(&tape, &out.embedding);
    let terms: Vec<Tensor> = (0..n)
        .map(|p| ce(&tape, &sample_row(&tape, &logits, p), labels[p]))
        .collect();
    let loss = average(&tape, &terms);
    let loss_value = loss.value();
    tape.backward(&loss);
    state.opt_online.step(cfg.lr * sched);
    state.opt_online.zero_grads();
    ema_step(state);
    StepMetrics {
        step,
        loss_cls: loss_value,
        loss_gen: 0.0,
        loss_mask: 0.0,
        mask_mean: 0.0,
        mask_var: 0.0,
        beta: 0.0,
    }
}

/// The contrastive queue needs entries before any contrastive loss makes
/// sense; callers must run warmup steps until a quarter of the capacity is
/// filled.
#[derive(Debug)]
pub struct ColdQueueError {
    pub have: usize,
    pub need: usize,
}

impl std::fmt::Display for ColdQueueError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "negative queue holds {} of the {} required entries; run warmup steps (enqueue-only) until it is filled",
            self.have, self.need
        )
    }
}

impl std::error::Error for ColdQueueError {}

/// Stack a view batch into query and key image tensors.
pub fn batch_views(views: &[ViewPair]) -> (Tensor, Tensor) {
    assert!(!views.is_empty(), "batch_views: empty batch");
    let s = views[0].view_q.shape();
    let (h, w) = (s[1], s[2]);
    let mut q = Vec::with_capacity(views.len() * 3 * h * w);
    let mut k = Vec::with_capacity(views.len() * 3 * h * w);
    for v in views {
        q.extend_from_slice(&v.view_q.data());
        k.extend_from_slice(&v.view_k.data());
    }
    (
        Tensor::from_vec(&[views.len(), 3, h, w], q),
        Tensor::from_vec(&[views.len(), 3, h, w], k),
    )
}

/// Build augmented view pairs for a batch of dataset indices.
pub fn make_view_pairs(samples: &[Sample], indices: &[usize], rng: &mut dyn rand::RngCore) -> Vec<ViewPair> {
    indices
        .iter()
        .map(|&i| two_view(&samples[i], i, rng))
        .collect()
}

/// Enqueue momentum keys for a view batch without training anything.
pub fn ssl_warmup_step(state: &mut ModelState, views: &[ViewPair]) {
    let (_, batch_k) = batch_views(views);
    let tape = Tape::new();
    let out = state.momentum_encoder.forward(&tape, &batch_k, true);
    let z_k = state.momentum_heads.project(&tape, &out.embedding);
    let data = z_k.to_vec();
    let d = crate::encoder::PROJECT_DIM;
    for p in 0..views.len() {
        state.queue.push(&data[p * d..][..d], None);
    }
}

/// One contrastive training step on a batch of view pairs (cross-view:
/// mixed samples are built from key-view images and features, queried by
/// the online branch). Returns an error while the queue is cold.
pub fn train_step_ssl(
    state: &mut ModelState,
    views: &[ViewPair],
    cfg: &TrainConfig,
    variant: Variant,
    step: usize,
    sched: f64,
    beta: f64,
) -> Result<StepMetrics, ColdQueueError> {
    let need = state.queue.capacity() / 4;
    if state.queue.len() < need {
        return Err(ColdQueueError {
            have: state.queue.len(),
            need,
        });
    }
    let n = views.len();
    assert!(n >= 2, "contrastive step needs at least two samples");
    let (batch_q, batch_k) = batch_views(views);
    let t = cfg.temperature;

    let tape = Tape::new();
    // momentum pass over key views: features for the generator, keys for
    // the dictionary and the positives
    let out_k = state.momentum_encoder.forward(&tape, &batch_k, true);
    let z_k = state.momentum_heads.project(&tape, &out_k.embedding);
    let features = out_k.features;

    let pairs = pair_permutation(n, &mut state.rng);
    let lams_q: Vec<f64> = (0..n).map(|_| state.lambda_q.sample()).collect();
    let lams_k: Vec<f64> = (0..n).map(|_| state.lambda_k.sample()).collect();
    let negatives = state.queue.snapshot();

    // pseudo-labels from the momentum projections, for the cluster variant
    let pseudo = if variant == Variant::Cluster {
        if state.cluster.is_none() {
            assert!(
                n >= cfg.clusters,
                "cluster seeding needs a batch of at least {} samples",
                cfg.clusters
            );
            state.cluster = Some(ClusterState::init_from_batch(
                &z_k,
                cfg.clusters,
                state.dataset_len,
                &mut state.rng,
            ));
        }
        let indices: Vec<usize> = views.iter().map(|v| v.source_index).collect();
        let cluster = state.cluster.as_mut().expect("initialized above");
        Some(cluster.cluster_update(&z_k, &indices, &mut state.rng))
    } else {
        None
    };

    // ---- encoder objective: alignment plus mixed-query contrast
    let out_q = state.online_encoder.forward(&tape, &batch_q, true);
    let z_q = state.online_heads.project(&tape, &out_q.embedding);
    let xm_q = mixed_batch_detached(&tape, state, &batch_k, &features, &pairs, &lams_q, false);
    let out_mq = state.online_encoder.forward(&tape, &xm_q, true);
    let z_mq = state.online_heads.project(&tape, &out_mq.embedding);

    let mut cls_terms = Vec::with_capacity(n);
    for p in 0..n {
        let zq_row = sample_row(&tape, &z_q, p);
        let zk_row = sample_row(&tape, &z_k, p);
        let align = crate::losses::infonce_with_negatives(&tape, &zq_row, &zk_row, &negatives, t);
        let zm_row = sample_row(&tape, &z_mq, p);
        let zik = sample_row(&tape, &z_k, p);
        let zjk = sample_row(&tape, &z_k, pairs[p]);
        let mixed = mixup_infonce_with_negatives(&tape, &zm_row, &zik, &zjk, &negatives, lams_q[p], t);
        cls_terms.push(tape.add(&align, &mixed));
    }
    let loss_cls = average(&tape, &cls_terms);
    let loss_cls_value = loss_cls.value();
    tape.backward(&loss_cls);
    state.opt_online.step(cfg.lr * sched);
    state.opt_online.zero_grads();

    // ---- generator objective through the momentum networks
    let (xm_k, masks) = mixed_batch_live(&tape, state, &batch_k, &features, &pairs, &lams_k);
    let out_mk = state.momentum_encoder.forward(&tape, &xm_k, true);
    let mut gen_terms = Vec::with_capacity(n);
    let mut mask_terms = Vec::with_capacity(n);
    match variant {
        Variant::Instance => {
            let z_mk = state.momentum_heads.project(&tape, &out_mk.embedding);
            for p in 0..n {
                let zm_row = sample_row(&tape, &z_mk, p);
                let zik = sample_row(&tape, &z_k, p);
                let zjk = sample_row(&tape, &z_k, pairs[p]);
                let l_plus = bce_instance(&tape, &zm_row, &zik, &zjk, lams_k[p], t);
                let l_minus =
                    mixup_infonce_with_negatives(&tape, &zm_row, &zik, &zjk, &negatives, lams_k[p], t);
                gen_terms.push(eta_balanced(&tape, &l_plus, &l_minus, cfg.eta));
            }
        }
        Variant::Cluster => {
            let pl = pseudo.as_ref().expect("cluster labels computed above");
            let logits = state.online_heads.cluster_logits(&tape, &out_mk.embedding);
            for p in 0..n {
                let row = sample_row(&tape, &logits, p);
                let (a, b) = (pl[p], pl[pairs[p]]);
                let l_plus = local_class_term(&tape, &row, a, b, lams_k[p]);
                let l_minus = mixup_ce(&tape, &row, a, b, lams_k[p]);
                gen_terms.push(eta_balanced(&tape, &l_plus, &l_minus, cfg.eta));
            }
        }
    }
    for p in 0..n {
        mask_terms.push(mask_loss(&tape, &masks[p], lams_k[p], cfg.epsilon, beta, cfg.variance_sign));
    }
    let gen = average(&tape, &gen_terms);
    let maskl = average(&tape, &mask_terms);
    let total = tape.add(&gen, &maskl);
    let (gen_value, mask_value) = (gen.value(), maskl.value());
    tape.backward(&total);
    state.opt_mixer.step(cfg.mixer_lr * sched);
    state.opt_gamma.step(cfg.mixer_lr * cfg.gamma_lr_scale * sched);
    state.mixer.clamp_gamma();
    state.opt_mixer.zero_grads();
    state.opt_gamma.zero_grads();
    if variant == Variant::Cluster {
        state.opt_cluster.step(cfg.mixer_lr * sched);
        state.opt_cluster.zero_grads();
    }

    // ---- dictionary update and EMA
    let keys = z_k.to_vec();
    let d = crate::encoder::PROJECT_DIM;
    for p in 0..n {
        let label = pseudo.as_ref().map(|pl| pl[p]);
        state.queue.push(&keys[p * d..][..d], label);
    }
    ema_step(state);

    let mask_mean = masks.iter().map(|m| m.mean()).sum::<f64>() / n as f64;
    let mask_var = masks.iter().map(|m| m.spatial_variance()).sum::<f64>() / n as f64;
    Ok(StepMetrics {
        step,
        loss_cls: loss_cls_value,
        loss_gen: gen_value,
        loss_mask: mask_value,
        mask_mean,
        mask_var,
        beta,
    })
}

/// Save the generator parameters (and batchnorm buffers) to a checkpoint.
pub fn save_mixer(mixer: &Mixer, path: &Path) -> Result<(), CheckpointError> {
    save_state_table(path, &mixer.export_state())
}

/// Save encoder and heads together, names prefixed by component.
pub fn save_network(encoder: &Encoder, heads: &Heads, path: &Path) -> Result<(), CheckpointError> {
    let mut table = StateTable::new();
    for (name, shape, data) in encoder.export_state() {
        table.push((format!("encoder.{name}"), shape, data));
    }
    for (name, shape, data) in heads.export_state() {
        table.push((format!("heads.{name}"), shape, data));
    }
    save_state_table(path, &table)
}

/// Load a network checkpoint produced by [`save_network`], verifying every
/// tensor shape by name.
pub fn load_network(encoder: &Encoder, heads: &Heads, path: &Path) -> Result<(), CheckpointError> {
    let table = load_state_table(path)?;
    let strip = |prefix: &str| -> StateTable {
        table
            .iter()
            .filter_map(|(n, s, d)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), s.clone(), d.clone()))
            })
            .collect()
    };
    encoder.import_state(&strip("encoder."))?;
    heads.import_state(&strip("heads."))?;
    Ok(())
}

/// Load a generator checkpoint into a configured generator, verifying
/// every tensor shape by name.
pub fn load_mixer(mixer: &Mixer, path: &Path) -> Result<(), CheckpointError> {
    let table = load_state_table(path)?;
    mixer.import_state(&table)?;
    Ok(())
}

/// Embeddings of a sample list under the (frozen) encoder, eval mode.
pub fn embed_dataset(encoder: &Encoder, samples: &[Sample], batch_size: usize) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    tape.set_recording(false);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = batch_images(&refs);
        let enc = encoder.forward(&tape, &images, false);
        let emb = enc.embedding.to_vec();
        let d = enc.embedding.shape()[1];
        for p in 0..chunk.len() {
            out.push(emb[p * d..][..d].to_vec());
        }
    }
    out
}

/// Train a linear classifier on frozen feature vectors and report top-1
/// accuracy on the held-out set. SGD with momentum, step decays at 60% and
/// 80% of the run.
pub fn linear_probe(
    train: &[(Vec<f64>, usize)],
    test: &[(Vec<f64>, usize)],
    classes: usize,
    epochs: usize,
    seed: u64,
) -> f64 {
    assert!(!train.is_empty() && !test.is_empty(), "probe needs data on both splits");
    let dim = train[0].0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = crate::nn::kaiming_uniform(&[dim, classes], dim, &mut rng);
    let bias = Tensor::param(&[classes], vec![0.0; classes]);
    let mut opt = Sgd::new(vec![weight.clone(), bias.clone()], 0.9, 0.0);

    let base_lr = 0.1;
    let batch = 128.min(train.len());
    for epoch in 0..epochs {
        let lr = if epoch >= epochs * 4 / 5 {
            base_lr * 0.01
        } else if epoch >= epochs * 3 / 5 {
            base_lr * 0.1
        } else {
            base_lr
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let tape = Tape::new();
            let mut data = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                data.extend_from_slice(&train[i].0);
            }
            let x = Tensor::from_vec(&[chunk.len(), dim], data);
            let logits = tape.add(&tape.matmul(&x, &weight), &bias);
            let terms: Vec<Tensor> = chunk
                .iter()
                .enumerate()
                .map(|(row, &i)| ce(&tape, &sample_row(&tape, &logits, row), train[i].1))
                .collect();
            let loss = average(&tape, &terms);
            tape.backward(&loss);
            opt.step(lr);
            opt.zero_grads();
        }
    }

    let w = weight.to_vec();
    let b = bias.to_vec();
    let mut correct = 0usize;
    for (feat, label) in test {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..classes {
            let mut score = b[c];
            for (f, wv) in feat.iter().zip(w[c..].iter().step_by(classes)) {
                score += f * wv;
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == *label {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            queue_len: 16,
            clusters: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn grads_absent_or_zero(params: &[Tensor]) -> bool {
        params.iter().all(|p| match p.grad() {
            None => true,
            Some(g) => g.iter().all(|v| *v == 0.0),
        })
    }

    #[test]
    fn momentum_follows_ema_identity() {
        let cfg = small_cfg();
        let samples = synth_shapes(6, 3, 16, 5);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut state = ModelState::new(3, samples.len(), &cfg);

        // at initialization the momentum copy matches bit-exactly
        for (m, o) in state.momentum_param_pairs() {
            assert_eq!(m.to_vec(), o.to_vec());
        }

        let before: Vec<Vec<f64>> = state
            .momentum_param_pairs()
            .iter()
            .map(|(m, _)| m.to_vec())
            .collect();
        train_step_sl(&mut state, &refs, &cfg, 0, 1.0, cfg.beta0);
        let decay = cfg.momentum_decay;
        for ((m, o), prev) in state.momentum_param_pairs().iter().zip(&before) {
            let (mv, ov) = (m.to_vec(), o.to_vec());
            for ((m_now, o_now), p) in mv.iter().zip(&ov).zip(prev) {
                let expect = decay * p + (1.0 - decay) * o_now;
                assert!(
                    (m_now - expect).abs() < 1e-12,
                    "ema mismatch: {m_now} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn objectives_are_gradient_separated() {
        let cfg = small_cfg();
        let samples = synth_shapes(6, 3, 16, 6);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut state = ModelState::new(3, samples.len(), &cfg);
        let images = batch_images(&refs);
        let labels: Vec<usize> = samples.iter().map(|s| s.label.unwrap()).collect();

        let tape = Tape::new();
        let features = momentum_features(&tape, &state, &images);
        let pairs = pair_permutation(6, &mut state.rng);
        let lams: Vec<f64> = (0..6).map(|_| state.lambda_q.sample()).collect();

        let online_loss =
            sl_online_loss(&tape, &mut state, &images, &features, &labels, &pairs, &lams);
        tape.backward(&online_loss);
        assert!(
            grads_absent_or_zero(&state.mixer.params()),
            "online objective leaked gradient into the generator"
        );
        assert!(!grads_absent_or_zero(&state.online_encoder.params()));
        state.opt_online.zero_grads();

        let gen = sl_mixer_loss(
            &tape, &mut state, &images, &features, &labels, &pairs, &lams, 0.1, &cfg,
        );
        tape.backward(&gen.total);
        let mut online_all = state.online_encoder.params();
        online_all.extend(state.online_heads.params());
        assert!(
            grads_absent_or_zero(&online_all),
            "generator objective leaked gradient into the online networks"
        );
        assert!(!grads_absent_or_zero(&state.mixer.params()));
        // momentum networks never accumulate anything
        let mut momentum_all = state.momentum_encoder.params();
        momentum_all.extend(state.momentum_heads.all_params());
        assert!(grads_absent_or_zero(&momentum_all));
    }

    #[test]
    fn sl_training_is_deterministic() {
        let cfg = small_cfg();
        let samples = synth_shapes(12, 3, 16, 7);
        let run = || {
            let mut state = ModelState::new(3, samples.len(), &cfg);
            let mut lines = Vec::new();
            for step in 0..3 {
                let refs: Vec<&Sample> = samples[step * 4..step * 4 + 4].iter().collect();
                let m = train_step_sl(&mut state, &refs, &cfg, step, 1.0, cfg.beta0);
                lines.push(m.format_line());
            }
            lines
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretrained_step_leaves_generator_untouched() {
        let cfg = small_cfg();
        let samples = synth_shapes(6, 3, 16, 8);
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut state = ModelState::new(3, samples.len(), &cfg);
        let before: Vec<Vec<u64>> = state
            .mixer
            .export_state()
            .into_iter()
            .map(|(_, _, d)| d.iter().map(|v| v.to_bits()).collect())
            .collect();
        for step in 0..10 {
            train_step_pretrained(&mut state, &refs, &cfg, step, 1.0);
        }
        let after: Vec<Vec<u64>> = state
            .mixer
            .export_state()
            .into_iter()
            .map(|(_, _, d)| d.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "frozen generator changed during training");
    }

    #[test]
    fn ssl_cold_queue_is_an_error() {
        let cfg = small_cfg();
        let samples = synth_shapes(6, 3, 16, 9);
        let mut state = ModelState::new(3, samples.len(), &cfg);
        let views = make_view_pairs(&samples, &[0, 1, 2, 3, 4, 5], &mut ChaCha8Rng::seed_from_u64(1));
        let err = train_step_ssl(&mut state, &views, &cfg, Variant::Instance, 0, 1.0, 0.1)
            .expect_err("queue is cold");
        assert!(err.to_string().contains("warmup"));
    }

    #[test]
    fn ssl_steps_run_and_queue_stays_at_capacity() {
        let cfg = small_cfg();
        let samples = synth_shapes(12, 3, 16, 10);
        let mut state = ModelState::new(3, samples.len(), &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // warm the queue
        while state.queue.len() < state.queue.capacity() {
            let idx: Vec<usize> = (0..6).collect();
            let views = make_view_pairs(&samples, &idx, &mut rng);
            ssl_warmup_step(&mut state, &views);
        }
        assert_eq!(state.queue.len(), cfg.queue_len);
        for variant in [Variant::Instance, Variant::Cluster] {
            for step in 0..2 {
                let idx: Vec<usize> = (step * 6..step * 6 + 6).collect();
                let views = make_view_pairs(&samples, &idx, &mut rng);
                let m = train_step_ssl(&mut state, &views, &cfg, variant, step, 1.0, 0.05)
                    .expect("queue is warm");
                assert!(m.loss_cls.is_finite() && m.loss_gen.is_finite());
                assert_eq!(state.queue.len(), cfg.queue_len, "queue must stay at capacity");
            }
        }
        // cluster variant produced pseudo-labels
        assert!(state.cluster.is_some());
    }

    #[test]
    fn metrics_line_is_parseable() {
        let m = StepMetrics {
            step: 7,
            loss_cls: 1.25,
            loss_gen: 0.5,
            loss_mask: 0.01,
            mask_mean: 0.4,
            mask_var: 0.02,
            beta: 0.1,
        };
        let line = m.format_line();
        assert_eq!(
            line,
            "step=7 loss_cls=1.25 loss_gen=0.5 loss_mask=0.01 mask_mean=0.4 mask_var=0.02 beta=0.1"
        );
        for field in line.split(' ') {
            let (k, v) = field.split_once('=').expect("key=value fields");
            assert!(!k.is_empty() && v.parse::<f64>().is_ok());
        }
    }

    #[test]
    fn probe_reaches_perfect_accuracy_on_ideal_features() {
        // one-hot features by class are linearly separable
        let train: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| {
                let c = i % 4;
                let mut f = vec![0.0; 4];
                f[c] = 1.0;
                (f, c)
            })
            .collect();
        let test = train.clone();
        let acc = linear_probe(&train, &test, 4, 60, 0);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn mixer_checkpoint_round_trip_through_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixer.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::mixer::Mixer::new(8, 4, true, &mut rng);
        save_mixer(&a, &path).unwrap();
        let b = crate::mixer::Mixer::new(8, 4, true, &mut rng);
        load_mixer(&b, &path).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            let ba: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = pb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        // a generator with other dimensions refuses the file, naming
        // the offending tensor
        let narrow = crate::mixer::Mixer::new(8, 2, true, &mut rng);
        match load_mixer(&narrow, &path) {
            Err(CheckpointError::State(crate::mixer::StateError::ShapeMismatch { name, .. })) => {
                assert_eq!(name, "proj");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }
}
