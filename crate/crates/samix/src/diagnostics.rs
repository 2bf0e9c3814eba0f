//! Gradient diagnostics: one finite-difference check per op kind and per
//! end-to-end loss path. The CLI surfaces this as a command; the acceptance
//! suite runs it as criterion coverage. A fault name can be injected to
//! prove the driver notices a corrupted backward rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, Heads};
use crate::losses::{bce_instance, eta_balanced, mask_loss, mixup_ce, mixup_infonce, pbce, NegativeQueue};
use crate::mixer::{mix_inputs, Mixer};
use crate::tensor::{gradcheck_with_fault, BnStats, Tape, Tensor, OP_KINDS};

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

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

fn check(
    name: &str,
    fault: Option<&str>,
    probes: &[Tensor],
    f: impl Fn(&Tape, &Tensor) -> Tensor,
) -> OpCheck {
    let mut worst: f64 = 0.0;
    for probe in probes {
        let err = gradcheck_with_fault(&f, probe, STEP, fault).unwrap_or(f64::INFINITY);
        worst = worst.max(err);
    }
    OpCheck {
        name: name.to_string(),
        max_rel_err: worst,
        pass: worst < GRAD_TOLERANCE,
    }
}

/// One finite-difference check per op kind, in [`OP_KINDS`] order.
pub fn op_gradient_suite(fault: Option<&str>) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0D15EA5E);
    let probes = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| -> Vec<Tensor> {
        (0..3)
            .map(|_| {
                let n = shape.iter().product();
                Tensor::from_vec(shape, rand_vec(rng, n, lo, hi))
            })
            .collect()
    };
    let offzero = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Vec<Tensor> {
        (0..3)
            .map(|_| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        let mag = rng.gen_range(0.05..1.0);
                        if rng.gen::<bool>() {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                Tensor::from_vec(shape, data)
            })
            .collect()
    };

    let w34 = Tensor::from_vec(&[3, 4], rand_vec(&mut rng, 12, -1.0, 1.0));
    let c24 = Tensor::from_vec(&[2, 4], rand_vec(&mut rng, 8, -1.0, 1.0));
    let c23 = Tensor::from_vec(&[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0));
    let c32 = Tensor::from_vec(&[3, 2], rand_vec(&mut rng, 6, -1.0, 1.0));
    let w1 = Tensor::from_vec(&[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0));
    let b1 = Tensor::param(&[2], rand_vec(&mut rng, 2, -0.5, 0.5));
    let c25 = Tensor::from_vec(&[2, 5], rand_vec(&mut rng, 10, -1.0, 1.0));
    let k33 = Tensor::from_vec(&[2, 2, 3, 3], rand_vec(&mut rng, 36, -0.5, 0.5));
    let c4d = Tensor::from_vec(&[1, 2, 4, 4], rand_vec(&mut rng, 32, -1.0, 1.0));
    let gamma = Tensor::param(&[2], vec![1.3, 0.7]);
    let beta = Tensor::param(&[2], vec![0.1, -0.2]);
    let cbn = Tensor::from_vec(&[3, 2, 2, 1], rand_vec(&mut rng, 12, -1.0, 1.0));
    let c6 = Tensor::from_vec(&[6], rand_vec(&mut rng, 6, -1.0, 1.0));
    let c44 = Tensor::from_vec(&[4, 4], rand_vec(&mut rng, 16, -1.0, 1.0));
    let cp = Tensor::from_vec(&[1, 2, 2, 2], rand_vec(&mut rng, 8, -1.0, 1.0));
    let cg = Tensor::from_vec(&[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0));
    let b6 = Tensor::param(&[6], rand_vec(&mut rng, 6, -1.0, 1.0));
    let other = Tensor::param(&[2, 2], rand_vec(&mut rng, 4, -1.0, 1.0));
    let ccat = Tensor::from_vec(&[2, 5], rand_vec(&mut rng, 10, -1.0, 1.0));
    let crows = Tensor::from_vec(&[2, 3], rand_vec(&mut rng, 6, -1.0, 1.0));
    let s1 = Tensor::param(&[1], vec![0.8]);

    let mut out = Vec::new();
    for &kind in OP_KINDS {
        let report = match kind {
            "matmul" => check(kind, fault, &probes(&mut rng, &[2, 3], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.matmul(x, &w34), &c24))
            }),
            "transpose" => check(kind, fault, &probes(&mut rng, &[2, 3], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.transpose(x), &c32))
            }),
            "conv1x1" => check(kind, fault, &probes(&mut rng, &[3, 5], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.conv1x1(x, &w1, Some(&b1)), &c25))
            }),
            "conv3x3" => check(
                kind,
                fault,
                &probes(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
                |t, x| t.sum_all(&t.mul(&t.conv3x3(x, &k33), &c4d)),
            ),
            "batchnorm" => check(
                kind,
                fault,
                &probes(&mut rng, &[3, 2, 2, 1], -1.0, 1.0),
                |t, x| {
                    let mut train_stats = BnStats::new(2);
                    let train = t.batchnorm(x, &gamma, &beta, &mut train_stats, true);
                    let mut eval_stats = BnStats::new(2);
                    eval_stats.running_mean = vec![0.2, -0.1];
                    eval_stats.running_var = vec![1.5, 0.8];
                    let eval = t.batchnorm(x, &gamma, &beta, &mut eval_stats, false);
                    t.sum_all(&t.mul(&t.add(&train, &eval), &cbn))
                },
            ),
            "relu" => check(kind, fault, &offzero(&mut rng, &[6]), |t, x| {
                t.sum_all(&t.mul(&t.relu(x), &c6))
            }),
            "sigmoid" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.sigmoid(x), &c6))
            }),
            "softmax" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.softmax(x), &c6))
            }),
            "dropout" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                let mut drng = ChaCha8Rng::seed_from_u64(5);
                t.sum_all(&t.mul(&t.dropout(x, 0.3, true, &mut drng), &c6))
            }),
            "bilinear_upsample" => check(kind, fault, &probes(&mut rng, &[2, 2], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.bilinear_upsample(x, (4, 4)), &c44))
            }),
            "avg_pool2" => check(
                kind,
                fault,
                &probes(&mut rng, &[1, 2, 4, 4], -1.0, 1.0),
                |t, x| t.sum_all(&t.mul(&t.avg_pool2(x), &cp)),
            ),
            "global_avg_pool" => check(
                kind,
                fault,
                &probes(&mut rng, &[2, 3, 2, 2], -1.0, 1.0),
                |t, x| t.sum_all(&t.mul(&t.global_avg_pool(x), &cg)),
            ),
            "add" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.add(x, &b6), &c6))
            }),
            "add_scalar" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.add_scalar(x, 0.7), &c6))
            }),
            "sub" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.sub(x, &b6), &c6))
            }),
            "mul" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.mul(x, &s1), &c6))
            }),
            "scale" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.scale(x, -2.5), &c6))
            }),
            "concat" => check(kind, fault, &probes(&mut rng, &[2, 3], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.concat(&[x, &other], 1), &ccat))
            }),
            "slice_rows" => check(kind, fault, &probes(&mut rng, &[4, 3], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.slice_rows(x, 1, 3), &crows))
            }),
            "reshape" => check(kind, fault, &probes(&mut rng, &[2, 3], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.reshape(x, &[6]), &c6))
            }),
            "sum" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(x)
            }),
            "mean" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.mean_all(x)
            }),
            "log" => check(kind, fault, &probes(&mut rng, &[6], 0.5, 2.0), |t, x| {
                t.sum_all(&t.mul(&t.log(x), &c6))
            }),
            "exp" => check(kind, fault, &probes(&mut rng, &[6], -1.0, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.exp(x), &c6))
            }),
            "l2_normalize" => check(kind, fault, &probes(&mut rng, &[2, 3], 0.2, 1.0), |t, x| {
                t.sum_all(&t.mul(&t.l2_normalize(x), &c23))
            }),
            other => unreachable!("no fixture for op kind {other}"),
        };
        out.push(report);
    }
    out
}

struct PathFixture {
    mixer: Mixer,
    encoder: Encoder,
    heads: Heads,
    x_i: Tensor,
    x_j: Tensor,
    z_j: Tensor,
}

fn path_fixture() -> PathFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEED);
    let mixer = Mixer::new(8, 4, true, &mut rng);
    mixer.gamma.update_data(|g| g[0] = 0.5);
    let encoder = Encoder::new(&mut rng);
    let heads = Heads::new(4, 4, &mut rng);
    PathFixture {
        mixer,
        encoder,
        heads,
        x_i: Tensor::from_vec(&[3, 16, 16], rand_vec(&mut rng, 768, 0.0, 1.0)),
        x_j: Tensor::from_vec(&[3, 16, 16], rand_vec(&mut rng, 768, 0.0, 1.0)),
        z_j: Tensor::from_vec(&[8, 2, 2], rand_vec(&mut rng, 32, -1.0, 1.0)),
    }
}

/// Finite-difference checks of the three end-to-end loss paths, probing
/// the generator-feature input of each (the full chain: ratio encoding,
/// attention, content head, sigmoid, upsampling, mixing, the encoder
/// stack, and the loss on top).
pub fn path_gradient_suite(fault: Option<&str>) -> Vec<OpCheck> {
    let fx = path_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let probe = vec![Tensor::from_vec(&[8, 2, 2], rand_vec(&mut rng, 32, -1.0, 1.0))];

    let sl = check("path:class_generation_loss", fault, &probe, |t, z_i| {
        let mask = fx.mixer.generate_mask(t, z_i, &fx.z_j, 0.3, (16, 16), false, &mut ChaCha8Rng::seed_from_u64(1));
        let xm = mix_inputs(t, &fx.x_i, &fx.x_j, &mask);
        let out = fx.encoder.forward(t, &t.reshape(&xm, &[1, 3, 16, 16]), false);
        let logits = t.reshape(&fx.heads.classify(t, &out.embedding), &[4]);
        let l_plus = pbce(t, &logits, 0, 2, 0.3);
        let l_minus = mixup_ce(t, &logits, 0, 2, 0.3);
        eta_balanced(t, &l_plus, &l_minus, 0.5)
    });

    let mut qrng = ChaCha8Rng::seed_from_u64(0xACE);
    let mut queue = NegativeQueue::new(6, crate::encoder::PROJECT_DIM);
    for _ in 0..6 {
        queue.push(&unit_vec(&mut qrng, crate::encoder::PROJECT_DIM), None);
    }
    let z_i_k = Tensor::from_vec(
        &[crate::encoder::PROJECT_DIM],
        unit_vec(&mut qrng, crate::encoder::PROJECT_DIM),
    );
    let z_j_k = Tensor::from_vec(
        &[crate::encoder::PROJECT_DIM],
        unit_vec(&mut qrng, crate::encoder::PROJECT_DIM),
    );
    let ssl = check("path:instance_generation_loss", fault, &probe, |t, z_i| {
        let mask = fx.mixer.generate_mask(t, z_i, &fx.z_j, 0.6, (16, 16), false, &mut ChaCha8Rng::seed_from_u64(2));
        let xm = mix_inputs(t, &fx.x_i, &fx.x_j, &mask);
        let out = fx.encoder.forward(t, &t.reshape(&xm, &[1, 3, 16, 16]), false);
        let z_m = t.reshape(&fx.heads.project(t, &out.embedding), &[crate::encoder::PROJECT_DIM]);
        let l_plus = bce_instance(t, &z_m, &z_i_k, &z_j_k, 0.6, 0.2);
        let l_minus = mixup_infonce(t, &z_m, &z_i_k, &z_j_k, &queue, 0.6, 0.2);
        eta_balanced(t, &l_plus, &l_minus, 0.5)
    });

    let mask_prior = check("path:mask_prior_loss", fault, &probe, |t, z_i| {
        let mask = fx.mixer.generate_mask(t, z_i, &fx.z_j, 0.4, (16, 16), false, &mut ChaCha8Rng::seed_from_u64(3));
        mask_loss(t, &mask, 0.4, 0.1, 0.1, -1.0)
    });

    vec![sl, ssl, mask_prior]
}

/// The whole report: every op kind once, then the three loss paths.
pub fn full_gradient_report(fault: Option<&str>) -> Vec<OpCheck> {
    let mut all = op_gradient_suite(fault);
    all.extend(path_gradient_suite(fault));
    all
}
