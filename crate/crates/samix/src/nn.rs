//! Layers, initialization, and the SGD optimizer used by every network here.

use std::cell::RefCell;

use rand::Rng;

use crate::tensor::{BnStats, Tape, Tensor};

/// Kaiming-uniform draw: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn rand::RngCore) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(shape, data)
}

/// 3x3 convolution layer, stride 1, pad 1, no bias (a batchnorm follows).
pub struct Conv3x3 {
    pub weight: Tensor,
}

impl Conv3x3 {
    pub fn new(c_in: usize, c_out: usize, rng: &mut dyn rand::RngCore) -> Conv3x3 {
        Conv3x3 {
            weight: kaiming_uniform(&[c_out, c_in, 3, 3], c_in * 9, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        tape.conv3x3(x, &self.weight)
    }
}

/// Batch normalization layer owning its running statistics.
/// Cloning shares the parameter storage but snapshots the statistics.
#[derive(Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: RefCell<BnStats>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::param(&[channels], vec![1.0; channels]),
            beta: Tensor::param(&[channels], vec![0.0; channels]),
            stats: RefCell::new(BnStats::new(channels)),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> Tensor {
        tape.batchnorm(x, &self.gamma, &self.beta, &mut self.stats.borrow_mut(), training)
    }
}

/// Fully connected layer. Weight is stored `[in, out]` so the forward pass
/// is a plain `x @ w + b` on `[n, in]` batches.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut dyn rand::RngCore) -> Linear {
        Linear {
            weight: kaiming_uniform(&[d_in, d_out], d_in, rng),
            bias: Tensor::param(&[d_out], vec![0.0; d_out]),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        tape.add(&tape.matmul(x, &self.weight), &self.bias)
    }
}

/// Classical SGD: `v <- momentum * v + grad + weight_decay * param`,
/// `param <- param - lr * v`. Nesterov off. Parameters whose gradient is
/// absent this step are left untouched.
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<Vec<f64>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f64, weight_decay: f64) -> Sgd {
        let velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Sgd {
            params,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step(&mut self, lr: f64) {
        for (param, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(grad) = param.grad() else { continue };
            param.update_data(|data| {
                for ((w, v), g) in data.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                    *v = self.momentum * *v + g + self.weight_decay * *w;
                    *w -= lr * *v;
                }
            });
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Cosine learning-rate schedule with a linear warmup prefix.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize, warmup_frac: f64) -> f64 {
    assert!(total_steps > 0, "cosine_lr: zero-length schedule");
    let warmup = ((total_steps as f64) * warmup_frac).floor() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}
