//! Scratch driver for eyeballing training dynamics at desk scale:
//! loss trajectories, gamma and its gradient, mask statistics, and the
//! lambda response curve. Not part of the test suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use samix::data::{batch_images, synth_shapes, Sample};
use samix::encoder::sample_features;
use samix::losses::beta_schedule;
use samix::pipeline::{
    ema_step, epoch_batches, momentum_features, pair_permutation, schedule_at, sl_mixer_loss,
    sl_online_loss, ModelState, TrainConfig,
};
use samix::tensor::Tape;

fn lambda_curve(state: &ModelState, samples: &[Sample], pairs: usize) -> (Vec<f64>, f64) {
    let tape = Tape::new();
    tape.set_recording(false);
    let refs: Vec<&Sample> = samples.iter().take(2 * pairs).collect();
    let images = batch_images(&refs);
    let features = momentum_features(&tape, state, &images);
    let lambdas: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let mut curve = vec![0.0; lambdas.len()];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    for p in 0..pairs {
        let zi = sample_features(&tape, &features, 2 * p);
        let zj = sample_features(&tape, &features, 2 * p + 1);
        for (k, &lam) in lambdas.iter().enumerate() {
            let mask = state
                .mixer
                .generate_mask(&tape, &zi, &zj, lam, (32, 32), false, &mut rng);
            curve[k] += mask.mean() / pairs as f64;
            xs.push(lam);
            ys.push(mask.mean());
        }
    }
    (curve, pearson(&xs, &ys))
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt()).max(1e-12)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let mixer_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let gamma_scale: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(20.0);

    let cfg = TrainConfig {
        mixer_lr,
        gamma_lr_scale: gamma_scale,
        epochs,
        ..TrainConfig::default()
    };
    let samples = synth_shapes(n, 4, 32, 42);
    let mut state = ModelState::new(4, samples.len(), &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let steps_per_epoch = n / cfg.batch_size;
    let total = steps_per_epoch * epochs;
    let mut step = 0;
    let t0 = std::time::Instant::now();
    for epoch in 0..epochs {
        let mut cls_sum = 0.0;
        let mut gen_sum = 0.0;
        let mut gamma_grad_abs = 0.0;
        let mut count = 0;
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            let refs: Vec<&Sample> = batch.iter().map(|i| &samples[*i]).collect();
            let sched = schedule_at(step, total);
            let beta = beta_schedule(step, total, cfg.beta0);

            // manual step so the gamma gradient is observable
            let bn = refs.len();
            let images = batch_images(&refs);
            let labels: Vec<usize> = refs.iter().map(|s| s.label.unwrap()).collect();
            let tape = Tape::new();
            let features = momentum_features(&tape, &state, &images);
            let pairs = pair_permutation(bn, &mut state.rng);
            let lams_q: Vec<f64> = (0..bn).map(|_| state.lambda_q.sample()).collect();
            let lams_k: Vec<f64> = (0..bn).map(|_| state.lambda_k.sample()).collect();

            let loss_cls =
                sl_online_loss(&tape, &mut state, &images, &features, &labels, &pairs, &lams_q);
            cls_sum += loss_cls.value();
            tape.backward(&loss_cls);
            state.opt_online.step(cfg.lr * sched);
            state.opt_online.zero_grads();

            let gen = sl_mixer_loss(
                &tape, &mut state, &images, &features, &labels, &pairs, &lams_k, beta, &cfg,
            );
            gen_sum += gen.gen_value;
            tape.backward(&gen.total);
            gamma_grad_abs += state
                .mixer
                .gamma
                .grad()
                .map(|g| g[0].abs())
                .unwrap_or(0.0);
            state.opt_mixer.step(cfg.mixer_lr * sched);
            state.opt_gamma.step(cfg.mixer_lr * cfg.gamma_lr_scale * sched);
            state.mixer.clamp_gamma();
            state.opt_mixer.zero_grads();
            state.opt_gamma.zero_grads();
            ema_step(&state);

            count += 1;
            step += 1;
        }
        let (curve, corr) = lambda_curve(&state, &samples, 20);
        let c = count as f64;
        println!(
            "epoch {epoch}: cls {:.4} gen {:.4} gamma {:.4} |dgamma| {:.5} corr {:+.3} curve {} ({:.0}s)",
            cls_sum / c,
            gen_sum / c,
            state.mixer.gamma.value(),
            gamma_grad_abs / c,
            corr,
            curve
                .iter()
                .map(|v| format!("{v:.2}"))
                .collect::<Vec<_>>()
                .join(","),
            t0.elapsed().as_secs_f64()
        );
    }
}
