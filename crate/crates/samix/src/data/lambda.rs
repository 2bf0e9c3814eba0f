//! Beta(alpha, alpha) mixing-ratio sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Draws mixing ratios from Beta(alpha, alpha) as the ratio of two
/// Gamma(alpha, 1) variates, X / (X + Y). The Gamma sampler is
/// Marsaglia-Tsang squeeze sampling (with the boost transform below
/// alpha = 1), so draws stay exact for any alpha > 0.
pub struct LambdaSampler {
    pub alpha: f64,
    gamma: Gamma<f64>,
    rng: ChaCha8Rng,
}

impl LambdaSampler {
    pub fn new(alpha: f64, seed: u64) -> LambdaSampler {
        assert!(alpha > 0.0, "lambda sampler: alpha {alpha} must be positive");
        LambdaSampler {
            alpha,
            gamma: Gamma::new(alpha, 1.0).expect("alpha validated above"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One draw in the open interval (0, 1).
    pub fn sample(&mut self) -> f64 {
        loop {
            let x = self.gamma.sample(&mut self.rng);
            let y = self.gamma.sample(&mut self.rng);
            let lam = x / (x + y);
            if lam > 0.0 && lam < 1.0 && lam.is_finite() {
                return lam;
            }
            // underflowed draw (possible at tiny alpha); redraw
        }
    }
}
