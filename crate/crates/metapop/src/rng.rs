//! Reproducible random number streams.
//!
//! Every stochastic routine in the crate draws from an [`RngStream`]:
//! ChaCha8 keyed by a user seed, with the ChaCha stream id used to split
//! one seed into arbitrarily many statistically independent substreams.
//! Replica `r` of an experiment always uses substream `r`, so results are
//! identical whatever the worker count or scheduling order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a seed (substream 0).
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Independent substream `stream` of the same seed.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { rng }
    }

    /// Uniform draw on (0, 1]; never returns 0 so `ln` is always finite.
    pub fn uniform(&mut self) -> f64 {
        1.0 - self.rng.gen::<f64>()
    }

    /// Exponential holding time with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0, "exponential rate must be positive");
        -self.uniform().ln() / rate
    }

    /// Index into `weights` drawn proportionally to the (nonnegative)
    /// weights, whose sum is passed in by the caller. Falls back to the
    /// last positive weight under floating-point shortfall.
    pub fn choose_weighted(&mut self, weights: &[f64], total: f64) -> usize {
        debug_assert!(total > 0.0);
        let mut target = self.rng.gen::<f64>() * total;
        let mut last_positive = 0;
        for (k, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = k;
                if target < w {
                    return k;
                }
                target -= w;
            }
        }
        last_positive
    }

    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.rng.gen::<f64>() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn gen_index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}
