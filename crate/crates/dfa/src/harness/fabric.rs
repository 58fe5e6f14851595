//! The simulated links between components: per-link loss, fixed
//! latency, and bounded reorder jitter. All randomness is seeded, so a
//! fabric configuration plus a seed is fully reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Debug)]
pub struct FabricConfig {
    /// Loss probability on the Reporter → Translator link.
    pub loss_reporter_translator: f64,
    /// Loss probability on the Translator → Collector link.
    pub loss_translator_collector: f64,
    /// Fixed per-hop latency.
    pub latency_ns: u64,
    /// Extra uniform delivery jitter in `[0, window]`, allowing frames
    /// to overtake each other.
    pub reorder_window_ns: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            loss_reporter_translator: 0.0,
            loss_translator_collector: 0.0,
            latency_ns: 0,
            reorder_window_ns: 0,
        }
    }
}

impl FabricConfig {
    pub fn lossless(&self) -> bool {
        self.loss_reporter_translator == 0.0 && self.loss_translator_collector == 0.0
    }
}

/// One direction of one link.
pub struct Link {
    loss: f64,
    latency_ns: u64,
    reorder_window_ns: u64,
    rng: ChaCha8Rng,
    pub drops: u64,
}

impl Link {
    pub fn new(loss: f64, latency_ns: u64, reorder_window_ns: u64, seed: u64) -> Self {
        Self { loss, latency_ns, reorder_window_ns, rng: ChaCha8Rng::seed_from_u64(seed), drops: 0 }
    }

    /// Admits a frame at `now`, returning its delivery time, or `None`
    /// when the link dropped it.
    pub fn admit(&mut self, now: u64) -> Option<u64> {
        if self.loss > 0.0 && self.rng.random_bool(self.loss) {
            self.drops += 1;
            return None;
        }
        let jitter = if self.reorder_window_ns > 0 {
            self.rng.random_range(0..=self.reorder_window_ns)
        } else {
            0
        };
        Some(now + self.latency_ns + jitter)
    }
}
