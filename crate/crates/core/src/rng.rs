//! Named, seeded random streams.
//!
//! Each stream is a ChaCha12 generator keyed by `(master_seed, stream_id)`,
//! so consuming one stream never perturbs another and stream creation order
//! does not matter.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

/// Recorded in run metadata so reports identify the generator.
pub const GENERATOR_ID: &str = "chacha12/fnv1a64+splitmix64-key";

pub struct RngStream {
    master_seed: u64,
    stream_id: String,
    rng: ChaCha12Rng,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(master_seed: u64, stream_id: &str) -> [u8; 32] {
    let mut state = master_seed ^ fnv1a64(stream_id.as_bytes()).rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: impl Into<String>) -> Self {
        let stream_id = stream_id.into();
        let rng = ChaCha12Rng::from_seed(derive_key(master_seed, &stream_id));
        RngStream {
            master_seed,
            stream_id,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.uniform() < p
    }

    /// Normal draw; `sigma == 0` returns `mean` without consuming state.
    pub fn gaussian(&mut self, mean: f64, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return mean;
        }
        Normal::new(mean, sigma)
            .expect("finite sigma")
            .sample(&mut self.rng)
    }

    /// Normal draw clipped to `mean ± k·sigma`.
    pub fn truncated_gaussian(&mut self, mean: f64, sigma: f64, k: f64) -> f64 {
        let x = self.gaussian(mean, sigma);
        x.clamp(mean - k * sigma, mean + k * sigma)
    }
}

impl std::fmt::Debug for RngStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RngStream")
            .field("master_seed", &self.master_seed)
            .field("stream_id", &self.stream_id)
            .finish_non_exhaustive()
    }
}
