//! Counter-based stream derivation.
//!
//! Every random quantity in a simulation is drawn from its own stream, keyed
//! by `(master seed, purpose, round, client, step)`. Streams never depend on
//! the order in which they are requested, so draws are reproducible whatever
//! the evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Covariates = 1,
    Features = 2,
    Labels = 3,
    Enroll = 4,
    Preround = 5,
    Participate = 6,
    LocalSgd = 7,
    Moments = 8,
    Replication = 9,
    Sweep = 10,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a single 64-bit key.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(GOLDEN, |acc, &w| {
        mix64(acc.wrapping_add(GOLDEN) ^ mix64(w.wrapping_add(GOLDEN)))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
    pub client: u64,
    pub step: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            purpose,
            round: 0,
            client: 0,
            step: 0,
        }
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u64;
        self
    }

    pub fn client(mut self, client: usize) -> Self {
        self.client = client as u64;
        self
    }

    pub fn step(mut self, step: usize) -> Self {
        self.step = step as u64;
        self
    }

    pub fn digest(&self) -> u64 {
        hash_words(&[
            self.seed,
            self.purpose as u64,
            self.round,
            self.client,
            self.step,
        ])
    }

    pub fn rng(&self) -> StreamRng {
        let d = self.digest();
        let mut seed = [0u8; 32];
        for (i, chunk) in seed.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&mix64(d ^ (i as u64).wrapping_mul(GOLDEN)).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Derives a child seed, e.g. per replication or sweep point.
pub fn derive_seed(master: u64, purpose: Purpose, index: u64) -> u64 {
    hash_words(&[master, purpose as u64, index])
}
