//! Named, seedable random streams.
//!
//! Every stochastic site draws from a stream derived from `(seed, label)`.
//! Streams are ChaCha8 keystreams, so the state is a key plus a word
//! position: it can be saved, restored and split without touching any
//! other stream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Well-known stream labels.
pub mod labels {
    pub const INIT: &str = "init";
    pub const SAMPLING: &str = "sampling";
    pub const CORRUPTION: &str = "corruption";
    pub const PLACEMENT: &str = "prompt-placement";
    pub const SCENES: &str = "scenes";
}

fn derive_key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"coda-stream\0");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    key
}

/// A labeled random stream.
#[derive(Clone, Debug)]
pub struct Stream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

/// Serializable position of a [`Stream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub label: String,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

impl Stream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(derive_key(seed, label)),
        }
    }

    /// A child stream whose label is `parent/child`.
    pub fn split(&self, child: &str) -> Stream {
        Stream::new(self.seed, &format!("{}/{}", self.label, child))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            label: self.label.clone(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &StreamState) -> Option<Self> {
        let pos: u128 = state.word_pos.parse().ok()?;
        let mut s = Stream::new(state.seed, &state.label);
        s.rng.set_word_pos(pos);
        Some(s)
    }

    pub fn uniform(&mut self) -> f32 {
        self.rng.random::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f32 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}
