//! Labelled, reproducible random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the 64-bit seed, with the
//! ChaCha stream id derived from the label. Two streams with the same
//! `(seed, label)` produce the same draws on every platform; different
//! labels give independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self { seed, label: label.into() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Child stream `label/child` under the same seed.
    pub fn substream(&self, child: impl AsRef<str>) -> Self {
        Self { seed: self.seed, label: format!("{}/{}", self.label, child.as_ref()) }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(self.label.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
