//! Seeded random streams.
//!
//! One root seed fans out into named child streams. Each child is the ChaCha8
//! keystream for the root key with the stream id set from a hash of the name,
//! so adding a new consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Factory for named child streams of one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStreams {
    root: u64,
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Stream for the `index`-th instance of a consumer, e.g. `("env", 3)`.
    pub fn indexed(&self, name: &str, index: u64) -> StreamRng {
        self.stream(&format!("{name}/{index}"))
    }
}

/// Serializable position of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// Packed as 7 little-endian u64 words: 4 seed words, stream, word_pos lo, hi.
    pub fn to_words(&self) -> [u64; 7] {
        let mut w = [0u64; 7];
        for (i, chunk) in self.seed.chunks(8).enumerate() {
            w[i] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        w[4] = self.stream;
        w[5] = self.word_pos as u64;
        w[6] = (self.word_pos >> 64) as u64;
        w
    }

    pub fn from_words(w: &[u64]) -> Option<Self> {
        if w.len() != 7 {
            return None;
        }
        let mut seed = [0u8; 32];
        for i in 0..4 {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w[i].to_le_bytes());
        }
        Some(Self { seed, stream: w[4], word_pos: u128::from(w[5]) | (u128::from(w[6]) << 64) })
    }
}
