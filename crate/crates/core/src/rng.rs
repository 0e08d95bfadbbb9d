//! Counter-based random streams.
//!
//! A stream is a ChaCha8 keystream addressed by a 256-bit key. Child streams
//! derive their key from the parent *key* and a child id only, so the stream
//! handed to replica `r` is the same no matter how much randomness the parent
//! has consumed or which worker thread runs the replica.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    key: [u64; 4],
    gen: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        let mut key = [0u64; 4];
        for (j, k) in key.iter_mut().enumerate() {
            *k = mix64(seed.wrapping_add(GOLDEN.wrapping_mul(j as u64 + 1)));
        }
        Self::from_key(key)
    }

    fn from_key(key: [u64; 4]) -> Self {
        let mut bytes = [0u8; 32];
        for (chunk, k) in bytes.chunks_exact_mut(8).zip(key.iter()) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        Self {
            key,
            gen: ChaCha8Rng::from_seed(bytes),
        }
    }

    /// Independent child stream. Depends only on this stream's key and `child`.
    pub fn split(&self, child: u64) -> Self {
        let salt = mix64(child ^ GOLDEN);
        let key = std::array::from_fn(|j| {
            let lane = mix64(salt.wrapping_add(GOLDEN.wrapping_mul(j as u64 + 1)));
            mix64(self.key[j] ^ lane ^ self.key[(j + 1) % 4].rotate_left(17))
        });
        Self::from_key(key)
    }

    /// Child stream addressed by a sequence of words (e.g. the bits of a state).
    pub fn split_path(&self, words: &[u64]) -> Self {
        let mut acc = mix64(words.len() as u64 ^ GOLDEN);
        for w in words {
            acc = mix64(acc ^ w.rotate_left(23)).wrapping_add(GOLDEN);
        }
        self.split(acc)
    }

    /// 64-bit token identifying the stream (not its position).
    pub fn fingerprint(&self) -> u64 {
        mix64(self.key[0] ^ self.key[1].rotate_left(13) ^ self.key[2].rotate_left(29) ^ self.key[3])
    }

    pub fn next_u64(&mut self) -> u64 {
        self.gen.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on (0, 1].
    pub fn uniform_pos(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential with the given rate, by inversion.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform_pos().ln() / rate
    }

    /// Index drawn from a cumulative weight table whose last entry is the total.
    pub fn categorical(&mut self, cumulative: &[f64]) -> usize {
        let total = *cumulative.last().expect("nonempty cumulative table");
        let u = self.uniform() * total;
        let idx = cumulative.partition_point(|&c| c <= u);
        idx.min(cumulative.len() - 1)
    }
}

/// Stream purposes; each top-level consumer splits the root by one of these.
pub mod purpose {
    pub const SIMULATE: u64 = 1;
    pub const MEAN: u64 = 2;
    pub const MU_STAR: u64 = 3;
    pub const CORRECTOR: u64 = 4;
    pub const SIGMA2: u64 = 5;
    pub const QV: u64 = 6;
    pub const CLT: u64 = 7;
    pub const CHECK: u64 = 8;
    pub const ERGODICITY: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
    pub const RADIUS: u64 = 11;
}
