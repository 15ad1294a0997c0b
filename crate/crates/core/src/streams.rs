//! Deterministic random-stream derivation.
//!
//! Every random stream in a run is keyed by `(master_seed, role tag, indices)`.
//! The key is folded into a 64-bit seed with a splitmix64 absorb:
//!
//! ```text
//! h = splitmix64(master_seed)
//! for each byte-chunk word t of the tag, then each index i:
//!     h = splitmix64(h ^ word)
//! ```
//!
//! Tag bytes are packed little-endian into 8-byte words (zero padded) and the
//! tag length is absorbed last, so `"client"` and `"client\0"` differ. The
//! resulting seed initialises a ChaCha8 generator. Because streams depend only
//! on indices, results do not depend on thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ElfError, Result};

pub type Stream = ChaCha8Rng;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for the stream `(master, tag, indices)`.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for chunk in tag.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = splitmix64(h ^ u64::from_le_bytes(word));
    }
    h = splitmix64(h ^ tag.len() as u64);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(master: u64, tag: &str, indices: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}

#[inline]
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Stream factory for one chain of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainSeeds {
    pub master: u64,
    pub chain: u64,
}

impl ChainSeeds {
    pub fn new(master: u64, chain: u64) -> Self {
        Self { master, chain }
    }

    pub fn init(&self) -> Stream {
        stream(self.master, "init", &[self.chain])
    }

    pub fn noise(&self) -> Stream {
        stream(self.master, "noise", &[self.chain])
    }

    /// Compressor randomness of client `client` in round `round`.
    pub fn client(&self, client: usize, round: usize) -> Stream {
        stream(
            self.master,
            "client",
            &[self.chain, client as u64, round as u64],
        )
    }

    /// Server-side (downlink) compressor randomness in round `round`.
    pub fn server(&self, round: usize) -> Stream {
        stream(self.master, "server", &[self.chain, round as u64])
    }
}

/// Source of the Gaussian increments `Z_k`.
///
/// `Scripted` replays fixed vectors (one per round) and is meant for hand
/// traces; `Zero` turns the chain into plain (compressed) gradient descent.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    Gaussian(Stream),
    Zero,
    Scripted { draws: Vec<Vec<f64>>, next: usize },
}

impl NoiseSource {
    pub fn gaussian(seeds: &ChainSeeds) -> Self {
        NoiseSource::Gaussian(seeds.noise())
    }

    pub fn scripted(draws: Vec<Vec<f64>>) -> Self {
        NoiseSource::Scripted { draws, next: 0 }
    }

    /// Fills `out` with the next draw. `round` is only used for diagnostics.
    pub fn fill(&mut self, out: &mut [f64], round: usize) -> Result<()> {
        match self {
            NoiseSource::Gaussian(rng) => {
                for z in out.iter_mut() {
                    *z = standard_normal(rng);
                }
            }
            NoiseSource::Zero => out.fill(0.0),
            NoiseSource::Scripted { draws, next } => {
                let draw = draws.get(*next).ok_or(ElfError::NoiseExhausted(round))?;
                if draw.len() != out.len() {
                    return Err(ElfError::DimensionMismatch {
                        expected: out.len(),
                        got: draw.len(),
                    });
                }
                out.copy_from_slice(draw);
                *next += 1;
            }
        }
        Ok(())
    }
}
