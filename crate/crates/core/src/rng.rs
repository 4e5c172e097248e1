//! Deterministic random streams.
//!
//! Every noise draw in a run is a pure function of (master seed, stream
//! domain, stream index). Objective noise at step `s` can therefore be
//! reproduced without serializing generator state, which keeps checkpoint
//! resume and the variant-comparison invariants bitwise exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each (domain, index) pair owns an independent generator,
/// so adding or removing one consumer never shifts the draws of another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    ParamInit,
    DropoutLabeled,
    DropoutUnlabeled,
    DropoutStandalone,
    GaussNoise,
    GumbelNoise,
    ShuffleLabeled,
    ShuffleUnlabeled,
    SplitShuffle,
    Synth,
    Verify,
    EmbedInit,
    Harness,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::ParamInit => 0x01,
            Domain::DropoutLabeled => 0x02,
            Domain::DropoutUnlabeled => 0x03,
            Domain::DropoutStandalone => 0x04,
            Domain::GaussNoise => 0x05,
            Domain::GumbelNoise => 0x06,
            Domain::ShuffleLabeled => 0x07,
            Domain::ShuffleUnlabeled => 0x08,
            Domain::SplitShuffle => 0x09,
            Domain::Synth => 0x0a,
            Domain::Verify => 0x0b,
            Domain::EmbedInit => 0x0c,
            Domain::Harness => 0x0d,
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby (seed, domain, index) triples.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for stream (seed, domain, index).
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let a = mix(seed ^ mix(domain.tag()));
    let b = mix(a ^ mix(index));
    let c = mix(b.wrapping_add(seed));
    let d = mix(c.wrapping_add(index));
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Raw 64-bit key for stream (seed, domain, index). Used where a consumer
/// wants to carry a compact sub-seed instead of a generator.
pub fn derive(seed: u64, domain: Domain, index: u64) -> u64 {
    let a = mix(seed ^ mix(domain.tag()));
    mix(a ^ mix(index))
}

/// Stable hash for string-indexed streams (per-parameter init).
pub fn name_index(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible() {
        let a: Vec<u64> = stream(7, Domain::GaussNoise, 3).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u64> = stream(7, Domain::GaussNoise, 3).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ_across_domains_and_indices() {
        let a: u64 = stream(7, Domain::GaussNoise, 3).gen();
        let b: u64 = stream(7, Domain::GumbelNoise, 3).gen();
        let c: u64 = stream(7, Domain::GaussNoise, 4).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
