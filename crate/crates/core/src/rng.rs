//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed from a 64-bit seed, so a run is
//! reproducible from its seed alone and identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from a seed and a sequence of labels.
pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    let key = labels.iter().fold(mix(seed), |acc, l| mix(acc ^ mix(*l)));
    ChaCha8Rng::seed_from_u64(key)
}

/// Stable 64-bit label for a string (FNV-1a).
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(0, &[1, 2]).random();
        let b: u64 = stream(0, &[1, 2]).random();
        let c: u64 = stream(0, &[2, 1]).random();
        let d: u64 = stream(1, &[1, 2]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
