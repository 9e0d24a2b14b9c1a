//! Seed derivation for reproducible, chunk-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`.
///
/// Each distinct triple gets its own ChaCha key, so work split into
/// replicates or Monte Carlo chunks draws the same numbers no matter how
/// the pieces are scheduled.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed ^ splitmix64(purpose.wrapping_mul(0xA24B_AED4_963E_E407)));
    state = splitmix64(state ^ splitmix64(index.wrapping_add(0x1656_67B1_9E37_79F9)));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub mod purpose {
    pub const INTERNAL: u64 = 1;
    pub const EXTERNAL: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const EB_DRAWS: u64 = 4;
    pub const REPLICATE: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(7, 1, 3).random();
        let b: u64 = substream(7, 1, 3).random();
        let c: u64 = substream(7, 1, 4).random();
        let d: u64 = substream(7, 2, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
