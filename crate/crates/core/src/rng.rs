//! Seed derivation for independent deterministic RNG streams.

/// One round of the SplitMix64 output function.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed from a base seed and a stream tag.
///
/// Used wherever one user-facing seed has to fan out into several
/// uncorrelated streams (per-sample scene seeds, per-parameter init
/// streams, the texture lattice), so that adding or removing one consumer
/// never shifts another consumer's draws.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(base).wrapping_add(splitmix64(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5bf0_3635)))
}

/// Hashes a string into a stream tag for [`derive_seed`].
pub fn tag_from_str(s: &str) -> u64 {
    // FNV-1a, enough to separate parameter names.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic hash of a lattice point, used by the value-noise texture.
pub fn hash_lattice(seed: u64, octave: u32, ix: i64, iy: i64) -> u64 {
    let mut h = splitmix64(seed ^ 0xa076_1d64_78bd_642f);
    h = splitmix64(h ^ u64::from(octave).wrapping_mul(0xe703_7ed1_a0b4_28db));
    h = splitmix64(h ^ (ix as u64).wrapping_mul(0x8ebc_6af0_9c88_c6e3));
    splitmix64(h ^ (iy as u64).wrapping_mul(0x5895_58cb_3a8a_b9c3))
}

/// Maps a hash to a double in `[0, 1)`.
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_is_stable_and_spreads() {
        assert_eq!(derive_seed(7, 0), derive_seed(7, 0));
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    #[test]
    fn unit_f64_in_range() {
        for i in 0..1000 {
            let v = unit_f64(hash_lattice(42, 0, i, -i));
            assert!((0.0..1.0).contains(&v));
        }
    }
}
