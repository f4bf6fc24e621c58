//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a ChaCha generator seeded from a base
//! seed plus a purpose tag and indices, so independent stages (shape noise,
//! splits, rotations, init, batch order) never share or race a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; good avalanche for seed mixing.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a base seed, a purpose tag, and up to three indices into one
/// stream seed.
pub fn derive(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = mix(base ^ 0x51ed_270b_7a53_99c5);
    for &b in tag.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &i in indices {
        h = mix(h ^ i);
    }
    h
}

/// A ChaCha stream for one derived purpose.
pub fn stream(base: u64, tag: &str, indices: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(base, tag, indices))
}
