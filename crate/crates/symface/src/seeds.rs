//! Named random streams derived from one root seed.
//!
//! Every component draws from its own `(root, tag, index)` stream, so
//! adding or removing draws in one component can never shift another
//! component's randomness. Resuming a run re-derives the same streams
//! from the stored root seed; no generator state needs serializing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive the sub-seed for `(root, tag, index)`.
pub fn derive(root: u64, tag: &str, index: u64) -> u64 {
    mix(mix(root ^ hash_tag(tag)).wrapping_add(index))
}

/// Seeded generator for a named stream.
pub fn rng(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, tag, index))
}
