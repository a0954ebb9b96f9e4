//! Seeded random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! global seed and a stream id. Stream ids are derived from a document index
//! or a document id, so draws for one document never depend on which other
//! documents were processed first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Generator for stream `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator keyed by an arbitrary string, e.g. a document id.
pub fn keyed_substream(seed: u64, key: &str) -> ChaCha8Rng {
    substream(seed, fnv1a(key.as_bytes()))
}

/// Mixes a seed with a domain tag so unrelated generators sharing one
/// user-facing seed do not replay each other's draws.
pub fn derive_seed(seed: u64, domain: &str) -> u64 {
    let mut z = seed ^ fnv1a(domain.as_bytes());
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
