//! Named random substreams.
//!
//! Every random draw in the crate starts from one user seed. Consumers ask
//! for a substream by name (and optionally an index) so that adding a new
//! consumer never shifts the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a stream name.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    splitmix(splitmix(seed) ^ fnv1a(name.as_bytes()))
}

/// Derive a child seed for item `index` of a named stream.
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(substream_seed(seed, name) ^ splitmix(index))
}

pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name))
}

pub fn indexed_substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(indexed_seed(seed, name, index))
}

/// Seed for a keyed item (e.g. a patient id) of a named stream.
pub fn keyed_seed(seed: u64, name: &str, key: &str) -> u64 {
    indexed_seed(seed, name, fnv1a(key.as_bytes()))
}
