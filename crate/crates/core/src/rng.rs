//! Named random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 generator whose
//! seed is derived from the user seed, a stream tag and a list of indices
//! (factor, restart, replicate, ...). Streams never share state, so results
//! do not depend on evaluation order or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed for the stream `tag` at position `indices`.
pub fn derive_seed(seed: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut s = splitmix(seed ^ h);
    for &i in indices {
        s = splitmix(s ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    s
}

pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, indices))
}
