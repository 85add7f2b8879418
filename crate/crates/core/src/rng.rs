//! Seed handling. Every random stream in the crate is a ChaCha8 generator keyed
//! by a root seed and selected by a (domain, index) counter pair, so parallel or
//! reordered work never shares a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named stream domains. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Corruption = 3,
    Dropout = 4,
    Validation = 5,
    SampleOrder = 6,
    SampleValue = 7,
    Sweep = 8,
    Toy = 9,
    Learner = 10,
    Split = 11,
    Noise = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a counter.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream as u64)) ^ index)
}

/// Generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, 0));
    rng.set_stream(index);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
