//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is a ChaCha generator keyed by a base
//! seed plus a sequence of salts (stage, step, item index). Deriving rather
//! than threading one generator through the code makes each stream
//! independent of evaluation order and of worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, salts: &[u64]) -> u64 {
    salts
        .iter()
        .fold(splitmix(seed), |acc, &s| splitmix(acc ^ splitmix(s)))
}

pub fn rng(seed: u64, salts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, salts))
}

/// Salts naming the pipeline's independent streams.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const RELIABILITY: u64 = 2;
    pub const PRETRAIN: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
    pub const MASK: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const HEAD_INIT: u64 = 9;
}
