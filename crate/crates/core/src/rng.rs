//! Counter-based random substreams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream selected by a
//! master seed plus a tuple of integer keys (school index, replicate index,
//! intervention index, ...). A stream depends only on its keys, so work can be
//! split across threads in any order and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Domain tags keep substreams of different stages apart.
pub mod tag {
    pub const SCHOOL: u64 = 0x5343_484f;
    pub const OUTCOME_NOISE: u64 = 0x4e4f_4953;
    pub const SELECTION: u64 = 0x5345_4c45;
    pub const ASSIGNMENT: u64 = 0x4153_5347;
    pub const MISSING: u64 = 0x4d49_5353;
    pub const TRIAL_DRAW: u64 = 0x5452_4941;
    pub const MATCH_ORDER: u64 = 0x4f52_4445;
    pub const NULL_REPLICATE: u64 = 0x4e55_4c4c;
    pub const CI_GRID: u64 = 0x4349_4752;
    pub const CALIBRATION: u64 = 0x4341_4c49;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a key tuple into a single 64-bit value.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent generator for `(master, keys...)`.
pub fn substream(master: u64, keys: &[u64]) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(master);
    rng.set_stream(derive_seed(master, keys));
    rng
}
