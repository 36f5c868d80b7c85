//! Hierarchical seed derivation.
//!
//! Every random quantity is drawn from its own ChaCha stream keyed by
//! `(seed, stream)`, so results do not depend on evaluation order or on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_AP_POSITIONS: u64 = 1;
pub const STREAM_UE_POSITIONS: u64 = 2;
pub const STREAM_SHADOWING: u64 = 3;
pub const STREAM_PILOTS: u64 = 4;
pub const STREAM_MODES: u64 = 5;

pub const TAG_TOPOLOGY: u64 = 0x746f_706f;
pub const TAG_STATISTICS: u64 = 0x7374_6174;
pub const TAG_MODE_DRAW: u64 = 0x6d6f_6465;
pub const TAG_TRIAL_BLOCK: u64 = 0x626c_6f63;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for entity `index` under namespace `tag`.
pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ splitmix64(tag)).wrapping_add(index))
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
