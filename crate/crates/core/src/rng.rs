//! Named random substreams.
//!
//! Every random decision in a run is drawn from a generator seeded by
//! `(global seed, stream name, indices...)`, so that any one client's draws
//! in any one round can be reproduced without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const SELECTION: &str = "selection";
pub const INIT: &str = "init";
pub const CLIENT: &str = "client";
pub const ATTACK: &str = "attack";
pub const UNLEARN: &str = "unlearn";
pub const MALICIOUS: &str = "malicious";
pub const SPLIT: &str = "split";
pub const EVAL: &str = "eval";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for the named substream.
pub fn derive_seed(seed: u64, stream: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the stream name keeps names stable across builds.
    let mut name_hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        name_hash ^= u64::from(b);
        name_hash = name_hash.wrapping_mul(0x0100_0000_01b3);
    }
    let mut state = splitmix64(seed ^ splitmix64(name_hash));
    for &i in indices {
        state = splitmix64(state ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    state
}

pub fn stream(seed: u64, name: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, indices))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
