//! Counter-based random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream keyed by the
//! experiment seed plus a path of integers (round, client, purpose, ...). No
//! generator is ever shared between tasks, so results do not depend on the
//! order in which parallel work is scheduled, and a resumed run can rebuild
//! any stream from its path alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes; kept stable because they are part of the reproducibility
/// contract.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const PARTICIPANTS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const PERSONALIZE: u64 = 6;
    pub const PARTITION: u64 = 7;
    pub const SYNTH: u64 = 8;
    pub const PROTOTYPES: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and a key path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut key = splitmix64(seed);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(path.len() as u64);
    rng
}
