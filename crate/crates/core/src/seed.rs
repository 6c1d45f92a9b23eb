//! Named sub-seeds derived from one run seed, so that changing how one
//! consumer draws numbers never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const MASK_INIT: &str = "mask-init";
pub const SHUFFLE: &str = "shuffle";
pub const REPLAY: &str = "replay";
pub const REG_MASKS: &str = "reg-masks";
pub const SELECT: &str = "select";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the run seed
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    splitmix64(seed ^ splitmix64(h))
}

pub fn rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, name))
}
