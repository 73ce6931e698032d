//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from
//! (master seed, purpose tag, index), so toggling one feature (e.g. mix-up)
//! can never shift the draws seen by another (e.g. dropout).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: &str, idx: u64) -> u64 {
    splitmix(master ^ splitmix(fnv1a(purpose.as_bytes())) ^ splitmix(idx.wrapping_mul(0xa076_1d64_78bd_642f)))
}

pub fn stream(master: u64, purpose: &str, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, idx))
}
