//! Seeded random streams.
//!
//! Each named consumer gets its own ChaCha stream derived from the run seed
//! and a stable hash of its name, so adding or removing one parameter never
//! shifts the initial values of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
