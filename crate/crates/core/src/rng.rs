//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream derived from one master seed, either by name or by index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seed of the named substream of `master`, e.g. `"data"` or `"train"`.
pub fn derive_seed(master: u64, name: &str) -> u64 {
    splitmix(master ^ splitmix(fnv1a(name.as_bytes())))
}

pub fn named(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, name))
}

/// Stream `index` of `seed`. Streams of one seed never overlap, so records
/// or joints drawn this way are independent of each other's draw counts.
pub fn indexed(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
