//! Seed management. A root seed is split into named, independent streams so
//! that consuming randomness in one part of a run never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive the seed of the stream `name` under `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(name.as_bytes())))
}

pub fn stream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name))
}

/// Indexed child stream, e.g. one per (task, strength) cell.
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(splitmix64(
        derive_seed(root, name) ^ splitmix64(index.wrapping_add(1)),
    ))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Named streams used by a training run.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub init: Rng,
    pub dropout: Rng,
    pub sampling: Rng,
    pub reparam: Rng,
    pub baselines: Rng,
    pub diagnostics_seed: u64,
    pub subsample_seed: u64,
}

impl RunStreams {
    pub fn new(root: u64) -> Self {
        Self {
            init: stream(root, "init"),
            dropout: stream(root, "dropout"),
            sampling: stream(root, "sampling"),
            reparam: stream(root, "reparameterization"),
            baselines: stream(root, "baselines"),
            diagnostics_seed: derive_seed(root, "diagnostics"),
            subsample_seed: derive_seed(root, "subsample"),
        }
    }
}
