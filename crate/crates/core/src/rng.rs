//! Seed derivation. Every stochastic component receives its own stream,
//! derived from a root seed and a label, so results do not depend on the
//! order in which components run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn stable_hash(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

/// Child seed for `label` under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix(root ^ splitmix(fnv1a(label.as_bytes())))
}

pub fn rng_for(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}
