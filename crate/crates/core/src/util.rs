//! Hashing and seeding helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child seed, `hash(seed, tag, id)`.
pub fn derive_seed(seed: u64, tag: &str, id: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(id.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// Digest of a float slice via its little-endian bytes.
pub fn f32_digest(xs: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in xs {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn median(xs: &[f32]) -> f32 {
    let mut v: Vec<f32> = xs.to_vec();
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n == 0 {
        f32::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Stable held-out membership: about `fraction` of ids, chosen by hash.
pub fn is_holdout(id: usize, fraction: f32) -> bool {
    (derive_seed(0, "holdout", id as u64) % 10_000) < (fraction * 10_000.0) as u64
}
