//! Deterministic random streams.
//!
//! Every source of randomness in the crate is a ChaCha8 stream derived from
//! `(base_seed, purpose, index)`. Components never share generator state, so
//! results do not depend on the order in which streams are consumed. This is
//! what makes episode sampling reproducible across worker counts: episode `i`
//! always draws from `derive_rng(seed, "episode", i)` no matter who runs it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte slice. Used for stream derivation and config hashing;
/// not a cryptographic hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent generator for `(base_seed, purpose, index)`.
///
/// The tuple is hashed into a 256-bit ChaCha8 seed; distinct tuples give
/// unrelated streams.
pub fn derive_rng(base_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut material = Vec::with_capacity(purpose.len() + 17);
    material.extend_from_slice(&base_seed.to_le_bytes());
    material.extend_from_slice(purpose.as_bytes());
    material.push(0xff);
    material.extend_from_slice(&index.to_le_bytes());
    let mut state = fnv1a64(&material);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// One draw from Normal(mean, std^2) via Box-Muller.
pub fn normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    mean + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates shuffle of `0..n`.
pub fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Draw `k` distinct items from `items`, in shuffled order.
pub fn draw_distinct<T: Copy, R: Rng>(items: &[T], k: usize, rng: &mut R) -> Vec<T> {
    debug_assert!(k <= items.len());
    shuffled_indices(items.len(), rng)
        .into_iter()
        .take(k)
        .map(|i| items[i])
        .collect()
}
