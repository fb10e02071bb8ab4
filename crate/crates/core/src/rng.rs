//! Deterministic random streams.
//!
//! All stochastic code in this crate draws from ChaCha8, a seedable
//! counter-based generator. Independent streams are derived from a base seed
//! plus a salt path (e.g. one stream per sequence, per epoch, per batch), so
//! parallel work never shares generator state and every run is reproducible
//! from a single integer seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step, used to mix seed and salt words into a ChaCha key.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha8 stream from `seed` and a salt path.
///
/// Equal `(seed, salts)` always yields the same stream; distinct salt paths
/// yield statistically independent streams.
pub fn stream(seed: u64, salts: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    for &s in salts {
        let mut salt_state = s;
        state ^= splitmix64(&mut salt_state).rotate_left(17);
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream keyed by a string label, for per-object derivation (sequence ids).
pub fn stream_labeled(seed: u64, label: &str, salts: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut all = Vec::with_capacity(salts.len() + 1);
    all.push(h);
    all.extend_from_slice(salts);
    stream(seed, &all)
}
