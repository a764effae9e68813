//! Deterministic substream derivation.
//!
//! All randomness flows from one explicit root seed. Substreams are keyed
//! by integer coordinates (theta index, replication, equation) so the
//! execution order of parallel workers cannot change results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer: a bijective 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based stream generator keyed by (seed, key...).
pub fn substream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ 0x6a09_e667_f3bc_c908);
    for (pos, &k) in keys.iter().enumerate() {
        state = mix(state ^ mix(k.wrapping_add(pos as u64 + 1)));
    }
    let mut bytes = [0u8; 32];
    let mut s = state;
    for chunk in bytes.chunks_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
