//! Deterministic seed derivation.
//!
//! Training code derives one RNG stream per (fold, epoch, sample, …) from a
//! base seed so that results never depend on thread scheduling or iteration
//! interleaving.

/// Mix a base seed with a path of indices (splitmix64 steps).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        state = state.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        state = splitmix64(state);
    }
    splitmix64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
