//! Small helpers shared by the generator and the trainer.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an RNG seed from a tuple of counters, so every stream can be
/// reconstructed from its coordinates alone.
pub fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_0f5a_9c0d_e001, |h, &p| {
        mix(h ^ mix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}
