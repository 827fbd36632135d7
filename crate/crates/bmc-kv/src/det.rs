//! Counter-based deterministic pseudo-random streams.
//!
//! Every value is a pure function of `(seed, stream, index)`, so weights,
//! prompts, and test fixtures are reproducible without storing state.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// One 64-bit value from a counter-based stream.
pub fn stream_u64(seed: u64, stream: u64, index: u64) -> u64 {
    let a = mix64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let b = mix64(a ^ stream.wrapping_mul(0xD605_1B1D_58D3_D9CB));
    mix64(b ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Uniform in `[0, 1)` with 53 bits of entropy.
pub fn unit_f64(seed: u64, stream: u64, index: u64) -> f64 {
    (stream_u64(seed, stream, index) >> 11) as f64 / (1u64 << 53) as f64
}

/// Uniform in `[lo, hi)` as `f32`.
pub fn uniform_f32(seed: u64, stream: u64, index: u64, lo: f32, hi: f32) -> f32 {
    (lo as f64 + (hi as f64 - lo as f64) * unit_f64(seed, stream, index)) as f32
}
