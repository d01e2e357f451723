//! Deterministic seed derivation so every stream in the pipeline is
//! reproducible from a single run seed.

/// SplitMix64 finaliser.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for a path of indices under `base`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, p| mix(acc ^ mix(*p)))
}

/// Folds a slice of floats into a seed component (by bit pattern).
pub fn hash_f64s(values: &[f64]) -> u64 {
    values.iter().fold(0x51_7C_C1_B7_27_22_0A_95, |acc, v| mix(acc ^ v.to_bits()))
}
