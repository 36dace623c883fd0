//! Deterministic derivation of independent RNG seeds.
//!
//! Every stochastic stage keys its randomness off one user-visible seed plus
//! a structural salt (slot index, epoch, sweep cell, …), so work units can be
//! processed in any order — or concurrently — without changing a single drawn
//! number.

/// SplitMix64-style mix of a base seed and a salt. Good dispersion for
/// consecutive salts; not cryptographic, and does not need to be.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-level derivation for nested structure (e.g. epoch, then batch).
pub fn derive_seed2(base: u64, salt_a: u64, salt_b: u64) -> u64 {
    derive_seed(derive_seed(base, salt_a), salt_b)
}
