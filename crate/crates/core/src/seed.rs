//! Deterministic seed derivation. Training, evaluation, and the data
//! generators derive per-(purpose, epoch, sample) seeds functionally
//! from one master seed so runs are resumable and bit-reproducible.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a seed with a stream of domain tags.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut s = mix(master);
    for &t in tags {
        s = mix(s ^ t.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    s
}
