use sha2::{Digest, Sha256};

/// SplitMix64 finalizer; derives independent sub-seeds from `(seed, tag)`.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hex SHA-256 over the bit patterns of a sequence of float slices.
pub fn digest_f64<'a, I: IntoIterator<Item = &'a [f64]>>(slices: I) -> String {
    let mut h = Sha256::new();
    for s in slices {
        h.update((s.len() as u64).to_le_bytes());
        for v in s {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
