//! Small stable hashing helpers. Feature buckets, embeddings and seed
//! derivation must be identical across platforms and toolchains, so these
//! avoid `std::hash`.

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn combine(h: u64, x: u64) -> u64 {
    splitmix64(h ^ splitmix64(x))
}

pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x5151_5151_u64, |h, &w| combine(h, w))
}

/// Derives an independent stream seed from a root seed and a path of indices.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |h, &p| combine(h, p))
}
