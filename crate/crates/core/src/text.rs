//! Small text and hashing utilities shared by retrieval, the revision adapter
//! and the counter-based mocks.

use std::collections::BTreeSet;

/// Lowercase word set of `text`. Words are maximal runs of alphanumeric chars.
pub fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard similarity of the lowercase word sets of two texts.
///
/// Two texts with no words at all are considered identical (1.0).
pub fn jaccard(a: &str, b: &str) -> f64 {
    let a = word_set(a);
    let b = word_set(b);
    jaccard_sets(&a, &b)
}

pub fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Sorted, deduplicated token hashes. Merge-intersection over these is much
/// cheaper than comparing string sets when one side is matched many times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSignature(Vec<u64>);

impl TokenSignature {
    pub fn of(text: &str) -> Self {
        let mut hashes: Vec<u64> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| stable_hash(w.to_lowercase().as_bytes()))
            .collect();
        hashes.sort_unstable();
        hashes.dedup();
        TokenSignature(hashes)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn jaccard(&self, other: &TokenSignature) -> f64 {
        if self.0.is_empty() && other.0.is_empty() {
            return 1.0;
        }
        let (mut i, mut j, mut inter) = (0, 0, 0usize);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        inter as f64 / (self.0.len() + other.0.len() - inter) as f64
    }
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine several words into one well-mixed key.
pub fn derive_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |acc, p| mix64(acc ^ mix64(*p)))
}

/// Counter-based uniform draw in [0, 1): a pure function of its key parts.
pub fn keyed_unit(parts: &[u64]) -> f64 {
    (derive_key(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Approximate token count used for `ChatResponse::token_estimate`.
pub fn estimate_tokens(text: &str) -> u32 {
    text.chars().count().div_ceil(4) as u32
}
