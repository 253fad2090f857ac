//! Order-independent seed derivation.

use sha2::{Digest, Sha256};

/// Stable 64-bit hash of a sequence of byte strings. Each part is length
/// prefixed, so `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn stable_hash<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> u64 {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Seed for one trial, a function of its identity only.
pub fn trial_seed(
    base_seed: u64,
    question_id: &str,
    method: &str,
    perm_index: usize,
    iteration: u32,
    option: Option<char>,
) -> u64 {
    let option = option.map(|c| c.to_string()).unwrap_or_default();
    stable_hash([
        &base_seed.to_le_bytes()[..],
        question_id.as_bytes(),
        method.as_bytes(),
        &(perm_index as u64).to_le_bytes()[..],
        &iteration.to_le_bytes()[..],
        option.as_bytes(),
    ])
}
