//! Named random substreams derived from a single root seed, and the
//! ULID-style identifiers minted from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use ulid::Ulid;

/// Derives a child seed for `(stage, item)` from `root`.
///
/// The derivation only depends on its arguments, so rerunning one stage or
/// one item reproduces exactly the randomness of the original run.
pub fn derive_seed(root: u64, stage: &str, item: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((stage.len() as u64).to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(item.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn rng_for(root: u64, stage: &str, item: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage, item))
}

/// A ULID-formatted identifier drawn from `seed`.
///
/// The timestamp bits are random as well: identifiers carry no wall-clock
/// information, so reruns mint the same ids.
pub fn ulid_from_seed(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let timestamp: u64 = rng.gen::<u64>() & ((1 << 48) - 1);
    let random: u128 = rng.gen::<u128>() & ((1 << 80) - 1);
    Ulid::from_parts(timestamp, random).to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
