//! Fixtures shared by the criterion benches.

use erase_core::attention::hash_words;
use erase_core::{ImageBuffer, PruningPolicy};

/// Deterministic RGB noise, `side x side`.
pub fn noisy_image(side: usize, seed: u64) -> ImageBuffer {
    let data = (0..side * side * 3)
        .map(|i| (hash_words(seed, &[i as u64]) >> 56) as u8)
        .collect();
    ImageBuffer::new(side, side, 3, data).expect("nonzero side")
}

pub fn policy() -> PruningPolicy {
    erase_core::builtin_policy("qwen2.5-vl-7b").expect("built-in policy")
}
