//! Code summarization at desk scale.
//!
//! The pipeline has three stages: a shared transformer encoder is pretrained
//! jointly on three summary-focused objectives (action-word prediction,
//! left-to-right summary modeling, masked summary modeling), then fine-tuned
//! together with a decoder on code-to-summary generation, and finally scored
//! with BLEU / METEOR / ROUGE-L plus significance and robustness breakdowns.
//!
//! Everything runs on a small hand-rolled f64 autodiff tape so that analytic
//! gradients can be checked against finite differences end to end.

pub mod autograd;
pub mod batching;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod summarizer;
pub mod tokenizer;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Derive a sub-seed from a root seed, a component tag, and an index.
///
/// All randomness in the pipeline flows from a single root seed through this
/// function, so any stage can be replayed in isolation.
pub fn subseed(root: u64, tag: &str, k: u64) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finalizer. Stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    let mut z = root ^ h ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subseed_is_stable_and_tag_sensitive() {
        assert_eq!(subseed(7, "mask", 3), subseed(7, "mask", 3));
        assert_ne!(subseed(7, "mask", 3), subseed(7, "mask", 4));
        assert_ne!(subseed(7, "mask", 3), subseed(7, "init", 3));
        assert_ne!(subseed(7, "mask", 3), subseed(8, "mask", 3));
    }
}
