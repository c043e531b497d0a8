//! Text-to-vision relevance scores and the sources that feed them.
//!
//! Scores are computed from raw text-query and vision-key blocks at one decoder
//! layer: per head, `softmax(q·kᵀ / √d)` over the vision positions only, averaged
//! over heads and summed over text rows.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Query/key blocks at one layer, laid out `[head][row][dim]`.
///
/// A headless input is a single head whose `head_dim` is the full model width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    pub layer: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_text: usize,
    pub num_vision: usize,
    pub text_queries: Vec<f64>,
    pub vision_keys: Vec<f64>,
    /// When present the matrix path is skipped.
    pub precomputed_scores: Option<Vec<f64>>,
}

impl AttentionInput {
    pub fn headless(layer: usize, width: usize, text_queries: Vec<f64>, vision_keys: Vec<f64>) -> Result<Self> {
        Self::per_head(layer, 1, width, text_queries, vision_keys)
    }

    pub fn per_head(
        layer: usize,
        num_heads: usize,
        head_dim: usize,
        text_queries: Vec<f64>,
        vision_keys: Vec<f64>,
    ) -> Result<Self> {
        let block = num_heads * head_dim;
        if block == 0 {
            return Err(invalid("num_heads and head_dim must be >= 1"));
        }
        if text_queries.len() % block != 0 || vision_keys.len() % block != 0 {
            return Err(invalid(format!(
                "query/key lengths {}/{} are not multiples of heads x head_dim = {block}",
                text_queries.len(),
                vision_keys.len()
            )));
        }
        Ok(Self {
            layer,
            num_heads,
            head_dim,
            num_text: text_queries.len() / block,
            num_vision: vision_keys.len() / block,
            text_queries,
            vision_keys,
            precomputed_scores: None,
        })
    }

    pub fn precomputed(layer: usize, scores: Vec<f64>) -> Self {
        Self {
            layer,
            num_heads: 0,
            head_dim: 0,
            num_text: 0,
            num_vision: scores.len(),
            text_queries: Vec::new(),
            vision_keys: Vec::new(),
            precomputed_scores: Some(scores),
        }
    }

    fn check(&self) -> Result<()> {
        let q = self.num_heads * self.num_text * self.head_dim;
        let k = self.num_heads * self.num_vision * self.head_dim;
        if self.text_queries.len() != q || self.vision_keys.len() != k {
            return Err(invalid(format!(
                "shape mismatch: expected {q} query and {k} key values, got {} and {}",
                self.text_queries.len(),
                self.vision_keys.len()
            )));
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(invalid("num_heads and head_dim must be >= 1"));
        }
        if self.num_vision == 0 {
            return Err(invalid("no vision keys"));
        }
        if self.num_text == 0 {
            return Err(invalid("no text queries"));
        }
        if !self.text_queries.iter().chain(&self.vision_keys).all(|v| v.is_finite()) {
            return Err(invalid("non-finite query/key value"));
        }
        Ok(())
    }
}

/// Aggregated attention received by each remaining vision token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub values: Vec<f64>,
    pub layer: usize,
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn attention_scores(input: &AttentionInput) -> Result<RelevanceScores> {
    if let Some(scores) = &input.precomputed_scores {
        if scores.len() != input.num_vision {
            return Err(invalid("precomputed score length mismatch"));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(invalid("precomputed scores must be finite and nonnegative"));
        }
        return Ok(RelevanceScores {
            values: scores.clone(),
            layer: input.layer,
        });
    }
    input.check()?;

    let (h_n, l_n, m_n, d) = (input.num_heads, input.num_text, input.num_vision, input.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let head_weight = 1.0 / h_n as f64;
    let mut scores = vec![0.0; m_n];
    let mut row = vec![0.0; m_n];
    for h in 0..h_n {
        let keys = &input.vision_keys[h * m_n * d..(h + 1) * m_n * d];
        for r in 0..l_n {
            let q = &input.text_queries[(h * l_n + r) * d..(h * l_n + r + 1) * d];
            for (j, logit) in row.iter_mut().enumerate() {
                let k = &keys[j * d..(j + 1) * d];
                *logit = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut row);
            for (s, a) in scores.iter_mut().zip(&row) {
                *s += a * head_weight;
            }
        }
    }
    Ok(RelevanceScores {
        values: scores,
        layer: input.layer,
    })
}

/// Source of per-layer query/key blocks for a set of vision tokens.
pub trait AttentionProvider {
    /// Query/key blocks at `layer` for the vision tokens at the given original
    /// patch indices (keys returned in the same order).
    fn attention_input(&self, layer: usize, tokens: &[usize]) -> Result<AttentionInput>;
}

impl<T: AttentionProvider + ?Sized> AttentionProvider for &T {
    fn attention_input(&self, layer: usize, tokens: &[usize]) -> Result<AttentionInput> {
        (**self).attention_input(layer, tokens)
    }
}

impl<T: AttentionProvider + ?Sized> AttentionProvider for Box<T> {
    fn attention_input(&self, layer: usize, tokens: &[usize]) -> Result<AttentionInput> {
        (**self).attention_input(layer, tokens)
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes `seed` followed by `words`, folding each as `h = mix64(h ^ (w + 1) * GOLDEN)`.
#[inline]
pub fn hash_words(seed: u64, words: &[u64]) -> u64 {
    words
        .iter()
        .fold(mix64(seed), |h, &w| mix64(h ^ w.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Uniform value in `[-1, 1)` from the top 53 bits of the hash.
#[inline]
pub fn unit_value(seed: u64, words: &[u64]) -> f64 {
    let bits = hash_words(seed, words) >> 11;
    bits as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0
}

const STREAM_QUERY: u64 = 0;
const STREAM_KEY: u64 = 1;
const STREAM_TOPIC: u64 = 2;

/// Deterministic pseudorandom query/key generator.
///
/// Every entry is `unit_value(seed, [stream, layer, head, row, dim])` with stream
/// 0 for queries (row = text row), 1 for keys (row = original patch index) and 2
/// for a per-head topic vector (row = 0). Queries are `topic + noise`; keys are
/// `noise + gain · relevance[patch] · topic`, so tokens with positive relevance
/// draw more attention. Without relevance the blocks are pure noise.
#[derive(Debug, Clone)]
pub struct SyntheticAttention {
    pub seed: u64,
    pub num_text: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub gain: f64,
    relevance: Option<Vec<f64>>,
}

impl SyntheticAttention {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            num_text: 8,
            num_heads: 4,
            head_dim: 32,
            gain: 1.0,
            relevance: None,
        }
    }

    pub fn with_dims(mut self, num_text: usize, num_heads: usize, head_dim: usize) -> Self {
        self.num_text = num_text;
        self.num_heads = num_heads;
        self.head_dim = head_dim;
        self
    }

    /// Per-patch relevance (indexed by original patch index) and its strength.
    pub fn with_relevance(mut self, relevance: Vec<f64>, gain: f64) -> Self {
        self.relevance = Some(relevance);
        self.gain = gain;
        self
    }

    fn topic(&self, layer: usize, head: usize, dim: usize) -> f64 {
        unit_value(self.seed, &[STREAM_TOPIC, layer as u64, head as u64, 0, dim as u64])
    }
}

impl AttentionProvider for SyntheticAttention {
    fn attention_input(&self, layer: usize, tokens: &[usize]) -> Result<AttentionInput> {
        let (h_n, l_n, d) = (self.num_heads, self.num_text, self.head_dim);
        if let Some(rel) = &self.relevance {
            if let Some(&bad) = tokens.iter().find(|&&t| t >= rel.len()) {
                return Err(Error::Provider(format!(
                    "token {bad} outside the {}-patch relevance map",
                    rel.len()
                )));
            }
        }
        let mut queries = Vec::with_capacity(h_n * l_n * d);
        let mut keys = Vec::with_capacity(h_n * tokens.len() * d);
        for h in 0..h_n {
            let topic: Vec<f64> = (0..d).map(|k| self.topic(layer, h, k)).collect();
            for r in 0..l_n {
                for (k, t) in topic.iter().enumerate() {
                    let noise = unit_value(self.seed, &[STREAM_QUERY, layer as u64, h as u64, r as u64, k as u64]);
                    queries.push(t + noise);
                }
            }
            for &tok in tokens {
                let rel = self.relevance.as_ref().map_or(0.0, |r| r[tok]);
                for (k, t) in topic.iter().enumerate() {
                    let noise = unit_value(self.seed, &[STREAM_KEY, layer as u64, h as u64, tok as u64, k as u64]);
                    keys.push(noise + self.gain * rel * t);
                }
            }
        }
        AttentionInput::per_head(layer, h_n, d, queries, keys)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dense triple loop: exp/normalize per row per head, mean heads, sum rows.
    fn loop_oracle(input: &AttentionInput) -> Vec<f64> {
        let (hn, ln, mn, d) = (input.num_heads, input.num_text, input.num_vision, input.head_dim);
        let mut out = vec![0.0; mn];
        for h in 0..hn {
            for r in 0..ln {
                let mut logits = vec![0.0; mn];
                for j in 0..mn {
                    let mut dot = 0.0;
                    for k in 0..d {
                        dot += input.text_queries[(h * ln + r) * d + k] * input.vision_keys[(h * mn + j) * d + k];
                    }
                    logits[j] = dot / (d as f64).sqrt();
                }
                let z: f64 = logits.iter().map(|x| x.exp()).sum();
                for j in 0..mn {
                    out[j] += logits[j].exp() / z / hn as f64;
                }
            }
        }
        out
    }

    #[test]
    fn equal_keys_split_evenly() {
        let input = AttentionInput::headless(0, 2, vec![1.0, 0.5], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let s = attention_scores(&input).unwrap();
        assert!((s.values[0] - 0.5).abs() < 1e-15 && (s.values[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ln3_logit_gives_three_to_one() {
        // d = 1, so the scaled logit equals the dot product.
        let input = AttentionInput::headless(0, 1, vec![1.0], vec![3f64.ln(), 0.0]).unwrap();
        let s = attention_scores(&input).unwrap();
        assert!((s.values[0] - 0.75).abs() < 1e-12);
        assert!((s.values[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn four_heads_match_loop_oracle() {
        let input = SyntheticAttention::new(99)
            .with_dims(3, 4, 16)
            .attention_input(5, &[0, 3, 4, 8, 9, 11, 20])
            .unwrap();
        assert_eq!((input.num_text, input.num_vision), (3, 7));
        let s = attention_scores(&input).unwrap();
        for (a, b) in s.values.iter().zip(loop_oracle(&input)) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn precomputed_scores_skip_matrices() {
        let s = attention_scores(&AttentionInput::precomputed(3, vec![0.2, 0.7])).unwrap();
        assert_eq!(s.values, vec![0.2, 0.7]);
        assert!(attention_scores(&AttentionInput::precomputed(3, vec![f64::NAN])).is_err());
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(AttentionInput::per_head(0, 2, 3, vec![0.0; 5], vec![0.0; 6]).is_err());
        let input = AttentionInput::headless(0, 2, vec![1.0, f64::INFINITY], vec![0.0; 4]).unwrap();
        assert!(attention_scores(&input).is_err());
        let mut input = AttentionInput::headless(0, 2, vec![1.0, 1.0], vec![0.0; 4]).unwrap();
        input.vision_keys.pop();
        assert!(attention_scores(&input).is_err());
    }

    #[test]
    fn synthetic_keys_do_not_depend_on_subset() {
        let p = SyntheticAttention::new(7);
        let a = p.attention_input(2, &[1, 4, 6]).unwrap();
        let b = p.attention_input(2, &[4]).unwrap();
        let d = p.head_dim;
        assert_eq!(&a.vision_keys[d..2 * d], &b.vision_keys[..d]);
        assert_eq!(a.text_queries, b.text_queries);
    }

    #[test]
    fn relevance_draws_attention() {
        let rel: Vec<f64> = (0..20).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let p = SyntheticAttention::new(3).with_relevance(rel, 1.5);
        let tokens: Vec<usize> = (0..20).collect();
        let s = attention_scores(&p.attention_input(17, &tokens).unwrap()).unwrap();
        let top = crate::selection::top_k(&s.values, 4);
        assert_eq!(top, vec![0, 5, 10, 15]);
        assert!(p.attention_input(17, &[25]).is_err());
    }

    #[test]
    fn mixing_function_is_pinned() {
        assert_eq!(mix64(0), 0);
        assert_eq!(mix64(1), 0x5692_161D_100B_05E5);
        let v = unit_value(42, &[1, 2, 3]);
        assert!((-1.0..1.0).contains(&v));
    }

    proptest! {
        #[test]
        fn scores_sum_to_text_rows(seed in any::<u64>(), l in 1usize..6, m in 1usize..30, heads in 1usize..4) {
            let tokens: Vec<usize> = (0..m).map(|i| i * 3).collect();
            let input = SyntheticAttention::new(seed).with_dims(l, heads, 8).attention_input(1, &tokens).unwrap();
            let s = attention_scores(&input).unwrap();
            let total: f64 = s.values.iter().sum();
            prop_assert!((total - l as f64).abs() <= 1e-6 * l as f64);
            prop_assert!(s.values.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn softmax_rows_normalized(row in prop::collection::vec(-50.0f64..50.0, 1..100)) {
            let mut r = row;
            softmax_in_place(&mut r);
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn row_shift_keeps_selection(seed in any::<u64>(), shift in -20.0f64..20.0, k in 1usize..10) {
            // Adding c·q to every key shifts row r's logits by c·|q_r|²/√d, a per-row constant.
            let input = SyntheticAttention::new(seed).with_dims(1, 1, 8).attention_input(0, &(0..12).collect::<Vec<_>>()).unwrap();
            let q = input.text_queries.clone();
            let qq: f64 = q.iter().map(|v| v * v).sum();
            let c = shift / qq;
            let mut shifted = input.clone();
            for j in 0..12 {
                for k in 0..8 {
                    shifted.vision_keys[j * 8 + k] += c * q[k];
                }
            }
            let a = attention_scores(&input).unwrap();
            let b = attention_scores(&shifted).unwrap();
            prop_assert_eq!(crate::selection::top_k(&a.values, k), crate::selection::top_k(&b.values, k));
        }
    }
}
