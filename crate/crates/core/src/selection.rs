//! Token selections and the deterministic argTopK they are built from.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{EntropyMap, PatchGeometry};
use crate::error::{invalid, Error, Result};
use crate::image::save_gray8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Retained original token indices, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSelection {
    pub original_count: usize,
    pub kept: Vec<usize>,
    pub stage: Stage,
}

impl TokenSelection {
    pub fn new(original_count: usize, kept: Vec<usize>, stage: Stage) -> Result<Self> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("kept indices must be strictly increasing"));
        }
        if kept.last().is_some_and(|&i| i >= original_count) {
            return Err(invalid("kept index out of range"));
        }
        Ok(Self {
            original_count,
            kept,
            stage,
        })
    }

    /// Every token kept.
    pub fn all(original_count: usize, stage: Stage) -> Self {
        Self {
            original_count,
            kept: (0..original_count).collect(),
            stage,
        }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.kept.binary_search(&index).is_ok()
    }

    /// Fraction of the original tokens removed.
    pub fn prune_ratio(&self) -> f64 {
        1.0 - self.kept.len() as f64 / self.original_count as f64
    }

    /// Kept flags over the original token range.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.original_count];
        for &i in &self.kept {
            mask[i] = true;
        }
        mask
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            original_count: usize,
            kept: &'a [usize],
        }
        serde_json::to_string_pretty(&Export {
            original_count: self.original_count,
            kept: &self.kept,
        })
        .map_err(|e| Error::json("selection", e))
    }

    /// One pixel per patch: 255 kept, 0 dropped.
    pub fn save_mask(&self, geometry: &PatchGeometry, path: &Path) -> Result<()> {
        if geometry.token_count() != self.original_count {
            return Err(invalid("selection does not match the patch grid"));
        }
        let samples = self.mask().into_iter().map(|k| if k { 255 } else { 0 }).collect();
        save_gray8(path, geometry.cols, geometry.rows, samples)
    }
}

/// Orders by descending score, then ascending index.
#[inline]
fn rank(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Positions of the `k` largest scores (ties to the lower position), returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Stage 1: keep the `max(1, ⌊M·r₁⌋)` highest-entropy tokens.
pub fn select_stage1(map: &EntropyMap, retention: f64) -> Result<TokenSelection> {
    if !(0.0..=1.0).contains(&retention) {
        return Err(invalid(format!(
            "stage-1 retention must lie in [0, 1], got {retention}"
        )));
    }
    let m = map.values.len();
    if m == 0 {
        return Err(invalid("empty entropy map"));
    }
    let k = stage1_budget(m, retention);
    Ok(TokenSelection {
        original_count: m,
        kept: top_k(&map.values, k),
        stage: Stage::Stage1,
    })
}

/// `max(1, ⌊m·r⌋)`
pub fn stage1_budget(m: usize, retention: f64) -> usize {
    ((m as f64 * retention).floor() as usize).clamp(1, m)
}
