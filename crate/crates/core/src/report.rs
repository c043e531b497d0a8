//! Token/KV scaling tables and aggregate statistics over pipeline runs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kv::{prefill_cost, KvCacheModel, KvGeometry};
use crate::pipeline::PipelineSummary;
use crate::policy::FinalBudget;

/// Vision tokens of a `width x height` image on a `patch`-pixel grid.
pub fn token_count(width: usize, height: usize, patch: usize) -> usize {
    width.div_ceil(patch) * height.div_ceil(patch)
}

/// Nearest multiple of `patch` (at least one patch).
pub fn native_side(side: usize, patch: usize) -> usize {
    (((side as f64 / patch as f64).round() as usize).max(1)) * patch
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub requested_side: usize,
    pub width: usize,
    pub height: usize,
    pub tokens: usize,
    pub final_tokens: usize,
    pub kv_bytes_base: u64,
    pub kv_bytes_pruned: u64,
    pub prefill_flops_base: f64,
}

/// Token count and KV bytes as the long image side grows at fixed aspect
/// (`height = width / aspect`); sides snap to multiples of the patch size.
pub fn scaling_table(
    sides: &[usize],
    aspect: f64,
    patch: usize,
    geometry: KvGeometry,
    text_tokens: usize,
    budget: FinalBudget,
) -> Result<Vec<ScalingRow>> {
    if patch == 0 || !aspect.is_finite() || aspect <= 0.0 {
        return Err(invalid("patch must be >= 1 and aspect > 0"));
    }
    Ok(sides
        .iter()
        .map(|&side| {
            let width = native_side(side, patch);
            let height = native_side((side as f64 / aspect).round() as usize, patch);
            let tokens = token_count(width, height, patch);
            let final_tokens = budget.resolve(tokens).min(tokens);
            ScalingRow {
                requested_side: side,
                width,
                height,
                tokens,
                final_tokens,
                kv_bytes_base: KvCacheModel::uniform(geometry, tokens, text_tokens).kv_bytes(),
                kv_bytes_pruned: KvCacheModel::uniform(geometry, final_tokens, text_tokens).kv_bytes(),
                prefill_flops_base: prefill_cost(&vec![tokens + text_tokens; geometry.num_layers], geometry.hidden_dim),
            }
        })
        .collect())
}

pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Averages over a set of pipeline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    /// Mean policy pruning ratio of the selected levels.
    pub mean_stage1_prune_ratio: f64,
    /// Mean `1 − stage1_count / M`, including the floor on the budget.
    pub mean_effective_stage1_ratio: f64,
    pub mean_stage2_layer: f64,
    pub mean_final_ratio: f64,
    pub simple_fraction: f64,
    pub bypass_fraction: f64,
    /// Runs per complexity level, level 1 first.
    pub level_counts: Vec<usize>,
}

pub fn summarize(runs: &[PipelineSummary]) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(invalid("no pipeline results to summarize"));
    }
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&PipelineSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let levels = runs.iter().map(|r| r.decision.level).max().unwrap_or(1);
    let mut level_counts = vec![0; levels];
    for r in runs {
        level_counts[r.decision.level - 1] += 1;
    }
    Ok(RunSummary {
        runs: runs.len(),
        mean_stage1_prune_ratio: mean(&|r| r.decision.stage1_prune_ratio),
        mean_effective_stage1_ratio: mean(&|r| 1.0 - r.stage1_count as f64 / r.original_count as f64),
        mean_stage2_layer: mean(&|r| r.stage2_layer as f64),
        mean_final_ratio: mean(&|r| 1.0 - r.stage2_count as f64 / r.original_count as f64),
        simple_fraction: mean(&|r| if r.decision.is_simple { 1.0 } else { 0.0 }),
        bypass_fraction: mean(&|r| if r.bypassed { 1.0 } else { 0.0 }),
        level_counts,
    })
}
