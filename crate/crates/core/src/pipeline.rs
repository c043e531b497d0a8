//! The two-stage pruning pipeline: entropy map, complexity classification,
//! Stage-1 entropy top-K, dual-layer choice, Stage-2 attention top-K and the
//! retrospective KV eviction plan.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_scores, AttentionProvider, RelevanceScores};
use crate::entropy::{compute_entropy_map, EntropyMap, PatchGeometry};
use crate::error::{invalid, Error, Result};
use crate::image::{to_luminance, ImageBuffer};
use crate::kv::EvictionPlan;
use crate::policy::{FinalBudget, LevelDecision, PruningPolicy};
use crate::selection::{select_stage1, top_k, Stage, TokenSelection};

/// Stage-2 layer for an image of global entropy `global_entropy`.
pub fn choose_layer(global_entropy: f64, policy: &PruningPolicy) -> usize {
    policy.classify(global_entropy).stage2_layer
}

/// Keeps the `k_final` highest-scoring Stage-1 tokens, mapped back to original indices.
///
/// Ties go to the lower original index. With `k_final >= |stage1|` every Stage-1 token is kept.
pub fn select_stage2(scores: &RelevanceScores, k_final: usize, stage1: &TokenSelection) -> Result<TokenSelection> {
    if k_final == 0 {
        return Err(invalid("K_final must be >= 1"));
    }
    if scores.values.len() != stage1.kept.len() {
        return Err(invalid(format!(
            "{} scores for {} stage-1 tokens",
            scores.values.len(),
            stage1.kept.len()
        )));
    }
    let kept = top_k(&scores.values, k_final)
        .into_iter()
        .map(|pos| stage1.kept[pos])
        .collect();
    Ok(TokenSelection {
        original_count: stage1.original_count,
        kept,
        stage: Stage::Stage2,
    })
}

/// Luminance entropy map of `img` on the policy's patch grid.
pub fn entropy_map_for(img: &ImageBuffer, policy: &PruningPolicy) -> Result<EntropyMap> {
    let gray = to_luminance(img)?;
    let geometry = PatchGeometry::for_image(
        gray.width(),
        gray.height(),
        policy.patch_h,
        policy.patch_w,
        policy.pad_policy,
    )?;
    compute_entropy_map(&gray, geometry, policy.bins)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub global_entropy: f64,
    pub decision: LevelDecision,
    pub k_final: usize,
    pub bypassed: bool,
    pub stage1: TokenSelection,
    pub stage2: TokenSelection,
    pub scores: Option<RelevanceScores>,
    pub eviction: EvictionPlan,
}

impl PipelineResult {
    pub fn summary(&self, model_id: &str) -> PipelineSummary {
        PipelineSummary {
            model_id: model_id.to_string(),
            global_entropy: self.global_entropy,
            decision: self.decision,
            bypassed: self.bypassed,
            original_count: self.stage1.original_count,
            k_final: self.k_final,
            stage1_count: self.stage1.len(),
            stage2_count: self.stage2.len(),
            stage2_layer: self.decision.stage2_layer,
            evicted_count: self.eviction.evict_indices.len(),
            stage1_indices: self.stage1.kept.clone(),
            kept_indices: self.stage2.kept.clone(),
        }
    }
}

/// Serialized form of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub model_id: String,
    pub global_entropy: f64,
    pub decision: LevelDecision,
    pub bypassed: bool,
    pub original_count: usize,
    pub k_final: usize,
    pub stage1_count: usize,
    pub stage2_count: usize,
    pub stage2_layer: usize,
    pub evicted_count: usize,
    pub stage1_indices: Vec<usize>,
    pub kept_indices: Vec<usize>,
}

impl PipelineSummary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("pipeline result", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Pipeline bound to a policy, optionally with a final budget other than the policy's.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    policy: &'a PruningPolicy,
    final_budget: FinalBudget,
}

impl<'a> Pipeline<'a> {
    pub fn new(policy: &'a PruningPolicy) -> Result<Self> {
        policy.ensure_valid()?;
        Ok(Self {
            policy,
            final_budget: policy.final_budget,
        })
    }

    pub fn with_final_budget(mut self, budget: FinalBudget) -> Self {
        self.final_budget = budget;
        self
    }

    pub fn policy(&self) -> &PruningPolicy {
        self.policy
    }

    pub fn run<P: AttentionProvider + ?Sized>(&self, img: &ImageBuffer, provider: &P) -> Result<PipelineResult> {
        let map = entropy_map_for(img, self.policy)?;
        self.run_on_map(&map, provider)
    }

    /// Runs from a precomputed entropy map.
    pub fn run_on_map<P: AttentionProvider + ?Sized>(&self, map: &EntropyMap, provider: &P) -> Result<PipelineResult> {
        let m = map.len();
        let decision = self.policy.classify(map.global);
        let stage1 = select_stage1(map, decision.stage1_retention)?;
        let k_final = self.final_budget.resolve(m);
        let layer = decision.stage2_layer;

        if stage1.len() <= k_final {
            let stage2 = TokenSelection {
                stage: Stage::Stage2,
                ..stage1.clone()
            };
            return Ok(PipelineResult {
                global_entropy: map.global,
                decision,
                k_final,
                bypassed: true,
                stage1,
                stage2,
                scores: None,
                eviction: EvictionPlan {
                    evict_indices: Vec::new(),
                    upto_layer: layer,
                },
            });
        }

        let input = provider.attention_input(layer, &stage1.kept)?;
        if input.num_vision != stage1.len() {
            return Err(Error::Provider(format!(
                "provider returned {} vision keys for {} stage-1 tokens",
                input.num_vision,
                stage1.len()
            )));
        }
        let scores = attention_scores(&input)?;
        let stage2 = select_stage2(&scores, k_final, &stage1)?;
        let eviction = EvictionPlan::between(&stage1.kept, &stage2.kept, layer);
        Ok(PipelineResult {
            global_entropy: map.global,
            decision,
            k_final,
            bypassed: false,
            stage1,
            stage2,
            scores: Some(scores),
            eviction,
        })
    }
}

/// Runs the full pipeline with the policy's own final budget.
pub fn run_pipeline<P: AttentionProvider + ?Sized>(
    img: &ImageBuffer,
    policy: &PruningPolicy,
    provider: &P,
) -> Result<PipelineResult> {
    Pipeline::new(policy)?.run(img, provider)
}
