//! Entropy-guided, complexity-adaptive two-stage vision-token pruning.
//!
//! Stage 1 scores every image patch by the Shannon entropy of its intensity
//! histogram and keeps the most informative fraction, where the fraction
//! depends on the image's median patch entropy. Stage 2 runs inside the
//! decoder at an early or a mid-to-late layer (again chosen by complexity) and
//! keeps the tokens that receive the most text-to-vision attention, after
//! which the KV cache of the earlier layers is pruned retrospectively.
//!
//! The crate also carries the Bayesian-optimization search that tunes the
//! thresholds and ratios, a synthetic benchmark that stands in for task
//! accuracy, and an analytical KV/prefill cost model.

pub mod attention;
pub mod dump;
pub mod entropy;
pub mod error;
pub mod image;
pub mod kv;
pub mod optimizer;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod selection;
pub mod synth;

pub use attention::{attention_scores, AttentionInput, AttentionProvider, RelevanceScores, SyntheticAttention};
pub use dump::FileAttention;
pub use entropy::{compute_entropy_map, global_entropy, patch_entropy, EntropyMap, PadPolicy, PatchGeometry};
pub use error::{Error, Result};
pub use image::{to_luminance, ImageBuffer};
pub use kv::{kv_geometry, prefill_cost, CostReport, EvictionPlan, KvCacheModel, KvGeometry};
pub use pipeline::{choose_layer, run_pipeline, select_stage2, Pipeline, PipelineResult, PipelineSummary};
pub use policy::{builtin_policy, FinalBudget, LevelDecision, PruningPolicy};
pub use selection::{select_stage1, top_k, Stage, TokenSelection};
pub use synth::{BenchItem, BenchSpec, SceneFamily, SyntheticBenchmark};
