//! Complexity configuration set: entropy thresholds, per-level pruning ratios
//! and the dual Stage-2 layers.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{PadPolicy, DEFAULT_BINS};
use crate::error::{invalid, Error, Result};

/// Final vision-token budget after both stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum FinalBudget {
    Count(usize),
    /// Fraction of the original token count `M`.
    Fraction(f64),
}

impl FinalBudget {
    /// Resolves the budget against `m` original tokens: `max(1, round(m * f))` for fractions.
    pub fn resolve(&self, m: usize) -> usize {
        match *self {
            FinalBudget::Count(k) => k.max(1),
            FinalBudget::Fraction(f) => ((m as f64 * f).round() as usize).max(1),
        }
    }

    /// Parses `"64"` as a count and `"0.25"` as a fraction.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(k) = s.parse::<usize>() {
            if k == 0 {
                return Err(invalid("final budget must be >= 1 token"));
            }
            return Ok(FinalBudget::Count(k));
        }
        match s.parse::<f64>() {
            Ok(f) if f > 0.0 && f < 1.0 => Ok(FinalBudget::Fraction(f)),
            _ => Err(invalid(format!(
                "final budget `{s}` must be a positive integer or a fraction in (0, 1)"
            ))),
        }
    }
}

impl fmt::Display for FinalBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FinalBudget::Count(k) => write!(f, "{k} tokens"),
            FinalBudget::Fraction(x) => write!(f, "{:.2}% of M", x * 100.0),
        }
    }
}

/// Thresholds `Θ` (descending, nats), pruning ratios per level (level 1 is the
/// most complex) and the early/late Stage-2 layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPolicy {
    pub model_id: String,
    pub patch_h: usize,
    pub patch_w: usize,
    pub bins: usize,
    pub thresholds: Vec<f64>,
    pub prune_ratios: Vec<f64>,
    pub early_layer: usize,
    pub late_layer: usize,
    pub total_layers: usize,
    pub final_budget: FinalBudget,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

/// Outcome of classifying an image's global entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    /// 1-based complexity level; 1 is the most complex.
    pub level: usize,
    pub stage1_prune_ratio: f64,
    pub stage1_retention: f64,
    pub stage2_layer: usize,
    pub is_simple: bool,
}

/// A violated policy invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

pub const BUILTIN_MODELS: [&str; 5] = [
    "qwen2.5-vl-7b",
    "qwen2.5-vl-3b",
    "qwen3-vl-8b",
    "qwen3-vl-4b",
    "internvl3-8b",
];

/// Mid-to-late pruning layer at 60% of depth, rounded half-up.
pub fn late_layer_for(total_layers: usize) -> usize {
    (6 * total_layers + 5) / 10
}

/// Built-in optimized policies.
pub fn builtin_policy(model_id: &str) -> Result<PruningPolicy> {
    // (thresholds, prune ratios in %, early layer, total layers, patch px)
    let (thresholds, ratios_pct, early, total, patch): ([f64; 3], [f64; 4], usize, usize, usize) =
        match model_id.to_ascii_lowercase().as_str() {
            "qwen2.5-vl-7b" => ([1.69, 1.35, 1.17], [17.32, 24.86, 50.53, 59.66], 2, 28, 28),
            "qwen2.5-vl-3b" => ([2.06, 1.41, 0.89], [11.34, 16.79, 55.80, 61.28], 2, 36, 28),
            "qwen3-vl-8b" => ([1.61, 0.22, 0.06], [15.50, 22.37, 24.26, 80.60], 4, 36, 32),
            "qwen3-vl-4b" => ([4.92, 0.64, 0.55], [17.88, 20.66, 54.21, 74.67], 4, 36, 32),
            "internvl3-8b" => ([3.98, 0.70, 0.59], [15.86, 23.88, 30.68, 67.58], 2, 28, 28),
            _ => {
                return Err(Error::UnknownModel {
                    id: model_id.to_string(),
                    known: BUILTIN_MODELS.join(", "),
                })
            }
        };
    Ok(PruningPolicy {
        model_id: model_id.to_ascii_lowercase(),
        patch_h: patch,
        patch_w: patch,
        bins: DEFAULT_BINS,
        thresholds: thresholds.to_vec(),
        prune_ratios: ratios_pct.iter().map(|p| (p * 100.0).round() / 10_000.0).collect(),
        early_layer: early,
        late_layer: late_layer_for(total),
        total_layers: total,
        final_budget: FinalBudget::Fraction(0.25),
        pad_policy: PadPolicy::EdgeReplicate,
    })
}

impl PruningPolicy {
    /// Number of complexity levels `N`.
    pub fn num_levels(&self) -> usize {
        self.prune_ratios.len()
    }

    /// Threshold separating simple from complex images: `Θ_⌈|Θ|/2⌉`.
    pub fn simple_threshold(&self) -> f64 {
        let idx = self.thresholds.len().div_ceil(2);
        self.thresholds[idx.max(1) - 1]
    }

    /// Level `c` with `Θ_c ≤ H̄ < Θ_{c−1}`; a value exactly on a threshold goes to the
    /// more complex level.
    pub fn classify(&self, global_entropy: f64) -> LevelDecision {
        let level = 1 + self.thresholds.iter().filter(|&&t| global_entropy < t).count();
        let p = self.prune_ratios[level - 1];
        let is_simple = global_entropy <= self.simple_threshold();
        LevelDecision {
            level,
            stage1_prune_ratio: p,
            stage1_retention: 1.0 - p,
            stage2_layer: if is_simple { self.early_layer } else { self.late_layer },
            is_simple,
        }
    }

    /// Every violated invariant; empty when the policy is usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |field, message: &str| {
            out.push(Violation {
                field,
                message: message.to_string(),
            })
        };
        if self.patch_h == 0 || self.patch_w == 0 {
            push("patch_h/patch_w", "patch size must be >= 1");
        }
        if !(2..=256).contains(&self.bins) {
            push("bins", "bins must be in [2, 256]");
        }
        if self.thresholds.is_empty() {
            push("thresholds", "at least one threshold is required");
        }
        if self.thresholds.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            push("thresholds", "thresholds must be finite and > 0");
        }
        if self.thresholds.windows(2).any(|w| w[1] >= w[0]) {
            push("thresholds", "thresholds not strictly decreasing");
        }
        if self.prune_ratios.len() != self.thresholds.len() + 1 {
            push("prune_ratios", "expected exactly one more ratio than thresholds");
        }
        if self.prune_ratios.iter().any(|p| !(0.0..=1.0).contains(p)) {
            push("prune_ratios", "ratios must lie in [0, 1]");
        }
        if self.prune_ratios.windows(2).any(|w| w[1] < w[0]) {
            push("prune_ratios", "ratios not nondecreasing");
        }
        if !(1 <= self.early_layer && self.early_layer < self.late_layer && self.late_layer <= self.total_layers) {
            push(
                "early_layer/late_layer",
                "need 1 <= early_layer < late_layer <= total_layers",
            );
        }
        match self.final_budget {
            FinalBudget::Count(0) => push("final_budget", "count must be >= 1"),
            FinalBudget::Fraction(f) if !(f > 0.0 && f <= 1.0) => push("final_budget", "fraction must lie in (0, 1]"),
            _ => {}
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            return Ok(());
        }
        let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(invalid(format!("invalid policy: {}", msg.join("; "))))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let policy: Self = serde_json::from_str(text).map_err(|e| Error::json("policy", e))?;
        policy.ensure_valid()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("policy", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// A built-in model id, or a path to a policy JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            Self::load(path)
        } else {
            builtin_policy(spec)
        }
    }
}
