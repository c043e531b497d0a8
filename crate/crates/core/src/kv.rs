//! KV-cache geometry, retrospective eviction and analytical prefill cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-layer cache geometry of a decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvGeometry {
    pub num_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub bytes_per_elem: usize,
    pub hidden_dim: usize,
}

impl KvGeometry {
    /// Bytes cached per token per layer (keys and values).
    pub fn bytes_per_token_layer(&self) -> u64 {
        (2 * self.kv_heads * self.head_dim * self.bytes_per_elem) as u64
    }
}

/// Decoder geometry of the built-in models, 16-bit cache entries.
pub fn kv_geometry(model_id: &str) -> Result<KvGeometry> {
    let (num_layers, kv_heads, head_dim, hidden_dim) = match model_id.to_ascii_lowercase().as_str() {
        "qwen2.5-vl-7b" | "internvl3-8b" => (28, 4, 128, 3584),
        "qwen2.5-vl-3b" => (36, 2, 128, 2048),
        "qwen3-vl-8b" => (36, 8, 128, 4096),
        "qwen3-vl-4b" => (36, 8, 128, 2560),
        _ => {
            return Err(Error::UnknownModel {
                id: model_id.to_string(),
                known: crate::policy::BUILTIN_MODELS.join(", "),
            })
        }
    };
    Ok(KvGeometry {
        num_layers,
        kv_heads,
        head_dim,
        bytes_per_elem: 2,
        hidden_dim,
    })
}

/// Cache contents: vision tokens retained per layer plus text tokens, which are never evicted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheModel {
    pub geometry: KvGeometry,
    pub per_layer_tokens: Vec<usize>,
    pub text_tokens: usize,
}

impl KvCacheModel {
    pub fn uniform(geometry: KvGeometry, vision_tokens: usize, text_tokens: usize) -> Self {
        Self {
            geometry,
            per_layer_tokens: vec![vision_tokens; geometry.num_layers],
            text_tokens,
        }
    }

    /// Σ_l 2 · kv_heads · head_dim · tokens_l · bytes_per_elem.
    pub fn kv_bytes(&self) -> u64 {
        let per = self.geometry.bytes_per_token_layer();
        self.per_layer_tokens
            .iter()
            .map(|&n| (n + self.text_tokens) as u64 * per)
            .sum()
    }

    /// Removes the evicted vision tokens from layers `1..=k`; layers above `k`
    /// only ever hold the survivors.
    pub fn apply_eviction(&self, plan: &EvictionPlan, pre_stage2_tokens: usize) -> Result<Self> {
        let evicted = plan.evict_indices.len();
        if plan.upto_layer > self.per_layer_tokens.len() {
            return Err(Error::InvalidState(format!(
                "eviction up to layer {} on a {}-layer cache",
                plan.upto_layer,
                self.per_layer_tokens.len()
            )));
        }
        let survivors = pre_stage2_tokens
            .checked_sub(evicted)
            .ok_or_else(|| Error::InvalidState(format!("evicting {evicted} of {pre_stage2_tokens} stage-1 tokens")))?;
        let mut out = self.clone();
        for (l, n) in out.per_layer_tokens.iter_mut().enumerate() {
            if l < plan.upto_layer {
                *n = n.checked_sub(evicted).ok_or_else(|| {
                    Error::InvalidState(format!("layer {} holds {n} tokens, cannot evict {evicted}", l + 1))
                })?;
            } else {
                *n = (*n).min(survivors);
            }
        }
        Ok(out)
    }
}

/// Stage-1 tokens dropped by Stage 2, and the deepest layer whose cache already holds them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub evict_indices: Vec<usize>,
    pub upto_layer: usize,
}

impl EvictionPlan {
    /// `stage1 \ stage2`; both inputs sorted ascending.
    pub fn between(stage1: &[usize], stage2: &[usize], upto_layer: usize) -> Self {
        let mut evict = Vec::with_capacity(stage1.len().saturating_sub(stage2.len()));
        let mut j = 0;
        for &i in stage1 {
            while j < stage2.len() && stage2[j] < i {
                j += 1;
            }
            if j >= stage2.len() || stage2[j] != i {
                evict.push(i);
            }
        }
        Self {
            evict_indices: evict,
            upto_layer,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.evict_indices.is_empty()
    }
}

/// Relative prefill FLOPs: Σ_l (2h·n_l² + 12h²·n_l) for hidden width `h`.
///
/// The quadratic term covers the attention score and value products, the linear
/// term the QKV/output projections and a 4x MLP. This is a relative cost model,
/// not wall-clock time.
pub fn prefill_cost(tokens_by_layer: &[usize], hidden_dim: usize) -> f64 {
    let h = hidden_dim as f64;
    let (a, b) = (2.0 * h, 12.0 * h * h);
    tokens_by_layer
        .iter()
        .map(|&n| {
            let n = n as f64;
            a * n * n + b * n
        })
        .sum()
}

/// Sequence length seen by each layer during prefill: `text + stage1` through
/// layer `k`, `text + final` above it.
pub fn pruned_schedule(num_layers: usize, text: usize, stage1: usize, final_count: usize, k: usize) -> Vec<usize> {
    (1..=num_layers)
        .map(|l| text + if l <= k { stage1 } else { final_count })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub kv: f64,
    pub prefill: f64,
}

/// Analytical efficiency of one pruning configuration against the unpruned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub original_tokens: usize,
    pub text_tokens: usize,
    pub stage1_tokens: usize,
    pub final_tokens: usize,
    pub stage2_layer: usize,
    pub tokens_by_layer: Vec<usize>,
    /// Cache after retrospective eviction.
    pub kv_bytes: u64,
    /// Cache at the Stage-2 layer, before eviction.
    pub kv_bytes_peak: u64,
    pub kv_bytes_base: u64,
    pub prefill_flops: f64,
    pub prefill_flops_base: f64,
    pub speedup_vs_base: Speedup,
}

#[derive(Debug, Serialize)]
struct CostRow<'a> {
    label: &'a str,
    original_tokens: usize,
    text_tokens: usize,
    stage1_tokens: usize,
    final_tokens: usize,
    stage2_layer: usize,
    kv_bytes: u64,
    kv_bytes_peak: u64,
    kv_bytes_base: u64,
    kv_mib: f64,
    kv_mib_base: f64,
    prefill_flops: f64,
    prefill_flops_base: f64,
    kv_reduction: f64,
    prefill_speedup: f64,
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

impl CostReport {
    pub fn new(
        label: impl Into<String>,
        geometry: KvGeometry,
        text_tokens: usize,
        original_tokens: usize,
        stage1_tokens: usize,
        final_tokens: usize,
        stage2_layer: usize,
    ) -> Result<Self> {
        let base = KvCacheModel::uniform(geometry, original_tokens, text_tokens);
        let k = stage2_layer.min(geometry.num_layers);
        let staged = KvCacheModel {
            geometry,
            per_layer_tokens: (1..=geometry.num_layers)
                .map(|l| if l <= k { stage1_tokens } else { final_tokens })
                .collect(),
            text_tokens,
        };
        let plan = EvictionPlan {
            evict_indices: (0..stage1_tokens.saturating_sub(final_tokens)).collect(),
            upto_layer: k,
        };
        let after = staged.apply_eviction(&plan, stage1_tokens)?;
        let tokens_by_layer = pruned_schedule(geometry.num_layers, text_tokens, stage1_tokens, final_tokens, k);
        let base_schedule = vec![text_tokens + original_tokens; geometry.num_layers];
        let prefill_flops = prefill_cost(&tokens_by_layer, geometry.hidden_dim);
        let prefill_flops_base = prefill_cost(&base_schedule, geometry.hidden_dim);
        let kv_bytes = after.kv_bytes();
        let kv_bytes_base = base.kv_bytes();
        Ok(Self {
            label: label.into(),
            original_tokens,
            text_tokens,
            stage1_tokens,
            final_tokens,
            stage2_layer: k,
            tokens_by_layer,
            kv_bytes,
            kv_bytes_peak: staged.kv_bytes(),
            kv_bytes_base,
            prefill_flops,
            prefill_flops_base,
            speedup_vs_base: Speedup {
                kv: ratio(kv_bytes_base as f64, kv_bytes as f64),
                prefill: ratio(prefill_flops_base, prefill_flops),
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("cost report", e))
    }

    /// One CSV row per report.
    pub fn write_csv<W: std::io::Write>(reports: &[CostReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            w.serialize(CostRow {
                label: &r.label,
                original_tokens: r.original_tokens,
                text_tokens: r.text_tokens,
                stage1_tokens: r.stage1_tokens,
                final_tokens: r.final_tokens,
                stage2_layer: r.stage2_layer,
                kv_bytes: r.kv_bytes,
                kv_bytes_peak: r.kv_bytes_peak,
                kv_bytes_base: r.kv_bytes_base,
                kv_mib: mib(r.kv_bytes),
                kv_mib_base: mib(r.kv_bytes_base),
                prefill_flops: r.prefill_flops,
                prefill_flops_base: r.prefill_flops_base,
                kv_reduction: r.speedup_vs_base.kv,
                prefill_speedup: r.speedup_vs_base.prefill,
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn ratio(base: f64, value: f64) -> f64 {
    if value == 0.0 {
        f64::INFINITY
    } else {
        base / value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qwen7b() -> KvGeometry {
        kv_geometry("qwen2.5-vl-7b").unwrap()
    }

    #[test]
    fn full_cache_bytes() {
        let m = KvCacheModel::uniform(qwen7b(), 16_384, 0);
        assert_eq!(m.kv_bytes(), 939_524_096);
        assert!((mib(m.kv_bytes()) - 896.0).abs() < 1e-9);
    }

    #[test]
    fn empty_cache_is_zero() {
        assert_eq!(KvCacheModel::uniform(qwen7b(), 0, 0).kv_bytes(), 0);
    }

    #[test]
    fn pruned_cache_bytes() {
        let m = KvCacheModel::uniform(qwen7b(), 2_458, 0);
        assert_eq!(m.kv_bytes(), 2_458 * 28 * 2048);
        assert!((mib(m.kv_bytes()) - 134.4).abs() < 0.05);
    }

    #[test]
    fn eviction_example() {
        let g = KvGeometry {
            num_layers: 4,
            kv_heads: 1,
            head_dim: 1,
            bytes_per_elem: 1,
            hidden_dim: 1,
        };
        let m = KvCacheModel::uniform(g, 10, 3);
        let plan = EvictionPlan {
            evict_indices: vec![0, 1, 2, 3, 4, 5],
            upto_layer: 2,
        };
        let after = m.apply_eviction(&plan, 10).unwrap();
        assert_eq!(after.per_layer_tokens, vec![4, 4, 4, 4]);
        assert_eq!(after.text_tokens, 3);

        let empty = EvictionPlan {
            evict_indices: vec![],
            upto_layer: 2,
        };
        assert_eq!(m.apply_eviction(&empty, 10).unwrap(), m);

        let too_many = EvictionPlan {
            evict_indices: (0..11).collect(),
            upto_layer: 2,
        };
        assert!(m.apply_eviction(&too_many, 10).is_err());
        let too_deep = EvictionPlan {
            evict_indices: vec![],
            upto_layer: 5,
        };
        assert!(m.apply_eviction(&too_deep, 10).is_err());
    }

    #[test]
    fn plan_is_set_difference() {
        let p = EvictionPlan::between(&[1, 3, 4, 7, 9], &[3, 9], 17);
        assert_eq!(p.evict_indices, vec![1, 4, 7]);
        assert_eq!(p.upto_layer, 17);
    }

    #[test]
    fn two_segment_bytes_match_per_layer_sum() {
        let g = qwen7b();
        let (m, s1, fin, k) = (16_384usize, 12_311usize, 2_458usize, 17usize);
        let r = CostReport::new("x", g, 0, m, s1, fin, k).unwrap();
        // per-layer brute force: each layer ends with the final count once layers <= k are evicted
        let mut brute = 0u64;
        for l in 1..=g.num_layers {
            let mut n = if l <= k { s1 } else { fin };
            if l <= k {
                n -= s1 - fin;
            }
            brute += n as u64 * 2 * 4 * 128 * 2;
        }
        assert_eq!(r.kv_bytes, brute);
        let peak = (k * s1 + (g.num_layers - k) * fin) as u64 * g.bytes_per_token_layer();
        assert_eq!(r.kv_bytes_peak, peak);
    }

    #[test]
    fn quadratic_term_scales_by_four() {
        let h = 64;
        let n = vec![10, 20, 30];
        let n2: Vec<usize> = n.iter().map(|x| x * 2).collect();
        let quad = |t: &[usize]| prefill_cost(t, h) - t.iter().map(|&x| 12.0 * (h * h) as f64 * x as f64).sum::<f64>();
        assert!((quad(&n2) / quad(&n) - 4.0).abs() < 1e-12);
        assert_eq!(prefill_cost(&[0, 0], h), 0.0);
    }

    #[test]
    fn pruning_speedup_grows_with_tokens() {
        let g = qwen7b();
        let mut last = 0.0;
        for m in [1_024usize, 4_096, 16_384, 65_536] {
            let s1 = (m as f64 * 0.75) as usize;
            let fin = (m as f64 * 0.15).round() as usize;
            let r = CostReport::new("x", g, 64, m, s1, fin, 17).unwrap();
            assert!(r.speedup_vs_base.prefill > 1.0);
            assert!(r.speedup_vs_base.prefill > last);
            last = r.speedup_vs_base.prefill;
        }
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let g = qwen7b();
        let reports = vec![
            CostReport::new("a", g, 0, 100, 80, 20, 2).unwrap(),
            CostReport::new("b", g, 0, 200, 160, 40, 17).unwrap(),
        ];
        let mut buf = Vec::new();
        CostReport::write_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("label,"));
    }

    proptest! {
        #[test]
        fn bytes_strictly_monotone(tokens in prop::collection::vec(1usize..1000, 28), layer in 0usize..28) {
            let m = KvCacheModel { geometry: qwen7b(), per_layer_tokens: tokens, text_tokens: 5 };
            let mut smaller = m.clone();
            smaller.per_layer_tokens[layer] -= 1;
            prop_assert!(smaller.kv_bytes() < m.kv_bytes());
        }

        #[test]
        fn eviction_never_grows(s1 in 1usize..500, frac in 0.0f64..1.0, k in 1usize..=28) {
            let fin = ((s1 as f64 * frac) as usize).max(1).min(s1);
            let m = KvCacheModel::uniform(qwen7b(), s1, 0);
            let plan = EvictionPlan { evict_indices: (0..s1 - fin).collect(), upto_layer: k };
            let after = m.apply_eviction(&plan, s1).unwrap();
            for (a, b) in after.per_layer_tokens.iter().zip(&m.per_layer_tokens) {
                prop_assert!(a <= b);
                prop_assert_eq!(*a, fin);
            }
        }
    }
}
