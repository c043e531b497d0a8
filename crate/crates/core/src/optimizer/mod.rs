//! Policy search: Bayesian optimization of entropy thresholds and per-level
//! pruning ratios against the joint reward
//! `F = α · accuracy + (1 − α) · Σ c_i · p_i`,
//! where `c_i` is the share of benchmark images landing in level `i`.
//!
//! Thresholds are sampled then sorted descending and ratios sorted ascending,
//! so every evaluated candidate is feasible. The operative result is the
//! highest-accuracy configuration (ties to the higher objective).

pub mod bo;
pub mod gp;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::SyntheticAttention;
use crate::entropy::{compute_entropy_map, EntropyMap};
use crate::error::{invalid, Error, Result};
use crate::pipeline::Pipeline;
use crate::policy::{FinalBudget, PruningPolicy};
use crate::synth::{BenchItem, SyntheticBenchmark, DEFAULT_GAIN};

use bo::BayesOpt;

pub const DEFAULT_ALPHA: f64 = 0.65;
pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_LEVELS: usize = 4;
pub const MIN_ITERATIONS: usize = 10;

/// Joint reward `α · accuracy + (1 − α) · Σ c_i · p_i`.
pub fn objective(accuracy: f64, level_fractions: &[f64], prune_ratios: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if level_fractions.len() != prune_ratios.len() {
        return Err(invalid("one level fraction per pruning ratio is required"));
    }
    let total: f64 = level_fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || level_fractions.iter().any(|c| *c < 0.0) {
        return Err(invalid(format!(
            "level fractions must be nonnegative and sum to 1, got {total}"
        )));
    }
    if prune_ratios.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("pruning ratios must lie in [0, 1]"));
    }
    Ok(alpha * accuracy + (1.0 - alpha) * efficiency_term(level_fractions, prune_ratios))
}

/// `Σ c_i · p_i`
pub fn efficiency_term(level_fractions: &[f64], prune_ratios: &[f64]) -> f64 {
    level_fractions.iter().zip(prune_ratios).map(|(c, p)| c * p).sum()
}

/// Box and ordering constraints of the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub num_levels: usize,
    pub threshold_bounds: (f64, f64),
    pub ratio_bounds: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            num_levels: DEFAULT_LEVELS,
            threshold_bounds: (0.01, 256f64.ln()),
            ratio_bounds: (0.0, 1.0),
        }
    }
}

/// Minimum gap between consecutive thresholds in unit coordinates.
const THRESHOLD_GAP: f64 = 1e-6;

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (tl, th) = self.threshold_bounds;
        let (rl, rh) = self.ratio_bounds;
        if self.num_levels < 2 {
            return Err(invalid("at least two complexity levels are required"));
        }
        if !(tl.is_finite() && th.is_finite() && tl > 0.0 && tl < th) {
            return Err(invalid(format!(
                "threshold bounds must satisfy 0 < low < high, got [{tl}, {th}]"
            )));
        }
        if !(0.0 <= rl && rl < rh && rh <= 1.0) {
            return Err(invalid(format!(
                "ratio bounds must satisfy 0 <= low < high <= 1, got [{rl}, {rh}]"
            )));
        }
        Ok(())
    }

    /// Encoded dimension: `N − 1` thresholds followed by `N` ratios.
    pub fn dim(&self) -> usize {
        2 * self.num_levels - 1
    }

    /// Projects a point of the unit cube onto the feasible set: thresholds
    /// strictly decreasing, ratios nondecreasing.
    pub fn repair(&self, unit: &mut [f64]) {
        let nt = self.num_levels - 1;
        let (t, r) = unit.split_at_mut(nt);
        for v in t.iter_mut().chain(r.iter_mut()) {
            *v = v.clamp(0.0, 1.0);
        }
        t.sort_by(|a, b| b.total_cmp(a));
        for i in 1..t.len() {
            if t[i] > t[i - 1] - THRESHOLD_GAP {
                t[i] = t[i - 1] - THRESHOLD_GAP;
            }
        }
        if let Some(&last) = t.last() {
            if last < 0.0 {
                let shift = -last;
                for v in t.iter_mut() {
                    *v += shift;
                }
            }
        }
        r.sort_by(f64::total_cmp);
    }

    pub fn decode(&self, unit: &[f64]) -> Candidate {
        let nt = self.num_levels - 1;
        let (tl, th) = self.threshold_bounds;
        let (rl, rh) = self.ratio_bounds;
        Candidate {
            thresholds: unit[..nt].iter().map(|u| tl + (th - tl) * u).collect(),
            prune_ratios: unit[nt..]
                .iter()
                .map(|u| (rl + (rh - rl) * u).clamp(0.0, 1.0))
                .collect(),
        }
    }

    pub fn is_feasible(&self, c: &Candidate) -> bool {
        c.thresholds.len() + 1 == self.num_levels
            && c.prune_ratios.len() == self.num_levels
            && c.thresholds.windows(2).all(|w| w[1] < w[0])
            && c.thresholds.iter().all(|t| *t > 0.0)
            && c.prune_ratios.windows(2).all(|w| w[0] <= w[1])
            && c.prune_ratios.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub thresholds: Vec<f64>,
    pub prune_ratios: Vec<f64>,
}

impl Candidate {
    pub fn to_policy(&self, template: &PruningPolicy) -> PruningPolicy {
        PruningPolicy {
            thresholds: self.thresholds.clone(),
            prune_ratios: self.prune_ratios.clone(),
            ..template.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub candidate: Candidate,
    pub accuracy: f64,
    pub level_fractions: Vec<f64>,
    pub efficiency_term: f64,
    pub objective: f64,
    /// Mean Stage-2 layer over the benchmark.
    pub mean_layer: f64,
}

/// Benchmark with entropy maps and attention sources prepared once, reused for every candidate.
pub struct Evaluator {
    template: PruningPolicy,
    final_budget: FinalBudget,
    alpha: f64,
    items: Vec<(EntropyMap, BenchItem, SyntheticAttention)>,
}

impl Evaluator {
    /// `template` supplies patch size, bins and layers. The default budget keeps
    /// every token after Stage 1 so accuracy measures Stage-1 loss only.
    pub fn new(bench: &SyntheticBenchmark, template: &PruningPolicy, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        let items = bench
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                if (item.geometry.patch_h, item.geometry.patch_w) != (template.patch_h, template.patch_w) {
                    return Err(invalid("benchmark patch grid differs from the policy patch size"));
                }
                let gray = crate::image::to_luminance(&item.image)?;
                let map = compute_entropy_map(&gray, item.geometry, template.bins)?;
                Ok((map, item.clone(), item.attention(bench.attention_seed(i), DEFAULT_GAIN)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            template: template.clone(),
            final_budget: FinalBudget::Fraction(1.0),
            alpha,
            items,
        })
    }

    pub fn with_final_budget(mut self, budget: FinalBudget) -> Self {
        self.final_budget = budget;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn template(&self) -> &PruningPolicy {
        &self.template
    }

    /// Runs the pipeline on every benchmark item under `candidate`.
    pub fn evaluate(&self, candidate: &Candidate) -> Result<Observation> {
        let policy = candidate.to_policy(&self.template);
        let pipeline = Pipeline::new(&policy)?.with_final_budget(self.final_budget);
        let per_item: Vec<(f64, usize, usize)> = self
            .items
            .par_iter()
            .map(|(map, item, attn)| {
                let r = pipeline.run_on_map(map, attn)?;
                Ok((item.recall(&r.stage2)?, r.decision.level, r.decision.stage2_layer))
            })
            .collect::<Result<_>>()?;

        let n = per_item.len() as f64;
        let mut counts = vec![0usize; policy.num_levels()];
        let mut accuracy = 0.0;
        let mut layers = 0.0;
        for &(acc, level, layer) in &per_item {
            accuracy += acc;
            counts[level - 1] += 1;
            layers += layer as f64;
        }
        accuracy /= n;
        let level_fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let objective = objective(accuracy, &level_fractions, &candidate.prune_ratios, self.alpha)?;
        Ok(Observation {
            candidate: candidate.clone(),
            accuracy,
            efficiency_term: efficiency_term(&level_fractions, &candidate.prune_ratios),
            level_fractions,
            objective,
            mean_layer: layers / n,
        })
    }
}

/// One evaluated candidate with running bests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: String,
    pub observation: Observation,
    pub best_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_by_accuracy: Observation,
    pub best_by_objective: Observation,
    pub trace: Vec<TraceRow>,
}

/// Highest accuracy, ties to the higher objective, then the earlier evaluation.
fn better_by_accuracy(a: &Observation, b: &Observation) -> bool {
    a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.objective > b.objective)
}

impl SearchResult {
    fn from_trace(trace: Vec<TraceRow>) -> Result<Self> {
        let first = trace.first().ok_or_else(|| invalid("empty search trace"))?;
        let mut by_acc = &first.observation;
        let mut by_obj = &first.observation;
        for row in &trace[1..] {
            let o = &row.observation;
            if better_by_accuracy(o, by_acc) {
                by_acc = o;
            }
            if o.objective > by_obj.objective {
                by_obj = o;
            }
        }
        Ok(Self {
            best_by_accuracy: by_acc.clone(),
            best_by_objective: by_obj.clone(),
            trace,
        })
    }

    /// Best objective reached by the search.
    pub fn best_objective(&self) -> f64 {
        self.best_by_objective.objective
    }

    /// CSV with one row per evaluation: thresholds `t1..`, ratios `p1..`, level shares `c1..`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.trace.first() else {
            return Ok(());
        };
        let n = first.observation.candidate.prune_ratios.len();
        let mut header = vec!["iteration".to_string(), "phase".to_string()];
        header.extend((1..n).map(|i| format!("t{i}")));
        header.extend((1..=n).map(|i| format!("p{i}")));
        header.extend((1..=n).map(|i| format!("c{i}")));
        header.extend(
            [
                "accuracy",
                "efficiency_term",
                "objective",
                "mean_layer",
                "best_objective",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        w.write_record(&header)?;
        for row in &self.trace {
            let o = &row.observation;
            let mut rec = vec![row.iteration.to_string(), row.phase.clone()];
            rec.extend(o.candidate.thresholds.iter().map(|v| v.to_string()));
            rec.extend(o.candidate.prune_ratios.iter().map(|v| v.to_string()));
            rec.extend(o.level_fractions.iter().map(|v| v.to_string()));
            rec.extend(
                [
                    o.accuracy,
                    o.efficiency_term,
                    o.objective,
                    o.mean_layer,
                    row.best_objective,
                ]
                .iter()
                .map(|v| v.to_string()),
            );
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn push_row(trace: &mut Vec<TraceRow>, phase: &str, observation: Observation) {
    let best = trace
        .last()
        .map_or(f64::NEG_INFINITY, |r| r.best_objective)
        .max(observation.objective);
    trace.push(TraceRow {
        iteration: trace.len() + 1,
        phase: phase.to_string(),
        observation,
        best_objective: best,
    });
}

/// Bayesian optimization: a Latin-hypercube seed phase followed by GP/EI proposals.
pub fn run(space: &SearchSpace, evaluator: &Evaluator, iterations: usize, seed: u64) -> Result<SearchResult> {
    space.validate()?;
    if iterations < MIN_ITERATIONS {
        return Err(invalid(format!(
            "iterations must be >= {MIN_ITERATIONS}, got {iterations}"
        )));
    }
    let initial = (iterations / 10).max(5);
    let mut bo = BayesOpt::new(space.dim(), initial, seed, |u: &mut [f64]| space.repair(u));
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (unit, phase) = bo.propose();
        let candidate = space.decode(&unit);
        debug_assert!(space.is_feasible(&candidate));
        let obs = evaluator.evaluate(&candidate)?;
        bo.observe(unit, obs.objective);
        log::debug!("{} {:?} F={:.4}", phase.as_str(), candidate, obs.objective);
        push_row(&mut trace, phase.as_str(), obs);
    }
    SearchResult::from_trace(trace)
}

/// Uniform random feasible candidates, for baseline comparison.
pub fn random_search(space: &SearchSpace, evaluator: &Evaluator, iterations: usize, seed: u64) -> Result<SearchResult> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut unit: Vec<f64> = (0..space.dim()).map(|_| rng.random()).collect();
        space.repair(&mut unit);
        let obs = evaluator.evaluate(&space.decode(&unit))?;
        push_row(&mut trace, "random", obs);
    }
    SearchResult::from_trace(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::builtin_policy;
    use crate::synth::BenchSpec;

    fn evaluator(alpha: f64) -> Evaluator {
        let bench = SyntheticBenchmark::generate(
            &BenchSpec {
                count: 24,
                ..BenchSpec::default()
            },
            5,
        )
        .unwrap();
        Evaluator::new(&bench, &builtin_policy("qwen2.5-vl-7b").unwrap(), alpha).unwrap()
    }

    #[test]
    fn objective_examples() {
        let f = objective(0.9, &[0.25; 4], &[0.2, 0.3, 0.4, 0.5], 0.65).unwrap();
        assert!((f - 0.7075).abs() < 1e-12);
        assert_eq!(objective(0.42, &[0.5, 0.5], &[0.1, 0.9], 1.0).unwrap(), 0.42);
        assert_eq!(objective(0.42, &[0.25; 4], &[1.0; 4], 0.0).unwrap(), 1.0);
    }

    #[test]
    fn objective_rejects_bad_inputs() {
        assert!(objective(0.9, &[0.5, 0.4], &[0.1, 0.2], 0.5).is_err());
        assert!(objective(0.9, &[0.5, 0.5], &[0.1, 1.2], 0.5).is_err());
        assert!(objective(0.9, &[0.5, 0.5], &[0.1, 0.2], 1.5).is_err());
    }

    #[test]
    fn repair_yields_feasible_candidates() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let mut u: Vec<f64> = (0..space.dim()).map(|_| rng.random_range(-0.2..1.2)).collect();
            space.repair(&mut u);
            assert!(space.is_feasible(&space.decode(&u)));
        }
        let mut saturated = vec![1.0; space.dim()];
        space.repair(&mut saturated);
        assert!(space.is_feasible(&space.decode(&saturated)));
        let mut zeros = vec![0.0; space.dim()];
        space.repair(&mut zeros);
        assert!(space.is_feasible(&space.decode(&zeros)));
    }

    #[test]
    fn no_pruning_keeps_everything() {
        let ev = evaluator(0.65);
        let obs = ev
            .evaluate(&Candidate {
                thresholds: vec![3.0, 2.0, 1.0],
                prune_ratios: vec![0.0; 4],
            })
            .unwrap();
        assert_eq!(obs.accuracy, 1.0);
        assert_eq!(obs.efficiency_term, 0.0);
        assert!((obs.level_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ev = evaluator(0.65);
        let c = Candidate {
            thresholds: vec![3.0, 1.5, 0.5],
            prune_ratios: vec![0.1, 0.2, 0.5, 0.7],
        };
        assert_eq!(ev.evaluate(&c).unwrap(), ev.evaluate(&c).unwrap());
    }

    #[test]
    fn short_runs_rejected() {
        let ev = evaluator(0.65);
        assert!(run(&SearchSpace::default(), &ev, 5, 1).is_err());
    }

    #[test]
    fn run_trace_invariants() {
        let ev = evaluator(0.65);
        let space = SearchSpace::default();
        let res = run(&space, &ev, 20, 3).unwrap();
        assert_eq!(res.trace.len(), 20);
        let mut best = f64::NEG_INFINITY;
        for row in &res.trace {
            let o = &row.observation;
            assert!(space.is_feasible(&o.candidate));
            assert_eq!(o.objective, 0.65 * o.accuracy + 0.35 * o.efficiency_term);
            best = best.max(o.objective);
            assert_eq!(row.best_objective, best);
        }
        assert!(res
            .trace
            .iter()
            .all(|r| r.observation.accuracy <= res.best_by_accuracy.accuracy));
        assert_eq!(res, run(&space, &ev, 20, 3).unwrap());

        let mut buf = Vec::new();
        res.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with("iteration,phase,t1,t2,t3,p1,p2,p3,p4,c1"));
    }
}
