use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use erase_core::optimizer::{self, Evaluator, SearchResult, SearchSpace};
use erase_core::policy::BUILTIN_MODELS;
use erase_core::report::{scaling_table, summarize, write_scaling_csv};
use erase_core::synth::BenchSpec;
use erase_core::{
    kv_geometry, select_stage1, AttentionProvider, CostReport, FileAttention, FinalBudget, ImageBuffer, Pipeline,
    PipelineSummary, PruningPolicy, RelevanceScores, Stage, SyntheticAttention, SyntheticBenchmark, TokenSelection,
};
use serde::Serialize;

use crate::{
    AnalyzeArgs, BenchArgs, CmdResult, Failure, OptimizeArgs, PipelineArgs, PolicyArgs, PruneArgs, ReportArgs,
};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn parse_patch_size(s: &str) -> Result<(usize, usize), Failure> {
    let parse = |t: &str| t.trim().parse::<usize>().ok().filter(|v| *v > 0);
    let dims = match s.split_once(['x', 'X']) {
        Some((h, w)) => parse(h).zip(parse(w)),
        None => parse(s).map(|v| (v, v)),
    };
    dims.ok_or_else(|| {
        usage(format!(
            "invalid --patch-size '{s}', expected HxW with positive integers"
        ))
    })
}

fn parse_budget(s: &str) -> Result<FinalBudget, Failure> {
    FinalBudget::parse(s).map_err(|e| usage(format!("invalid --k-final '{s}': {e}")))
}

enum AttnSource {
    Synthetic(u64),
    Dump(PathBuf),
}

fn parse_attn(s: &str, default_seed: u64) -> Result<AttnSource, Failure> {
    match s.split_once(':') {
        None if s == "synthetic" => Ok(AttnSource::Synthetic(default_seed)),
        Some(("synthetic", seed)) => seed
            .parse()
            .map(AttnSource::Synthetic)
            .map_err(|_| usage(format!("invalid synthetic seed '{seed}'"))),
        Some(("dump", dir)) if !dir.is_empty() => Ok(AttnSource::Dump(PathBuf::from(dir))),
        _ => Err(usage(format!(
            "invalid --attn '{s}', expected synthetic[:<seed>] or dump:<dir>"
        ))),
    }
}

/// Human-readable origin of a policy.
fn provenance(spec: &str) -> String {
    if !Path::new(spec).exists() && BUILTIN_MODELS.contains(&spec) {
        format!("built-in (published optimized thresholds for {spec})")
    } else {
        format!("file {spec}")
    }
}

fn load_policy(args: &PolicyArgs) -> Result<PruningPolicy, Failure> {
    let patch = args.patch_size.as_deref().map(parse_patch_size).transpose()?;
    if let Some(b) = args.bins {
        if !(1..=256).contains(&b) {
            return Err(usage(format!("--bins must lie in 1..=256, got {b}")));
        }
    }
    let mut policy =
        PruningPolicy::resolve(&args.policy).with_context(|| format!("loading policy '{}'", args.policy))?;
    if let Some((h, w)) = patch {
        policy.patch_h = h;
        policy.patch_w = w;
    }
    if let Some(b) = args.bins {
        policy.bins = b;
    }
    policy.ensure_valid()?;
    Ok(policy)
}

fn open_image(path: &Path) -> Result<ImageBuffer, Failure> {
    Ok(ImageBuffer::open(path)?)
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(value).context("serializing output")? + "\n")
}

pub fn analyze(args: AnalyzeArgs) -> CmdResult {
    let policy = load_policy(&args.policy)?;
    let img = open_image(&args.image)?;
    let map = erase_core::pipeline::entropy_map_for(&img, &policy)?;
    let split = args.split.unwrap_or(map.global);
    println!("global_entropy: {:.6}", map.global);
    println!(
        "tokens: {} ({}x{} patches)",
        map.len(),
        map.geometry.rows,
        map.geometry.cols
    );

    if let Some(out) = &args.out {
        create_out(out)?;
        write(&out.join("entropy_map.json"), map.to_json()? + "\n")?;
        map.save_heatmap(&out.join("heatmap.png"))?;
        let high: Vec<usize> = (0..map.len()).filter(|&i| map.values[i] > split).collect();
        let low: Vec<usize> = (0..map.len()).filter(|&i| map.values[i] <= split).collect();
        for (name, kept) in [("mask_high.png", high), ("mask_low.png", low)] {
            TokenSelection::new(map.len(), kept, Stage::Stage1)?.save_mask(&map.geometry, &out.join(name))?;
        }
        log::info!("wrote analysis to {}", out.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct PruneOutput<'a> {
    model_id: &'a str,
    global_entropy: f64,
    decision: erase_core::LevelDecision,
    original_count: usize,
    stage1_count: usize,
    kept_indices: &'a [usize],
}

pub fn prune(args: PruneArgs) -> CmdResult {
    let policy = load_policy(&args.policy)?;
    let img = open_image(&args.image)?;
    let map = erase_core::pipeline::entropy_map_for(&img, &policy)?;
    let decision = policy.classify(map.global);
    let stage1 = select_stage1(&map, decision.stage1_retention)?;
    println!("provenance: {}", provenance(&args.policy.policy));
    println!(
        "global_entropy: {:.6}  level: {}  prune_ratio: {:.4}  kept: {}/{}",
        map.global,
        decision.level,
        decision.stage1_prune_ratio,
        stage1.len(),
        map.len()
    );
    if let Some(out) = &args.out {
        create_out(out)?;
        let output = PruneOutput {
            model_id: &policy.model_id,
            global_entropy: map.global,
            decision,
            original_count: map.len(),
            stage1_count: stage1.len(),
            kept_indices: &stage1.kept,
        };
        write(&out.join("stage1.json"), to_json(&output)?)?;
        stage1.save_mask(&map.geometry, &out.join("mask_stage1.png"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PipelineOutput<'a> {
    provenance: String,
    #[serde(flatten)]
    summary: PipelineSummary,
    stage2_scores: Option<&'a RelevanceScores>,
    cost: Option<CostReport>,
}

pub fn pipeline(args: PipelineArgs) -> CmdResult {
    let policy = load_policy(&args.policy)?;
    let budget = args.k_final.as_deref().map(parse_budget).transpose()?;
    let source = parse_attn(&args.attn, args.seed)?;
    let img = open_image(&args.image)?;

    let provider: Box<dyn AttentionProvider> = match &source {
        AttnSource::Synthetic(seed) => Box::new(SyntheticAttention::new(*seed)),
        AttnSource::Dump(dir) => Box::new(FileAttention::open(dir)?),
    };
    let mut pipe = Pipeline::new(&policy)?;
    if let Some(b) = budget {
        pipe = pipe.with_final_budget(b);
    }
    let map = erase_core::pipeline::entropy_map_for(&img, &policy)?;
    let result = pipe.run_on_map(&map, provider.as_ref())?;
    let summary = result.summary(&policy.model_id);

    let cost = match kv_geometry(&policy.model_id) {
        Ok(g) => Some(CostReport::new(
            args.image.display().to_string(),
            g,
            args.text_tokens,
            summary.original_count,
            summary.stage1_count,
            summary.stage2_count,
            summary.stage2_layer,
        )?),
        Err(e) => {
            log::warn!("no KV geometry, cost report skipped: {e}");
            None
        }
    };
    let output = PipelineOutput {
        provenance: provenance(&args.policy.policy),
        summary,
        stage2_scores: result.scores.as_ref(),
        cost,
    };
    let json = to_json(&output)?;

    match &args.out {
        None => print!("{json}"),
        Some(out) => {
            create_out(out)?;
            write(&out.join("result.json"), &json)?;
            if let Some(c) = &output.cost {
                write(&out.join("cost.json"), c.to_json()? + "\n")?;
            }
            result.stage1.save_mask(&map.geometry, &out.join("mask_stage1.png"))?;
            result.stage2.save_mask(&map.geometry, &out.join("mask_stage2.png"))?;
            let s = &output.summary;
            println!("provenance: {}", output.provenance);
            println!(
                "global_entropy: {:.6}  level: {}  layer: {}  stage1: {}/{}  final: {}  bypassed: {}",
                s.global_entropy,
                s.decision.level,
                s.stage2_layer,
                s.stage1_count,
                s.original_count,
                s.stage2_count,
                s.bypassed
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    alpha: f64,
    iterations: usize,
    seed: u64,
    benchmark_items: usize,
    /// Operative result: highest accuracy, ties to the higher objective.
    selected: &'a optimizer::Observation,
    best_by_objective: &'a optimizer::Observation,
}

pub fn optimize(args: OptimizeArgs) -> CmdResult {
    if args.iterations < optimizer::MIN_ITERATIONS {
        return Err(usage(format!(
            "--iterations must be at least {}, got {}",
            optimizer::MIN_ITERATIONS,
            args.iterations
        )));
    }
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(usage(format!("--alpha must lie in [0, 1], got {}", args.alpha)));
    }
    if args.levels < 2 {
        return Err(usage(format!("--levels must be at least 2, got {}", args.levels)));
    }
    if args.bench.is_none() && args.bench_count == 0 {
        return Err(usage("--bench-count must be at least 1"));
    }
    let budget = args.k_final.as_deref().map(parse_budget).transpose()?;
    let template = load_policy(&args.policy)?;

    let bench = match &args.bench {
        Some(dir) => SyntheticBenchmark::load(dir)?,
        None => SyntheticBenchmark::generate(
            &BenchSpec {
                count: args.bench_count,
                patch: template.patch_h,
                ..BenchSpec::default()
            },
            args.seed,
        )?,
    };
    let space = SearchSpace {
        num_levels: args.levels,
        ..SearchSpace::default()
    };
    let mut evaluator = Evaluator::new(&bench, &template, args.alpha)?;
    if let Some(b) = budget {
        evaluator = evaluator.with_final_budget(b);
    }
    let result: SearchResult = optimizer::run(&space, &evaluator, args.iterations, args.seed)?;

    let sel = &result.best_by_accuracy;
    println!(
        "selected (highest accuracy): thresholds {:?} ratios {:?}",
        rounded(&sel.candidate.thresholds),
        rounded(&sel.candidate.prune_ratios)
    );
    println!(
        "accuracy {:.4}  efficiency {:.4}  objective {:.4}  mean layer {:.2}",
        sel.accuracy, sel.efficiency_term, sel.objective, sel.mean_layer
    );
    println!("best objective: {:.4}", result.best_objective());

    if let Some(out) = &args.out {
        create_out(out)?;
        let mut csv = Vec::new();
        result.write_trace_csv(&mut csv)?;
        write(&out.join("trace.csv"), csv)?;
        write(
            &out.join("best_by_accuracy.json"),
            result.best_by_accuracy.candidate.to_policy(&template).to_json()? + "\n",
        )?;
        write(
            &out.join("best_by_objective.json"),
            result.best_by_objective.candidate.to_policy(&template).to_json()? + "\n",
        )?;
        let summary = SearchOutput {
            alpha: args.alpha,
            iterations: args.iterations,
            seed: args.seed,
            benchmark_items: bench.items.len(),
            selected: &result.best_by_accuracy,
            best_by_objective: &result.best_by_objective,
        };
        write(&out.join("search.json"), to_json(&summary)?)?;
    }
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

pub fn report(args: ReportArgs) -> CmdResult {
    if !args.aspect.is_finite() || args.aspect <= 0.0 {
        return Err(usage(format!("--aspect must be positive, got {}", args.aspect)));
    }
    if args.sides.is_empty() || args.sides.contains(&0) {
        return Err(usage("--sides needs positive resolutions"));
    }
    let budget = args.k_final.as_deref().map(parse_budget).transpose()?;
    let policy = PruningPolicy::resolve(&args.policy).with_context(|| format!("loading policy '{}'", args.policy))?;
    let geometry = kv_geometry(&policy.model_id)?;
    let rows = scaling_table(
        &args.sides,
        args.aspect,
        policy.patch_h,
        geometry,
        args.text_tokens,
        budget.unwrap_or(policy.final_budget),
    )?;
    let mut scaling = Vec::new();
    write_scaling_csv(&rows, &mut scaling)?;

    let runs: Vec<PipelineSummary> = args
        .results
        .iter()
        .map(|p| PipelineSummary::load(p))
        .collect::<Result<_, _>>()?;
    let stats = if runs.is_empty() { None } else { Some(summarize(&runs)?) };
    let costs: Vec<CostReport> = runs
        .iter()
        .zip(&args.results)
        .map(|(r, path)| {
            let g = kv_geometry(&r.model_id)?;
            CostReport::new(
                path.display().to_string(),
                g,
                args.text_tokens,
                r.original_count,
                r.stage1_count,
                r.stage2_count,
                r.stage2_layer,
            )
        })
        .collect::<Result<_, _>>()?;

    match &args.out {
        None => print!("{}", String::from_utf8_lossy(&scaling)),
        Some(out) => {
            create_out(out)?;
            write(&out.join("scaling.csv"), &scaling)?;
            if !costs.is_empty() {
                let mut csv = Vec::new();
                CostReport::write_csv(&costs, &mut csv)?;
                write(&out.join("costs.csv"), csv)?;
            }
            if let Some(s) = &stats {
                write(&out.join("summary.json"), to_json(s)?)?;
            }
        }
    }
    if let Some(s) = &stats {
        println!(
            "runs: {}  mean stage-1 prune ratio: {:.4}  mean selected layer: {:.2}  simple: {:.1}%",
            s.runs,
            s.mean_stage1_prune_ratio,
            s.mean_stage2_layer,
            s.simple_fraction * 100.0
        );
    }
    Ok(())
}

pub fn bench(args: BenchArgs) -> CmdResult {
    if args.count == 0 || args.patch == 0 {
        return Err(usage("--count and --patch must be at least 1"));
    }
    let spec = BenchSpec {
        count: args.count,
        patch: args.patch,
        ..BenchSpec::default()
    };
    let bench = SyntheticBenchmark::generate(&spec, args.seed)?;
    bench.save(&args.out)?;
    println!("wrote {} items to {}", bench.items.len(), args.out.display());
    Ok(())
}
