use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;

use serde::Serialize;
use specdec::distributions::{TokenId, Vocab};
use specdec::engine::SpecDecoder;
use specdec::lm::{load_model, parse_byte_corpus, parse_token_corpus, perturb, save_model, KGramModel, LanguageModel};
use specdec::metrics::{pareto_frontier, BenchPoint, CostModel, TraceSummary};
use specdec::oracle::{
    battery_policies, bellman_check, check_threshold_condition, exact_output_dist, max_abs_diff, target_output_dist,
    MicroMdp,
};
use specdec::policies::{AdaptiveThreshold, FixedK, PolicyContext, PolicySpec, StoppingPolicy, TrueAcceptance};
use specdec::predictor::{
    gen_dataset, read_jsonl, train_head as fit_head, write_jsonl, DatasetConfig, LossWeights, PredictorHead,
    TrainConfig, TrainReport,
};

use crate::config::{PromptFormat, RunConfig};
use crate::{prompts, CliResult, FitLmArgs};

/// Exact checks pass when every discrepancy is below this.
const ORACLE_TOLERANCE: f64 = 1e-10;

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("writing {}: {e}", path.display()))?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format!("writing {}: {e}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn models(cfg: &RunConfig) -> CliResult<(Arc<dyn LanguageModel>, Arc<dyn LanguageModel>)> {
    let target = load_model(cfg.require_file("target", &cfg.target)?)?;
    let draft = load_model(cfg.require_file("draft", &cfg.draft)?)?;
    Ok((target, draft))
}

#[derive(Serialize)]
struct FitSummary {
    order: usize,
    smoothing: f64,
    vocab_size: usize,
    eos: TokenId,
    sequences: usize,
    tokens: usize,
    contexts: usize,
}

pub fn fit_lm(a: &FitLmArgs) -> CliResult<ExitCode> {
    let (corpus, vocab) = match a.format {
        PromptFormat::Bytes => (parse_byte_corpus(&fs::read(&a.corpus)?), Vocab::bytes()),
        PromptFormat::Tokens => {
            let corpus = parse_token_corpus(&fs::read_to_string(&a.corpus)?)?;
            let eos = a.eos.ok_or("--eos is required for token corpora")?;
            let largest = corpus.iter().flatten().map(|t| t.0).chain([eos]).max().unwrap_or(eos);
            let size = a.vocab_size.unwrap_or(largest as usize + 1);
            (corpus, Vocab::new(size, TokenId(eos))?)
        }
    };
    let model = KGramModel::fit(&corpus, vocab.clone(), a.order, a.smoothing)?;
    save_model(&model, &a.out)?;
    if let Some(path) = &a.draft_out {
        let draft = perturb(Arc::new(model.clone()), a.draft_mix, a.draft_temperature)?;
        save_model(&draft, path)?;
    }
    print_json(&FitSummary {
        order: a.order,
        smoothing: a.smoothing,
        vocab_size: vocab.size(),
        eos: vocab.eos(),
        sequences: corpus.len(),
        tokens: corpus.iter().map(Vec::len).sum(),
        contexts: model.num_contexts(),
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DataSummary<'a> {
    config: &'a RunConfig,
    prompts: usize,
    examples: usize,
    in_loss: usize,
    mean_label: f64,
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<ExitCode> {
    let (target, draft) = models(cfg)?;
    let prompts = prompts::expand(cfg, &prompts::load(cfg)?);
    let data_cfg = DatasetConfig {
        r_percent: cfg.r_percent,
        max_len: cfg.max_len,
        k_cap: cfg.k_cap,
        sampling: cfg.sampling.clone(),
        ..DatasetConfig::default()
    };
    let examples = gen_dataset(target.as_ref(), draft.as_ref(), &prompts, &data_cfg, cfg.seed)?;
    write_jsonl(out, &examples)?;
    let in_loss: Vec<f64> = examples.iter().filter(|e| e.include_in_loss).map(|e| e.label).collect();
    print_json(&DataSummary {
        config: cfg,
        prompts: prompts.len(),
        examples: examples.len(),
        in_loss: in_loss.len(),
        mean_label: in_loss.iter().sum::<f64>() / in_loss.len().max(1) as f64,
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    report: TrainReport,
}

pub fn train_head(cfg: &RunConfig, out: &Path) -> CliResult<ExitCode> {
    let examples = read_jsonl(cfg.require_file("data", &cfg.data)?)?;
    let (head, report) = fit_head(&examples, &cfg.train)?;
    head.save(out)?;
    print_json(&TrainSummary { config: cfg, report })?;
    Ok(ExitCode::SUCCESS)
}

/// Result for one policy: the CSV row plus the per-trace spread.
#[derive(Serialize)]
struct Measured {
    #[serde(flatten)]
    point: BenchPoint,
    /// The policy reads the target model, so it cannot be deployed as is.
    oracle: bool,
    per_trace: TraceSummary,
}

struct Bench<'a> {
    decoder: SpecDecoder,
    prompts: Vec<Vec<TokenId>>,
    costs: CostModel,
    cfg: &'a RunConfig,
}

impl<'a> Bench<'a> {
    fn new(cfg: &'a RunConfig) -> CliResult<Self> {
        let (target, draft) = models(cfg)?;
        let decoder = SpecDecoder::new(target, draft, cfg.engine()?)?;
        let prompts = prompts::expand(cfg, &prompts::load(cfg)?);
        Ok(Bench { decoder, prompts, costs: cfg.costs()?, cfg })
    }

    fn context(&self) -> PolicyContext {
        PolicyContext {
            target: self.decoder.target().clone(),
            draft: self.decoder.draft().clone(),
            sampling: self.cfg.sampling.clone(),
        }
    }

    /// Every policy sees the same prompts and per-generation seeds.
    fn measure(&self, policy: &dyn StoppingPolicy, params: String, oracle: bool) -> CliResult<Measured> {
        let traces = self.decoder.generate_batch(&self.prompts, policy, self.cfg.seed)?;
        let point = BenchPoint::from_traces(policy.name(), params, &traces, &self.costs, self.cfg.standalone())?;
        let per_trace = TraceSummary::of(traces.iter().map(|t| &t.counters), &self.costs)?;
        Ok(Measured { point, oracle, per_trace })
    }
}

fn sorted_rows(results: &mut [Measured]) -> Vec<BenchPoint> {
    results.sort_by(|a, b| (&a.point.policy, &a.point.params).cmp(&(&b.point.policy, &b.point.params)));
    results.iter().map(|m| m.point.clone()).collect()
}

fn flag_oracle(spec: &str) {
    eprintln!("note: {spec} reads the target model; treat it as a reference, not a deployable policy");
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    config: &'a RunConfig,
    generations: usize,
    results: &'a [Measured],
}

pub fn bench(cfg: &RunConfig, out: &Path, summary: &Path) -> CliResult<ExitCode> {
    if cfg.policies.is_empty() {
        return Err("no policies given; set `policies` or pass --policy".into());
    }
    let specs = cfg.policies.iter().map(|s| s.parse::<PolicySpec>()).collect::<Result<Vec<_>, _>>()?;
    let bench = Bench::new(cfg)?;
    let ctx = bench.context();
    let mut results = Vec::new();
    for spec in &specs {
        if spec.is_oracle() {
            flag_oracle(&spec.to_string());
        }
        let policy = spec.build(&ctx)?;
        results.push(bench.measure(policy.as_ref(), policy.params(), spec.is_oracle())?);
    }
    write_csv(out, &sorted_rows(&mut results))?;
    write_json(summary, &BenchSummary { config: cfg, generations: bench.prompts.len(), results: &results })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct HeadRun {
    w_rej: f64,
    depth: usize,
    report: TrainReport,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    config: &'a RunConfig,
    generations: usize,
    heads: Vec<HeadRun>,
    results: &'a [Measured],
    pareto: Vec<BenchPoint>,
}

pub fn sweep(cfg: &RunConfig, out: &Path, summary: &Path) -> CliResult<ExitCode> {
    if cfg.k_grid.is_empty() {
        return Err("`k_grid` must not be empty".into());
    }
    let adaptive = cfg.data.is_some() || cfg.head.is_some() || cfg.sweep_oracle;
    if adaptive && cfg.h_grid.is_empty() {
        return Err("`h_grid` must not be empty".into());
    }
    if cfg.data.is_some() && (cfg.w_rej_grid.is_empty() || cfg.depth_grid.is_empty()) {
        return Err("`w_rej_grid` and `depth_grid` must not be empty when training heads".into());
    }
    let bench = Bench::new(cfg)?;

    // (head, label) pairs; trained heads carry their training parameters.
    let mut heads: Vec<(Arc<PredictorHead>, Option<String>)> = Vec::new();
    let mut runs = Vec::new();
    if let Some(data) = &cfg.data {
        let examples = read_jsonl(data)?;
        for &depth in &cfg.depth_grid {
            for &w_rej in &cfg.w_rej_grid {
                let tc = TrainConfig {
                    weights: LossWeights { w_acc: 1.0, w_rej },
                    depth,
                    seed: cfg.seed,
                    ..cfg.train.clone()
                };
                let (head, report) = fit_head(&examples, &tc)?;
                heads.push((Arc::new(head), Some(format!("w_rej={w_rej};D={depth}"))));
                runs.push(HeadRun { w_rej, depth, report });
            }
        }
    } else if let Some(path) = &cfg.head {
        heads.push((Arc::new(PredictorHead::load(path)?), None));
    }

    let mut results = Vec::new();
    for &k in &cfg.k_grid {
        let policy = FixedK::new(k)?;
        results.push(bench.measure(&policy, policy.params(), false)?);
    }
    for (head, label) in &heads {
        for &h in &cfg.h_grid {
            let policy = AdaptiveThreshold::with_head(head.clone(), h);
            let params = match label {
                Some(l) => format!("h={h};{l}"),
                None => policy.params(),
            };
            results.push(bench.measure(&policy, params, false)?);
        }
    }
    if cfg.sweep_oracle {
        flag_oracle("adaptive-oracle");
        let exact = Arc::new(TrueAcceptance::new(bench.decoder.target().clone(), cfg.sampling.clone()));
        for &h in &cfg.h_grid {
            let policy = AdaptiveThreshold::new(exact.clone(), h)?;
            results.push(bench.measure(&policy, policy.params(), true)?);
        }
    }

    let rows = sorted_rows(&mut results);
    write_csv(out, &rows)?;
    write_json(
        summary,
        &SweepSummary {
            config: cfg,
            generations: bench.prompts.len(),
            heads: runs,
            results: &results,
            pareto: pareto_frontier(&rows),
        },
    )?;
    Ok(ExitCode::SUCCESS)
}

/// One audited state of the threshold check, tagged with its instance and policy.
#[derive(Serialize)]
struct OracleRow {
    instance: String,
    policy: String,
    params: String,
    prefix: String,
    candidates: String,
    rejection_prob: f64,
    q_stop: f64,
    q_continue: f64,
    condition_fires: bool,
    violation: bool,
}

#[derive(Serialize)]
struct OracleSummary<'a> {
    config: &'a RunConfig,
    instances: usize,
    pairs: usize,
    max_output_error: f64,
    threshold_states: usize,
    condition_fired: usize,
    threshold_violations: usize,
    bellman_states: usize,
    max_bellman_error: f64,
    passed: bool,
}

pub fn oracle_check(cfg: &RunConfig, out: Option<&Path>, summary: Option<&Path>) -> CliResult<ExitCode> {
    let mut battery: Vec<(String, MicroMdp, u64)> = (0..cfg.oracle_instances)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            (format!("random-{seed}"), MicroMdp::random(seed), seed)
        })
        .collect();
    battery.push(("near-disjoint".into(), MicroMdp::near_disjoint(), cfg.seed));

    let mut rows = Vec::new();
    let (mut pairs, mut max_output_error) = (0, 0.0f64);
    let (mut bellman_states, mut max_bellman_error) = (0, 0.0f64);
    for (name, mdp, seed) in &battery {
        let reference = target_output_dist(mdp)?;
        for policy in battery_policies(mdp, *seed) {
            let law = exact_output_dist(mdp, policy.as_ref())?;
            let mass: f64 = law.values().sum();
            max_output_error = max_output_error.max(max_abs_diff(&law, &reference)).max((mass - 1.0).abs());
            pairs += 1;

            let bellman = bellman_check(mdp, policy.as_ref())?;
            bellman_states += bellman.states;
            max_bellman_error = max_bellman_error.max(bellman.max_error);

            for r in check_threshold_condition(mdp, policy.as_ref())?.rows {
                rows.push(OracleRow {
                    instance: name.clone(),
                    policy: policy.name().into(),
                    params: policy.params(),
                    prefix: r.prefix,
                    candidates: r.candidates,
                    rejection_prob: r.rejection_prob,
                    q_stop: r.q_stop,
                    q_continue: r.q_continue,
                    condition_fires: r.condition_fires,
                    violation: r.violation,
                });
            }
        }
    }
    let threshold_violations = rows.iter().filter(|r| r.violation).count();
    let passed =
        max_output_error <= ORACLE_TOLERANCE && max_bellman_error <= ORACLE_TOLERANCE && threshold_violations == 0;
    let report = OracleSummary {
        config: cfg,
        instances: battery.len(),
        pairs,
        max_output_error,
        threshold_states: rows.len(),
        condition_fired: rows.iter().filter(|r| r.condition_fires).count(),
        threshold_violations,
        bellman_states,
        max_bellman_error,
        passed,
    };
    if let Some(path) = out {
        write_csv(path, &rows)?;
    }
    match summary {
        Some(path) => write_json(path, &report)?,
        None => print_json(&report)?,
    }
    if passed {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("oracle check failed");
        Ok(ExitCode::FAILURE)
    }
}
