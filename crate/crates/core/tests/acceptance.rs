//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//! Runs as a plain binary so the lines are visible under `cargo test`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use specdec::distributions::{tokens, Dist, TokenId, Vocab};
use specdec::engine::{EngineConfig, GenerationTrace, Sampling, SpecDecoder};
use specdec::lm::{parse_byte_corpus, perturb, KGramModel, LanguageModel, MarkovModel};
use specdec::metrics::{fit_forward_times, pareto_frontier, BenchPoint, CostModel};
use specdec::oracle::{
    battery_policies, bellman_check, check_threshold_condition, exact_output_dist, initial_value, max_abs_diff,
    monte_carlo_value, target_output_dist, tv_distance, MicroMdp, OutputDist,
};
use specdec::policies::{
    AdaptiveThreshold, ConfidenceProduct, DraftConfidence, FixedK, OracleGreedy, StoppingPolicy, TrueAcceptance,
};
use specdec::predictor::{
    gen_dataset, DatasetConfig, LossWeights, PredictorHead, TrainConfig, TrainingExample, FEATURE_DIM,
};
use specdec::seeds;

const BATTERY: u64 = 20;

/// Outcome of one criterion: whether it passed and a one-line summary.
type Outcome = (bool, String);

type Criterion = (&'static str, fn() -> Outcome);

fn battery() -> Vec<MicroMdp> {
    let mut v: Vec<MicroMdp> = (0..BATTERY).map(MicroMdp::random).collect();
    v.push(MicroMdp::near_disjoint());
    v
}

fn c1_unbiased_exact() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for (i, mdp) in battery().iter().enumerate() {
        let reference = target_output_dist(mdp).unwrap();
        for policy in battery_policies(mdp, i as u64) {
            let law = exact_output_dist(mdp, policy.as_ref()).unwrap();
            let mass: f64 = law.values().sum();
            worst = worst.max(max_abs_diff(&law, &reference)).max((mass - 1.0).abs());
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    (
        worst <= 1e-10 && elapsed < Duration::from_secs(60) && pairs >= 20 * 4,
        format!("{pairs} instance/policy pairs, max |exact - target| = {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn c2_unbiased_statistical() -> Outcome {
    let start = Instant::now();
    let vocab = Vocab::new(3, TokenId(2)).unwrap();
    let mut rng = seeds::rng(2024);
    let target: Arc<dyn LanguageModel> = Arc::new(MarkovModel::random(vocab.clone(), 1, 1.5, &mut rng));
    let draft: Arc<dyn LanguageModel> = Arc::new(MarkovModel::random(vocab, 1, 1.5, &mut rng));
    let mdp = MicroMdp::new(
        target,
        draft,
        tokens(&[0]),
        EngineConfig::new(4).with_k_cap(3),
        CostModel::new(0.02, 0.1).unwrap(),
    )
    .unwrap();
    let reference = target_output_dist(&mdp).unwrap();
    let policy = FixedK::new(2).unwrap();
    let n = 100_000;
    let mut counts: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    let mut rng = seeds::rng(7);
    for _ in 0..n {
        let trace = mdp.decoder().generate(mdp.prompt(), &policy, &mut rng).unwrap();
        *counts.entry(trace.output).or_default() += 1.0 / n as f64;
    }
    let empirical: OutputDist = counts;
    let tv = tv_distance(&empirical, &reference);
    let elapsed = start.elapsed();
    (
        tv <= 0.02 && elapsed < Duration::from_secs(60),
        format!("TV(100k samples, target law) = {tv:.4} over {} outputs, {:.1}s", reference.len(), elapsed.as_secs_f64()),
    )
}

fn c3_trace_identity() -> Outcome {
    let mut checked = 0;
    let mut failures = 0;
    for i in 0..1000u64 {
        let mut rng = seeds::derived_rng(3, 0, i);
        let size = rng.random_range(4..=12usize);
        let vocab = Vocab::new(size, TokenId(rng.random_range(0..size as u32))).unwrap();
        let target: Arc<dyn LanguageModel> =
            Arc::new(MarkovModel::random(vocab.clone(), rng.random_range(1..=2), rng.random_range(0.5..3.0), &mut rng));
        let draft: Arc<dyn LanguageModel> = if rng.random_bool(0.5) {
            Arc::new(perturb(target.clone(), rng.random_range(0.0..0.7), rng.random_range(0.5..2.0)).unwrap())
        } else {
            Arc::new(MarkovModel::random(vocab, 1, rng.random_range(0.5..3.0), &mut rng))
        };
        let greedy = i % 7 == 6;
        let sampling = if greedy {
            Sampling::greedy()
        } else {
            Sampling {
                temperature: rng.random_range(0.5..1.5),
                top_k: rng.random_bool(0.3).then(|| rng.random_range(1..=size)),
                greedy: false,
            }
        };
        let prompt: Vec<TokenId> = (0..rng.random_range(1..=4)).map(|_| TokenId(rng.random_range(0..size as u32))).collect();
        let config = EngineConfig::new(prompt.len() + rng.random_range(1..40))
            .with_k_cap(rng.random_range(1..=12))
            .with_sampling(sampling.clone());
        let policy: Box<dyn StoppingPolicy> = match i % 7 {
            0 => Box::new(FixedK::new(rng.random_range(1..=10)).unwrap()),
            1 => Box::new(AdaptiveThreshold::with_head(
                Arc::new(PredictorHead::random(2, 6, &mut rng)),
                rng.random_range(0.0..1.0),
            )),
            2 => Box::new(
                AdaptiveThreshold::new(Arc::new(TrueAcceptance::new(target.clone(), sampling)), rng.random_range(0.0..1.0))
                    .unwrap(),
            ),
            3 => Box::new(DraftConfidence::new(rng.random_range(0.0..1.0)).unwrap()),
            4 => Box::new(ConfidenceProduct::new(rng.random_range(0.0..1.0)).unwrap()),
            5 => Box::new(FixedK::new(rng.random_range(1..=3)).unwrap()),
            _ => Box::new(OracleGreedy::new(target.clone(), draft.clone())),
        };
        let decoder = SpecDecoder::new(target, draft, config).unwrap();
        let trace = decoder.generate(&prompt, policy.as_ref(), &mut rng).unwrap();
        let c = trace.counters;
        if c.n_draft + c.n_target != c.n + c.n_discarded || trace.check().is_err() {
            failures += 1;
        }
        checked += 1;
    }
    (failures == 0, format!("{checked} traces over 7 policy families, {failures} identity failures"))
}

/// Greedy pair over tokens `0..=n` plus eos: the target always continues
/// `t → t + 1`; the draft agrees except at the positions in `s`.
fn disagreement_instance(n: usize, s: &[usize]) -> SpecDecoder {
    let size = n + 2;
    let eos = TokenId(size as u32 - 1);
    let vocab = Vocab::new(size, eos).unwrap();
    let row = |favourite: usize| {
        let mut w = vec![0.4 / (size - 1) as f64; size];
        w[favourite] = 0.6;
        Dist::new(w).unwrap()
    };
    let mut target = MarkovModel::new(vocab.clone(), 1, Dist::uniform(size)).unwrap();
    let mut draft = MarkovModel::new(vocab, 1, Dist::uniform(size)).unwrap();
    for prev in 0..n {
        let next = prev + 1;
        target.set_row(&[prev as u32], row(next)).unwrap();
        let wrong = if next == n { 0 } else { next + 1 };
        draft.set_row(&[prev as u32], row(if s.contains(&next) { wrong } else { next })).unwrap();
    }
    let config = EngineConfig::new(n + 1).with_sampling(Sampling::greedy());
    SpecDecoder::new(Arc::new(target), Arc::new(draft), config).unwrap()
}

fn c4_greedy_oracle() -> Outcome {
    let cases: [(usize, &[usize]); 7] =
        [(10, &[3, 7]), (10, &[]), (8, &[1]), (8, &[1, 2, 3]), (12, &[2, 5, 8, 11]), (6, &[4]), (9, &[1, 3, 5, 7])];
    let mut ok = true;
    let mut detail = Vec::new();
    for (n, s) in cases {
        let dec = disagreement_instance(n, s);
        let policy = OracleGreedy::new(dec.target().clone(), dec.draft().clone());
        let trace = dec.generate(&tokens(&[0]), &policy, &mut seeds::rng(0)).unwrap();
        let c = trace.counters;
        let expected: Vec<TokenId> = (1..=n as u32).map(TokenId).collect();
        let good = c.n_discarded == 0 && c.n_target == s.len() + 1 && trace.output == expected;
        ok &= good;
        detail.push(format!("|S|={} N_target={} N_disc={}", s.len(), c.n_target, c.n_discarded));
    }
    (ok, format!("{} instances: {}", cases.len(), detail.join("; ")))
}

fn c5_threshold_condition() -> Outcome {
    let mut violations = 0;
    let mut fired = 0;
    let mut rows = 0;
    let mut fired_instances = 0;
    for (i, mdp) in battery().iter().enumerate() {
        let mut fired_here = 0;
        for policy in battery_policies(mdp, i as u64) {
            let report = check_threshold_condition(mdp, policy.as_ref()).unwrap();
            violations += report.violations();
            fired_here += report.fired();
            rows += report.rows.len();
        }
        fired += fired_here;
        fired_instances += usize::from(fired_here > 0);
    }
    (
        violations == 0 && fired > 0,
        format!("{rows} audited states, condition fired {fired} times on {fired_instances} instances, {violations} violations"),
    )
}

fn c6_bellman_and_monte_carlo() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut states = 0;
    for (i, mdp) in battery().iter().enumerate() {
        for policy in battery_policies(mdp, i as u64) {
            let r = bellman_check(mdp, policy.as_ref()).unwrap();
            worst = worst.max(r.max_error);
            states += r.states;
        }
    }
    let mdp = MicroMdp::random(5);
    let policy = &battery_policies(&mdp, 5)[2];
    let exact = initial_value(&mdp, policy.as_ref()).unwrap();
    let mc = monte_carlo_value(&mdp, policy.as_ref(), 1_000_000, 99).unwrap();
    let z = (mc.mean - exact).abs() / mc.std_error;
    (
        worst <= 1e-10 && z <= 3.0,
        format!(
            "{states} states, max Bellman residual {worst:.2e}; value {exact:.6} vs MC {:.6} ± {:.1e} (z = {z:.2})",
            mc.mean, mc.std_error
        ),
    )
}

fn c7_gradient_check() -> Outcome {
    let w = LossWeights { w_acc: 1.0, w_rej: 6.0 };
    let mut worst: f64 = 0.0;
    for depth in 0..=4 {
        let mut rng = seeds::rng(70 + depth as u64);
        let mut head = PredictorHead::random(depth, 7, &mut rng);
        let mut shift = [0.0; FEATURE_DIM];
        let mut scale = [0.0; FEATURE_DIM];
        for j in 0..FEATURE_DIM {
            shift[j] = rng.random_range(-0.5..0.5);
            scale[j] = rng.random_range(0.5..2.0);
        }
        head.set_standardization(shift, scale);
        let batch: Vec<TrainingExample> = (0..10)
            .map(|_| {
                let mut f = [0.0; FEATURE_DIM];
                f.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
                TrainingExample { features: specdec::predictor::FeatureVec(f), label: rng.random_range(0.0..=1.0), include_in_loss: true }
            })
            .collect();
        let (_, grad) = head.loss_and_grad(&batch, w).unwrap();
        let eps = 1e-5;
        for (i, g) in grad.flatten().iter().enumerate() {
            let orig = head.param(i);
            head.set_param(i, orig + eps);
            let up = head.loss(&batch, w).unwrap();
            head.set_param(i, orig - eps);
            let down = head.loss(&batch, w).unwrap();
            head.set_param(i, orig);
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
        }
    }
    (worst <= 1e-4, format!("D = 0..4, max relative error {worst:.2e}"))
}

fn c8_regression() -> Outcome {
    let truth = CostModel::new(0.02, 0.11).unwrap();
    let mut rng = seeds::rng(8);
    let design: Vec<(f64, f64)> =
        (0..200).map(|_| (rng.random_range(0..400) as f64, rng.random_range(1..100) as f64)).collect();
    let clean: Vec<_> = design.iter().map(|&(d, t)| (d, t, truth.t_draft * d + truth.t_target * t)).collect();
    let fit = fit_forward_times(&clean, false).unwrap();
    let clean_err = (fit.t_draft - truth.t_draft).abs().max((fit.t_target - truth.t_target).abs());
    let noise = Normal::new(0.0, 0.01).unwrap();
    let noisy: Vec<_> = clean.iter().map(|&(d, t, y)| (d, t, y * (1.0 + noise.sample(&mut rng)))).collect();
    let nf = fit_forward_times(&noisy, false).unwrap();
    let rel = (nf.t_draft / truth.t_draft - 1.0).abs().max((nf.t_target / truth.t_target - 1.0).abs());
    (
        clean_err <= 1e-9 && rel <= 0.01 && nf.r_squared >= 0.999,
        format!("noiseless error {clean_err:.1e}; 1% noise: relative error {:.3}%, R² = {:.5}", rel * 100.0, nf.r_squared),
    )
}

/// Byte-level pair shared by the last two criteria.
struct BytePair {
    target: Arc<dyn LanguageModel>,
    draft: Arc<dyn LanguageModel>,
    lines: Vec<Vec<TokenId>>,
}

const BYTE_MAX_LEN: usize = 160;

fn byte_pair() -> BytePair {
    let corpus = include_bytes!("data/corpus.txt");
    let lines = parse_byte_corpus(corpus);
    let target: Arc<dyn LanguageModel> = Arc::new(KGramModel::fit(&lines, Vocab::bytes(), 2, 0.01).unwrap());
    let draft: Arc<dyn LanguageModel> = Arc::new(perturb(target.clone(), 0.3, 1.3).unwrap());
    BytePair { target, draft, lines }
}

/// Prompts made of the first few bytes of corpus lines.
fn byte_prompts(lines: &[Vec<TokenId>], per_line: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = seeds::rng(seed);
    let mut out = Vec::new();
    for line in lines {
        for _ in 0..per_line {
            let len = rng.random_range(1..=6usize).min(line.len() - 1);
            out.push(line[..len].to_vec());
        }
    }
    out
}

fn bench(pair: &BytePair, policy: &dyn StoppingPolicy, prompts: &[Vec<TokenId>], cm: &CostModel) -> BenchPoint {
    let dec = SpecDecoder::new(pair.target.clone(), pair.draft.clone(), EngineConfig::new(BYTE_MAX_LEN)).unwrap();
    let traces: Vec<GenerationTrace> = dec.generate_batch(prompts, policy, 1234).unwrap();
    BenchPoint::from_traces(policy.name(), policy.params(), &traces, cm, 0.108).unwrap()
}

const FIXED_GRID: [usize; 7] = [2, 4, 6, 8, 10, 12, 14];
const H_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

fn c9_pareto() -> Outcome {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let pair = byte_pair();
        let data_cfg = DatasetConfig { r_percent: 15.0, max_len: BYTE_MAX_LEN, ..Default::default() };
        let train_prompts = byte_prompts(&pair.lines, 12, 90);
        let examples = gen_dataset(pair.target.as_ref(), pair.draft.as_ref(), &train_prompts, &data_cfg, 91).unwrap();
        let train_cfg = TrainConfig {
            weights: LossWeights { w_acc: 1.0, w_rej: 1.0 },
            depth: 3,
            width: 32,
            epochs: 12,
            step_size: 0.05,
            batch_size: 128,
            eval_fraction: 0.1,
            seed: 92,
        };
        let (head, report) = specdec::predictor::train_head(&examples, &train_cfg).unwrap();
        let head = Arc::new(head);

        let cm = CostModel::new(0.0207, 0.108).unwrap();
        let prompts = byte_prompts(&pair.lines, 6, 93);
        let fixed: Vec<BenchPoint> =
            FIXED_GRID.iter().map(|&k| bench(&pair, &FixedK::new(k).unwrap(), &prompts, &cm)).collect();
        let adaptive: Vec<BenchPoint> = H_GRID
            .iter()
            .map(|&h| bench(&pair, &AdaptiveThreshold::with_head(head.clone(), h), &prompts, &cm))
            .collect();
        let frontier = pareto_frontier(&adaptive);
        let mut uncovered = Vec::new();
        for f in &fixed {
            let covered = frontier.iter().any(|a| {
                a.verification_rate <= f.verification_rate + 0.01 && a.discard_rate <= f.discard_rate + 0.01
            });
            if !covered {
                uncovered.push(format!(
                    "{} (v={:.3}, d={:.3})",
                    f.params, f.verification_rate, f.discard_rate
                ));
            }
        }
        for p in fixed.iter().chain(&adaptive) {
            println!(
                "    {:<10} {:<32} verification {:.4}  discard {:.4}  speedup {:.3}",
                p.policy, p.params, p.verification_rate, p.discard_rate, p.speedup
            );
        }
        let elapsed = start.elapsed();
        (
            uncovered.is_empty() && elapsed < Duration::from_secs(600),
            format!(
                "{} examples, eval KL {:.4}; fixed points not covered: [{}]; {:.0}s single-threaded",
                examples.len(),
                report.eval_kl.unwrap_or(f64::NAN),
                uncovered.join(", "),
                elapsed.as_secs_f64()
            ),
        )
    })
}

fn c10_true_acceptance_cost() -> Outcome {
    let pair = byte_pair();
    let cm = CostModel::new(0.0234, 0.112).unwrap();
    let prompts = byte_prompts(&pair.lines, 10, 100);
    let exact = Arc::new(TrueAcceptance::new(pair.target.clone(), Sampling::default()));
    let best = |points: &[BenchPoint]| {
        points.iter().min_by(|a, b| a.latency.total_cmp(&b.latency)).cloned().unwrap()
    };
    let fixed: Vec<BenchPoint> =
        FIXED_GRID.iter().map(|&k| bench(&pair, &FixedK::new(k).unwrap(), &prompts, &cm)).collect();
    let adaptive: Vec<BenchPoint> = H_GRID
        .iter()
        .map(|&h| bench(&pair, &AdaptiveThreshold::new(exact.clone(), h).unwrap(), &prompts, &cm))
        .collect();
    let (bf, ba) = (best(&fixed), best(&adaptive));
    (
        ba.latency <= bf.latency * 1.01,
        format!(
            "best threshold {} at {:.5} s/token vs best fixed {} at {:.5} s/token (ratio {:.4})",
            ba.params,
            ba.latency,
            bf.params,
            bf.latency,
            ba.latency / bf.latency
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("unbiasedness, exact enumeration", c1_unbiased_exact),
        ("unbiasedness, sampled", c2_unbiased_statistical),
        ("trace identity", c3_trace_identity),
        ("greedy oracle counters", c4_greedy_oracle),
        ("threshold stopping condition", c5_threshold_condition),
        ("Bellman consistency and Monte Carlo", c6_bellman_and_monte_carlo),
        ("head gradient check", c7_gradient_check),
        ("forward-time regression", c8_regression),
        ("adaptive frontier covers fixed-K", c9_pareto),
        ("true-acceptance threshold vs fixed K", c10_true_acceptance_cost),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.ends_with(&format!(" {f}")) || name.contains(f.as_str())) {
            continue;
        }
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        failed += usize::from(!ok);
        println!("{id:>12} [{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
