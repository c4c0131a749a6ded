//! Exact enumeration over small instances: the output law of speculative
//! decoding, the target's own output law, and cost-to-go values of the
//! stop/continue decision.
//!
//! # Costs
//!
//! With `c1 = t_draft` and `c2 = t_target − t_draft`, a round with `K`
//! candidates of which `n` are accepted costs `c1·(K − n) + c2`. The value of
//! a state `(prefix, Y_1..Y_k)` is the expected cost of the rest of the
//! generation, candidates already drafted in the current round included,
//! when the policy makes every later decision.
//!
//! The `t_draft·N` part of the total time is left out, as it does not depend
//! on the decisions for a fixed-length generation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{accept_prob, residual, Dist, TokenId, Vocab};
use crate::engine::{forced_stop, EngineConfig, SpecDecoder};
use crate::error::{Error, Result};
use crate::lm::{perturb, LanguageModel, MarkovModel};
use crate::metrics::CostModel;
use crate::policies::{
    AdaptiveThreshold, ConfidenceProduct, Decision, DraftConfidence, FixedK, PolicyState, StoppingPolicy,
    TrueAcceptance,
};
use crate::predictor::{FeatureVec, PredictorHead};
use crate::seeds;

/// Default bound on enumerated branches.
pub const DEFAULT_BRANCH_BUDGET: u64 = 5_000_000;

/// Output sequence (prompt excluded) to probability.
pub type OutputDist = BTreeMap<Vec<TokenId>, f64>;

/// A small, fully enumerable decoding problem.
#[derive(Clone)]
pub struct MicroMdp {
    decoder: SpecDecoder,
    prompt: Vec<TokenId>,
    costs: CostModel,
    budget: u64,
}

impl MicroMdp {
    pub fn new(
        target: Arc<dyn LanguageModel>,
        draft: Arc<dyn LanguageModel>,
        prompt: Vec<TokenId>,
        config: EngineConfig,
        costs: CostModel,
    ) -> Result<Self> {
        if config.max_len <= prompt.len() {
            return Err(Error::InvalidParameter("max_len must exceed the prompt length".into()));
        }
        let decoder = SpecDecoder::new(target, draft, config)?;
        prompt.iter().try_for_each(|&t| decoder.vocab().check(t))?;
        Ok(MicroMdp { decoder, prompt, costs, budget: DEFAULT_BRANCH_BUDGET })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_costs(mut self, costs: CostModel) -> Self {
        self.costs = costs;
        self
    }

    /// Seeded random instance: vocabulary of 3 to 5 tokens, order 1 or 2
    /// models with full support, a one-token prompt and at most 4 generated
    /// tokens.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let size = rng.random_range(3..=5usize);
        let vocab = Vocab::new(size, TokenId(size as u32 - 1)).expect("valid vocab");
        let order = rng.random_range(1..=2);
        let target: Arc<dyn LanguageModel> =
            Arc::new(MarkovModel::random(vocab.clone(), order, rng.random_range(0.5..3.0), &mut rng));
        let draft: Arc<dyn LanguageModel> = if rng.random_bool(0.5) {
            Arc::new(MarkovModel::random(vocab, rng.random_range(0..=2), rng.random_range(0.5..3.0), &mut rng))
        } else {
            let mix = rng.random_range(0.05..0.6);
            let temperature = rng.random_range(0.6..1.8);
            Arc::new(perturb(target.clone(), mix, temperature).expect("valid perturbation"))
        };
        let prompt = vec![TokenId(rng.random_range(0..size as u32 - 1))];
        let config = EngineConfig::new(rng.random_range(3..=5)).with_k_cap(rng.random_range(2..=4));
        let costs = CostModel::new(0.02, 0.1).expect("valid costs");
        MicroMdp::new(target, draft, prompt, config, costs).expect("consistent instance")
    }

    /// Draft and target concentrate on different tokens, so a drafted
    /// candidate is almost surely rejected.
    pub fn near_disjoint() -> Self {
        let vocab = Vocab::new(3, TokenId(2)).expect("valid vocab");
        let d = |v: [f64; 3]| Dist::new(v.to_vec()).expect("valid dist");
        let target = MarkovModel::unconditional(vocab.clone(), d([0.01, 0.98, 0.01])).expect("sizes match");
        let draft = MarkovModel::unconditional(vocab, d([0.98, 0.01, 0.01])).expect("sizes match");
        MicroMdp::new(
            Arc::new(target),
            Arc::new(draft),
            vec![TokenId(1)],
            EngineConfig::new(4).with_k_cap(2),
            CostModel::new(0.02, 0.1).expect("valid costs"),
        )
        .expect("consistent instance")
    }

    pub fn decoder(&self) -> &SpecDecoder {
        &self.decoder
    }

    pub fn config(&self) -> &EngineConfig {
        self.decoder.config()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn costs(&self) -> &CostModel {
        &self.costs
    }

    fn eos(&self) -> TokenId {
        self.decoder.vocab().eos()
    }

    /// Appends emitted tokens the way the engine does: up to and including
    /// eos, and never past `max_len`. Returns the sequence and whether the
    /// generation is over.
    fn emit(&self, prefix: &[TokenId], emitted: &[TokenId]) -> (Vec<TokenId>, bool) {
        let max_len = self.config().max_len;
        let mut seq = prefix.to_vec();
        for &t in emitted {
            if seq.len() >= max_len {
                break;
            }
            seq.push(t);
            if t == self.eos() {
                return (seq, true);
            }
        }
        let done = seq.len() >= max_len;
        (seq, done)
    }

    fn is_forced(&self, state: &PolicyState) -> bool {
        forced_stop(self.config(), self.eos(), state.prefix.len(), &state.candidates)
    }

    fn stops(&self, policy: &dyn StoppingPolicy, state: &PolicyState) -> bool {
        self.is_forced(state) || policy.decide(state) == Decision::Stop
    }

    /// `state` extended by candidate `y` drawn from `q`.
    fn extend(&self, policy: &dyn StoppingPolicy, state: &PolicyState, q: &Dist, y: TokenId) -> PolicyState {
        let f = FeatureVec::compute(q, y, state.len() + 1, self.config().k_cap, state.prev_cum_q());
        let mut next = state.clone();
        next.advance(policy, y, f);
        next
    }

    /// Draft distributions at every candidate position, then the target
    /// distributions at every position including the bonus one.
    fn round_dists(&self, state: &PolicyState) -> (Vec<Dist>, Vec<Dist>) {
        let ctx = state.context();
        let p0 = state.prefix.len();
        let qs = (0..state.len()).map(|i| self.decoder.draft_dist(&ctx[..p0 + i])).collect();
        let ps = (0..=state.len()).map(|i| self.decoder.target_dist(&ctx[..p0 + i])).collect();
        (qs, ps)
    }

    /// Every verification outcome of the drafted round: number accepted,
    /// correction token, probability.
    fn outcomes(&self, state: &PolicyState) -> Result<Vec<(usize, TokenId, f64)>> {
        let (qs, ps) = self.round_dists(state);
        let mut out = Vec::new();
        let mut all_accepted = 1.0;
        for (n, &y) in state.candidates.iter().enumerate() {
            let a = accept_prob(&ps[n], &qs[n], y)?;
            let rejected = all_accepted * (1.0 - a);
            if rejected > 0.0 {
                for (c, pc) in residual(&ps[n], &qs[n])?.support() {
                    out.push((n, c, rejected * pc));
                }
            }
            all_accepted *= a;
        }
        let k = state.len();
        if all_accepted > 0.0 {
            for (c, pc) in ps[k].support() {
                out.push((k, c, all_accepted * pc));
            }
        }
        Ok(out)
    }

    /// Rebuilds the policy's view of `state` by replaying its candidates.
    pub fn policy_state(&self, policy: &dyn StoppingPolicy, state: &MdpState) -> Result<PolicyState> {
        let mut ps = PolicyState::new(state.prefix.clone());
        for &y in &state.candidates {
            let q = self.decoder.draft_dist(&ps.context());
            if q.prob(y) <= 0.0 {
                return Err(Error::Domain(format!("candidate {y} has no draft mass")));
            }
            ps = self.extend(policy, &ps, &q, y);
        }
        Ok(ps)
    }
}

/// `(prefix, Y_1..Y_k)`: the sequence at the start of the round and the
/// candidates drafted so far.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MdpState {
    pub prefix: Vec<TokenId>,
    pub candidates: Vec<TokenId>,
}

struct Budget {
    used: u64,
    limit: u64,
}

impl Budget {
    fn spend(&mut self) -> Result<()> {
        self.used += 1;
        if self.used > self.limit {
            return Err(Error::StateSpaceTooLarge { budget: self.limit });
        }
        Ok(())
    }
}

/// Exact law of the engine's output under `policy`, with every acceptance
/// uniform integrated out analytically.
pub fn exact_output_dist(mdp: &MicroMdp, policy: &dyn StoppingPolicy) -> Result<OutputDist> {
    struct Walk<'a> {
        mdp: &'a MicroMdp,
        policy: &'a dyn StoppingPolicy,
        out: OutputDist,
        budget: Budget,
    }

    impl Walk<'_> {
        fn draft(&mut self, state: PolicyState, prob: f64) -> Result<()> {
            self.budget.spend()?;
            if self.mdp.stops(self.policy, &state) {
                return self.verify(&state, prob);
            }
            let q = self.mdp.decoder.draft_dist(&state.context());
            for (y, qy) in q.support() {
                let next = self.mdp.extend(self.policy, &state, &q, y);
                self.draft(next, prob * qy)?;
            }
            Ok(())
        }

        fn verify(&mut self, state: &PolicyState, prob: f64) -> Result<()> {
            for (n, c, pr) in self.mdp.outcomes(state)? {
                let mut emitted = state.candidates[..n].to_vec();
                emitted.push(c);
                let (seq, done) = self.mdp.emit(&state.prefix, &emitted);
                if done {
                    self.budget.spend()?;
                    *self.out.entry(seq[self.mdp.prompt.len()..].to_vec()).or_default() += prob * pr;
                } else {
                    self.draft(PolicyState::new(seq), prob * pr)?;
                }
            }
            Ok(())
        }
    }

    if policy.requires_greedy() && !mdp.config().sampling.greedy {
        return Err(Error::Misuse(format!("policy {} needs greedy decoding", policy.name())));
    }
    let mut walk = Walk { mdp, policy, out: OutputDist::new(), budget: Budget { used: 0, limit: mdp.budget } };
    walk.draft(PolicyState::new(mdp.prompt.clone()), 1.0)?;
    Ok(walk.out)
}

/// Law of plain autoregressive sampling from the target.
pub fn target_output_dist(mdp: &MicroMdp) -> Result<OutputDist> {
    fn walk(mdp: &MicroMdp, seq: &mut Vec<TokenId>, prob: f64, out: &mut OutputDist, budget: &mut Budget) -> Result<()> {
        budget.spend()?;
        let p = mdp.decoder.target_dist(seq);
        for (t, pt) in p.support() {
            seq.push(t);
            if t == mdp.eos() || seq.len() >= mdp.config().max_len {
                *out.entry(seq[mdp.prompt.len()..].to_vec()).or_default() += prob * pt;
            } else {
                walk(mdp, seq, prob * pt, out, budget)?;
            }
            seq.pop();
        }
        Ok(())
    }

    let mut out = OutputDist::new();
    let mut seq = mdp.prompt.clone();
    walk(mdp, &mut seq, 1.0, &mut out, &mut Budget { used: 0, limit: mdp.budget })?;
    Ok(out)
}

/// Largest absolute difference between two output laws over the union of
/// their supports.
pub fn max_abs_diff(a: &OutputDist, b: &OutputDist) -> f64 {
    let keys: HashSet<&Vec<TokenId>> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Total variation distance between two output laws.
pub fn tv_distance(a: &OutputDist, b: &OutputDist) -> f64 {
    let keys: HashSet<&Vec<TokenId>> = a.keys().chain(b.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// `P(some Y_i, i ≤ k, is rejected)`: one minus the product of the
/// candidates' acceptance probabilities.
pub fn rejection_prob(mdp: &MicroMdp, state: &MdpState) -> Result<f64> {
    let ps = PolicyState { prefix: state.prefix.clone(), candidates: state.candidates.clone(), ..PolicyState::new(vec![]) };
    let (qs, pt) = mdp.round_dists(&ps);
    let mut all = 1.0;
    for ((y, q), p) in state.candidates.iter().zip(&qs).zip(&pt) {
        all *= accept_prob(p, q, *y)?;
    }
    Ok(1.0 - all)
}

/// Expected number of discarded candidates among those drafted so far.
fn expected_discards(mdp: &MicroMdp, state: &PolicyState) -> Result<f64> {
    let (qs, ps) = mdp.round_dists(state);
    let mut all = 1.0;
    let mut total = 0.0;
    for ((y, q), p) in state.candidates.iter().zip(&qs).zip(&ps) {
        all *= accept_prob(p, q, *y)?;
        total += 1.0 - all;
    }
    Ok(total)
}

/// Upper bound on the cost of any generation: every round a target pass and
/// `k_cap` draft passes, at most `max_len` rounds.
pub fn naive_delta_bound(mdp: &MicroMdp) -> f64 {
    let cfg = mdp.config();
    let (t_d, t_t) = (mdp.costs.t_draft, mdp.costs.t_target);
    cfg.max_len as f64 * t_t + (cfg.max_len * cfg.k_cap) as f64 * t_d
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct QValues {
    pub q_stop: f64,
    /// `None` where the engine forces a stop.
    pub q_continue: Option<f64>,
}

/// Memoized cost-to-go under a fixed policy.
pub struct QSolver<'a> {
    mdp: &'a MicroMdp,
    policy: &'a dyn StoppingPolicy,
    memo: HashMap<(Vec<TokenId>, usize), f64>,
    budget: Budget,
}

impl<'a> QSolver<'a> {
    pub fn new(mdp: &'a MicroMdp, policy: &'a dyn StoppingPolicy) -> Self {
        QSolver { mdp, policy, memo: HashMap::new(), budget: Budget { used: 0, limit: mdp.budget } }
    }

    /// Value of `state` when the policy (or a forced stop) picks the action.
    pub fn value(&mut self, state: &PolicyState) -> Result<f64> {
        let key = (state.context(), state.len());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.budget.spend()?;
        let v = if self.mdp.stops(self.policy, state) { self.q_stop(state)? } else { self.q_continue(state)? };
        self.memo.insert(key, v);
        Ok(v)
    }

    /// Value at the start of a round on `seq`; zero once generation is over.
    fn round_value(&mut self, seq: Vec<TokenId>, done: bool) -> Result<f64> {
        if done {
            Ok(0.0)
        } else {
            self.value(&PolicyState::new(seq))
        }
    }

    pub fn q_stop(&mut self, state: &PolicyState) -> Result<f64> {
        let (c1, c2) = (self.mdp.costs.c1(), self.mdp.costs.c2());
        let k = state.len();
        let mut total = 0.0;
        for (n, c, pr) in self.mdp.outcomes(state)? {
            let mut emitted = state.candidates[..n].to_vec();
            emitted.push(c);
            let (seq, done) = self.mdp.emit(&state.prefix, &emitted);
            total += pr * (c1 * (k - n) as f64 + c2 + self.round_value(seq, done)?);
        }
        Ok(total)
    }

    pub fn q_continue(&mut self, state: &PolicyState) -> Result<f64> {
        let q = self.mdp.decoder.draft_dist(&state.context());
        let mut total = 0.0;
        for (y, qy) in q.support() {
            let next = self.mdp.extend(self.policy, state, &q, y);
            total += qy * self.value(&next)?;
        }
        Ok(total)
    }

    pub fn q_values(&mut self, state: &PolicyState) -> Result<QValues> {
        let q_stop = self.q_stop(state)?;
        let q_continue = if self.mdp.is_forced(state) { None } else { Some(self.q_continue(state)?) };
        Ok(QValues { q_stop, q_continue })
    }
}

pub fn q_values(mdp: &MicroMdp, policy: &dyn StoppingPolicy, state: &MdpState) -> Result<QValues> {
    let ps = mdp.policy_state(policy, state)?;
    QSolver::new(mdp, policy).q_values(&ps)
}

/// Expected cost of a whole generation from the prompt.
pub fn initial_value(mdp: &MicroMdp, policy: &dyn StoppingPolicy) -> Result<f64> {
    QSolver::new(mdp, policy).value(&PolicyState::new(mdp.prompt.clone()))
}

/// Every state the engine can visit under `policy`, in depth-first order.
pub fn reachable_states(mdp: &MicroMdp, policy: &dyn StoppingPolicy) -> Result<Vec<PolicyState>> {
    fn draft(
        mdp: &MicroMdp,
        policy: &dyn StoppingPolicy,
        state: PolicyState,
        seen_rounds: &mut HashSet<Vec<TokenId>>,
        out: &mut Vec<PolicyState>,
        budget: &mut Budget,
    ) -> Result<()> {
        budget.spend()?;
        out.push(state.clone());
        if mdp.stops(policy, &state) {
            for (n, c, _) in mdp.outcomes(&state)? {
                let mut emitted = state.candidates[..n].to_vec();
                emitted.push(c);
                let (seq, done) = mdp.emit(&state.prefix, &emitted);
                if !done && seen_rounds.insert(seq.clone()) {
                    draft(mdp, policy, PolicyState::new(seq), seen_rounds, out, budget)?;
                }
            }
            return Ok(());
        }
        let q = mdp.decoder.draft_dist(&state.context());
        for (y, _) in q.support() {
            draft(mdp, policy, mdp.extend(policy, &state, &q, y), seen_rounds, out, budget)?;
        }
        Ok(())
    }

    let mut out = Vec::new();
    let mut seen = HashSet::from([mdp.prompt.clone()]);
    let start = PolicyState::new(mdp.prompt.clone());
    draft(mdp, policy, start, &mut seen, &mut out, &mut Budget { used: 0, limit: mdp.budget })?;
    Ok(out)
}

fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdRow {
    /// Space-separated token ids.
    pub prefix: String,
    pub candidates: String,
    pub rejection_prob: f64,
    pub q_stop: f64,
    pub q_continue: f64,
    pub condition_fires: bool,
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub delta: f64,
    /// `(c2 + Δ) / (c1 + c2 + Δ)`.
    pub threshold: f64,
    pub rows: Vec<ThresholdRow>,
}

impl ThresholdReport {
    pub fn fired(&self) -> usize {
        self.rows.iter().filter(|r| r.condition_fires).count()
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.violation).count()
    }

    /// True when no audited state met the condition, so the check is vacuous.
    pub fn never_fired(&self) -> bool {
        self.fired() == 0
    }
}

/// Slack allowed when comparing `Q_stop ≤ Q_continue`.
pub const THRESHOLD_TOLERANCE: f64 = 1e-12;

/// Audits every reachable state with at least one candidate where stopping
/// is a choice: if the rejection probability reaches
/// `(c2 + Δ)/(c1 + c2 + Δ)` with the naive Δ, stopping must cost no more than
/// continuing.
pub fn check_threshold_condition(mdp: &MicroMdp, policy: &dyn StoppingPolicy) -> Result<ThresholdReport> {
    let delta = naive_delta_bound(mdp);
    let (c1, c2) = (mdp.costs.c1(), mdp.costs.c2());
    let threshold = (c2 + delta) / (c1 + c2 + delta);
    let mut solver = QSolver::new(mdp, policy);
    let mut rows = Vec::new();
    for state in reachable_states(mdp, policy)? {
        if state.is_empty() || mdp.is_forced(&state) {
            continue;
        }
        let ms = MdpState { prefix: state.prefix.clone(), candidates: state.candidates.clone() };
        let rej = rejection_prob(mdp, &ms)?;
        let q = solver.q_values(&state)?;
        let q_continue = q.q_continue.expect("state is not forced");
        let fires = rej >= threshold;
        rows.push(ThresholdRow {
            prefix: render(&state.prefix),
            candidates: render(&state.candidates),
            rejection_prob: rej,
            q_stop: q.q_stop,
            q_continue,
            condition_fires: fires,
            violation: fires && q.q_stop > q_continue + THRESHOLD_TOLERANCE,
        });
    }
    Ok(ThresholdReport { delta, threshold, rows })
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct BellmanReport {
    pub states: usize,
    pub max_error: f64,
}

/// Recomputes every reachable state's Q-values by a one-step expansion that
/// charges `c1` when a candidate is drawn and will be discarded, and `c2` on
/// stop, against the solver's values of the successor states.
///
/// The solver instead charges every discard at verification time, so its
/// values exceed the expansion's by `c1` times the expected number of
/// discards among the candidates already drafted; the comparison accounts for
/// that offset.
pub fn bellman_check(mdp: &MicroMdp, policy: &dyn StoppingPolicy) -> Result<BellmanReport> {
    let c1 = mdp.costs.c1();
    let c2 = mdp.costs.c2();
    let mut solver = QSolver::new(mdp, policy);
    let mut max_error: f64 = 0.0;
    let states = reachable_states(mdp, policy)?;
    for state in &states {
        let q = solver.q_values(state)?;
        let offset = c1 * expected_discards(mdp, state)?;

        let mut stop = c2;
        for (n, c, pr) in mdp.outcomes(state)? {
            let mut emitted = state.candidates[..n].to_vec();
            emitted.push(c);
            let (seq, done) = mdp.emit(&state.prefix, &emitted);
            stop += pr * solver.round_value(seq, done)?;
        }
        max_error = max_error.max((q.q_stop - offset - stop).abs());

        if let Some(q_continue) = q.q_continue {
            let draft = mdp.decoder.draft_dist(&state.context());
            let mut cont = 0.0;
            for (y, qy) in draft.support() {
                let next = mdp.extend(policy, state, &draft, y);
                // the new candidate is discarded iff some candidate up to it is rejected
                let discard_new = rejection_prob_of(mdp, &next)?;
                let next_offset = c1 * expected_discards(mdp, &next)?;
                cont += qy * (c1 * discard_new + solver.value(&next)? - next_offset);
            }
            max_error = max_error.max((q_continue - offset - cont).abs());
        }
    }
    Ok(BellmanReport { states: states.len(), max_error })
}

fn rejection_prob_of(mdp: &MicroMdp, state: &PolicyState) -> Result<f64> {
    rejection_prob(mdp, &MdpState { prefix: state.prefix.clone(), candidates: state.candidates.clone() })
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub rollouts: usize,
}

/// Estimates [`initial_value`] by running the engine: each rollout's cost is
/// `c1·Σ(K − n) + c2·rounds`. Rollouts are split into chunks with derived
/// seeds and run in parallel; the result does not depend on the thread count.
pub fn monte_carlo_value(
    mdp: &MicroMdp,
    policy: &dyn StoppingPolicy,
    rollouts: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    const CHUNK: usize = 10_000;
    let (c1, c2) = (mdp.costs.c1(), mdp.costs.c2());
    let chunks = rollouts.div_ceil(CHUNK);
    let sums: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::derived_rng(seed, 0x3C, i as u64);
            let n = CHUNK.min(rollouts - i * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let trace = mdp.decoder.generate(&mdp.prompt, policy, &mut rng)?;
                let cost: f64 =
                    trace.rounds.iter().map(|r| c1 * (r.k() - r.n_accepted) as f64 + c2).sum();
                s += cost;
                s2 += cost * cost;
            }
            Ok((s, s2))
        })
        .collect::<Result<_>>()?;
    let n = rollouts as f64;
    let (s, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(MonteCarloEstimate { mean, std_error: (var / n).sqrt(), rollouts })
}

/// The policy set used by the test batteries: fixed lengths, the threshold
/// rule with exact and with untrained estimates, and both confidence rules.
pub fn battery_policies(mdp: &MicroMdp, seed: u64) -> Vec<Box<dyn StoppingPolicy>> {
    let mut rng = seeds::derived_rng(seed, 0xB7, 0);
    let head = Arc::new(PredictorHead::random(1, 4, &mut rng));
    let exact = Arc::new(TrueAcceptance::new(mdp.decoder.target().clone(), mdp.config().sampling.clone()));
    vec![
        Box::new(FixedK::new(1).expect("K ≥ 1")),
        Box::new(FixedK::new(3).expect("K ≥ 1")),
        Box::new(AdaptiveThreshold::new(exact, 0.3).expect("h in range")),
        Box::new(AdaptiveThreshold::new(head, 0.5).expect("h in range")),
        Box::new(DraftConfidence::new(0.4).expect("c in range")),
        Box::new(ConfidenceProduct::new(0.3).expect("c in range")),
    ]
}
