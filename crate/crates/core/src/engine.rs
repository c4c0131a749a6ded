//! The decoding engine: chained rejection-sampling verification and the
//! policy-driven speculation loop.
//!
//! # Random stream
//!
//! All randomness of a generation comes from one seeded stream, consumed in
//! a fixed order so traces reproduce exactly:
//!
//! 1. while drafting, for each candidate: one uniform to sample the candidate
//!    from the draft distribution, then one uniform `r_i` for its acceptance
//!    test;
//! 2. after verification: one uniform to sample the correction token (from
//!    the residual distribution on rejection, from the target on full
//!    acceptance).
//!
//! The standalone [`verify`] draws all `r_i` first and then the correction.
//!
//! # Forced stops
//!
//! Drafting stops regardless of the policy when the newest candidate is the
//! end-of-sequence token, when the round holds `k_cap` candidates, or when the
//! round could already fill the output (`|prefix| + k + 1 ≥ max_len`, the `+1`
//! being the correction token every round emits). The last rule applies
//! before the first candidate too: with one slot left, the round is a plain
//! target step.
//!
//! # Counters
//!
//! A bonus token emitted after an accepted end-of-sequence candidate is
//! dropped from the output and counted as discarded, which keeps
//! `N_draft + N_target = N + N_discarded` exact for every trace.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{self, accept_prob, residual, sample_with, Dist, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::policies::{Decision, PolicyState, StoppingPolicy};
use crate::predictor::FeatureVec;

/// Default bound on candidates per round.
pub const DEFAULT_K_CAP: usize = 20;

/// Temperature / top-k / greedy transform applied identically to draft and
/// target distributions before drafting and verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: Option<usize>,
    /// Decode both models by argmax: every distribution becomes a point mass.
    pub greedy: bool,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling { temperature: 1.0, top_k: None, greedy: false }
    }
}

impl Sampling {
    pub fn greedy() -> Self {
        Sampling { greedy: true, ..Sampling::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == Some(0) {
            return Err(Error::InvalidParameter("top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.greedy && self.temperature == 1.0 && self.top_k.is_none()
    }

    pub fn apply(&self, d: Dist) -> Dist {
        if self.greedy {
            return Dist::point_mass(d.len(), d.argmax());
        }
        let d = if self.temperature == 1.0 { d } else { distributions::temper(&d, self.temperature) };
        match self.top_k {
            Some(k) => distributions::top_k_truncate(&d, k),
            None => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k_cap: usize,
    /// Bound on prompt plus generated tokens.
    pub max_len: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

impl EngineConfig {
    pub fn new(max_len: usize) -> Self {
        EngineConfig { k_cap: DEFAULT_K_CAP, max_len, sampling: Sampling::default() }
    }

    pub fn with_k_cap(mut self, k_cap: usize) -> Self {
        self.k_cap = k_cap;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_cap == 0 {
            return Err(Error::InvalidParameter("k_cap must be at least 1".into()));
        }
        self.sampling.validate()
    }
}

/// True when drafting must stop after `candidates`, whatever the policy says.
pub fn forced_stop(config: &EngineConfig, eos: TokenId, prefix_len: usize, candidates: &[TokenId]) -> bool {
    prefix_len + candidates.len() + 1 >= config.max_len
        || candidates.last().is_some_and(|&last| last == eos || candidates.len() >= config.k_cap)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionKind {
    /// Sampled from the residual distribution after a rejection.
    Replaced,
    /// Sampled from the target after every candidate was accepted.
    Bonus,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Verification {
    pub n_accepted: usize,
    pub correction: TokenId,
    pub kind: CorrectionKind,
}

fn check_shapes(candidates: &[TokenId], draft_dists: &[Dist], target_dists: &[Dist]) -> Result<()> {
    if draft_dists.len() != candidates.len() || target_dists.len() != candidates.len() + 1 {
        return Err(Error::Domain(format!(
            "{} candidates need {} draft and {} target distributions, got {} and {}",
            candidates.len(),
            candidates.len(),
            candidates.len() + 1,
            draft_dists.len(),
            target_dists.len()
        )));
    }
    Ok(())
}

/// `min(1, p_i(y_i) / q_i(y_i))` for every candidate.
pub fn accept_probs(candidates: &[TokenId], draft_dists: &[Dist], target_dists: &[Dist]) -> Result<Vec<f64>> {
    check_shapes(candidates, draft_dists, target_dists)?;
    candidates
        .iter()
        .zip(draft_dists)
        .zip(target_dists)
        .map(|((&y, q), p)| accept_prob(p, q, y))
        .collect()
}

/// Verifies drafted candidates against the target.
///
/// Draws `r_1 … r_K` from `rng`, accepts the longest prefix with
/// `r_i < p_i(y_i)/q_i(y_i)`, then samples the correction token.
pub fn verify<R: Rng + ?Sized>(
    candidates: &[TokenId],
    draft_dists: &[Dist],
    target_dists: &[Dist],
    rng: &mut R,
) -> Result<Verification> {
    let uniforms: Vec<f64> = (0..candidates.len()).map(|_| rng.random()).collect();
    verify_with_uniforms(candidates, draft_dists, target_dists, &uniforms, rng)
}

/// [`verify`] with the acceptance uniforms supplied by the caller; `rng` is
/// used only for the correction token.
pub fn verify_with_uniforms<R: Rng + ?Sized>(
    candidates: &[TokenId],
    draft_dists: &[Dist],
    target_dists: &[Dist],
    uniforms: &[f64],
    rng: &mut R,
) -> Result<Verification> {
    let ratios = accept_probs(candidates, draft_dists, target_dists)?;
    if uniforms.len() != candidates.len() {
        return Err(Error::Domain("one uniform per candidate required".into()));
    }
    let k = candidates.len();
    let n = ratios.iter().zip(uniforms).position(|(ratio, r)| r >= ratio).unwrap_or(k);
    let u: f64 = rng.random();
    if n < k {
        let fix = residual(&target_dists[n], &draft_dists[n])
            .expect("a rejection implies p != q, so the residual has mass");
        Ok(Verification { n_accepted: n, correction: sample_with(&fix, u), kind: CorrectionKind::Replaced })
    } else {
        Ok(Verification { n_accepted: k, correction: sample_with(&target_dists[k], u), kind: CorrectionKind::Bonus })
    }
}

/// Everything that happened in one draft/verify round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub candidates: Vec<TokenId>,
    pub draft_dists: Vec<Dist>,
    pub target_dists: Vec<Dist>,
    pub accept_probs: Vec<f64>,
    pub n_accepted: usize,
    pub correction: TokenId,
    pub correction_kind: CorrectionKind,
    /// Emitted tokens cut off by an end-of-sequence token or `max_len`.
    #[serde(default)]
    pub dropped: usize,
}

impl RoundRecord {
    /// Number of drafted candidates.
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    /// Accepted candidates followed by the correction token.
    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out = self.candidates[..self.n_accepted].to_vec();
        out.push(self.correction);
        out
    }

    /// Rejected or never-checked candidates, plus dropped tokens.
    pub fn discarded(&self) -> usize {
        self.k() - self.n_accepted + self.dropped
    }

    pub fn check(&self) -> Result<()> {
        let k = self.k();
        let bad = |msg: String| Err(Error::Domain(msg));
        if self.n_accepted > k {
            return bad(format!("{} accepted out of {k}", self.n_accepted));
        }
        if (self.correction_kind == CorrectionKind::Bonus) != (self.n_accepted == k) {
            return bad("bonus correction iff every candidate accepted".into());
        }
        let recomputed = accept_probs(&self.candidates, &self.draft_dists, &self.target_dists)?;
        if recomputed.len() != self.accept_probs.len()
            || recomputed.iter().zip(&self.accept_probs).any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return bad("stored acceptance probabilities disagree with stored distributions".into());
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Generated tokens kept in the output.
    pub n: usize,
    /// Draft forward passes (candidates drafted).
    pub n_draft: usize,
    /// Target forward passes (rounds).
    pub n_target: usize,
    pub n_discarded: usize,
}

impl Counters {
    pub fn identity_holds(&self) -> bool {
        self.n_draft + self.n_target == self.n + self.n_discarded
    }
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, rhs: Self) {
        self.n += rhs.n;
        self.n_draft += rhs.n_draft;
        self.n_target += rhs.n_target;
        self.n_discarded += rhs.n_discarded;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<TokenId>,
    /// Generated tokens, prompt excluded.
    pub output: Vec<TokenId>,
    pub rounds: Vec<RoundRecord>,
    pub counters: Counters,
}

impl GenerationTrace {
    /// Checks every counter invariant and every round record.
    pub fn check(&self) -> Result<()> {
        let c = &self.counters;
        let sum_k: usize = self.rounds.iter().map(RoundRecord::k).sum();
        let sum_disc: usize = self.rounds.iter().map(RoundRecord::discarded).sum();
        if c.n != self.output.len() || c.n_draft != sum_k || c.n_target != self.rounds.len() || c.n_discarded != sum_disc
        {
            return Err(Error::Domain(format!("counters {c:?} disagree with the rounds")));
        }
        if !c.identity_holds() {
            return Err(Error::Domain(format!("trace identity violated: {c:?}")));
        }
        self.rounds.iter().try_for_each(RoundRecord::check)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Draft/target pair plus engine settings.
#[derive(Clone)]
pub struct SpecDecoder {
    target: Arc<dyn LanguageModel>,
    draft: Arc<dyn LanguageModel>,
    config: EngineConfig,
}

impl SpecDecoder {
    pub fn new(target: Arc<dyn LanguageModel>, draft: Arc<dyn LanguageModel>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let (tv, dv) = (target.vocab(), draft.vocab());
        if tv.size() != dv.size() {
            return Err(Error::VocabMismatch { expected: tv.size(), actual: dv.size() });
        }
        if tv.eos() != dv.eos() {
            return Err(Error::InvalidParameter("draft and target disagree on eos".into()));
        }
        Ok(SpecDecoder { target, draft, config })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        self.target.vocab()
    }

    pub fn target(&self) -> &Arc<dyn LanguageModel> {
        &self.target
    }

    pub fn draft(&self) -> &Arc<dyn LanguageModel> {
        &self.draft
    }

    /// Target next-token distribution after the sampling transform.
    pub fn target_dist(&self, context: &[TokenId]) -> Dist {
        self.config.sampling.apply(self.target.next_dist(context))
    }

    /// Draft next-token distribution after the sampling transform.
    pub fn draft_dist(&self, context: &[TokenId]) -> Dist {
        self.config.sampling.apply(self.draft.next_dist(context))
    }

    /// Drafts candidates until the policy or a forced stop ends the round,
    /// then verifies them.
    ///
    /// The policy is consulted before the first candidate too; only policies
    /// that can stop with nothing drafted (the greedy oracle) make use of it,
    /// yielding a plain target step.
    pub fn run_round<R: Rng + ?Sized>(
        &self,
        prefix: &[TokenId],
        policy: &dyn StoppingPolicy,
        rng: &mut R,
    ) -> Result<RoundRecord> {
        let eos = self.vocab().eos();
        let mut state = PolicyState::new(prefix.to_vec());
        let mut seq = prefix.to_vec();
        let mut draft_dists = Vec::new();
        let mut uniforms = Vec::new();
        loop {
            if forced_stop(&self.config, eos, prefix.len(), &state.candidates) {
                break;
            }
            if policy.decide(&state) == Decision::Stop {
                break;
            }
            let q = self.draft_dist(&seq);
            let y = sample_with(&q, rng.random());
            let r: f64 = rng.random();
            let position = state.len() + 1;
            let features = FeatureVec::compute(&q, y, position, self.config.k_cap, state.prev_cum_q());
            state.advance(policy, y, features);
            seq.push(y);
            draft_dists.push(q);
            uniforms.push(r);
        }
        let k = state.len();
        let target_dists: Vec<Dist> = (0..=k).map(|i| self.target_dist(&seq[..prefix.len() + i])).collect();
        let v = verify_with_uniforms(&state.candidates, &draft_dists, &target_dists, &uniforms, rng)?;
        let accept_probs = accept_probs(&state.candidates, &draft_dists, &target_dists)?;
        Ok(RoundRecord {
            candidates: state.candidates,
            draft_dists,
            target_dists,
            accept_probs,
            n_accepted: v.n_accepted,
            correction: v.correction,
            correction_kind: v.kind,
            dropped: 0,
        })
    }

    /// Runs rounds until an end-of-sequence token is emitted or the sequence
    /// reaches `max_len`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        prompt: &[TokenId],
        policy: &dyn StoppingPolicy,
        rng: &mut R,
    ) -> Result<GenerationTrace> {
        let max_len = self.config.max_len;
        if max_len <= prompt.len() {
            return Err(Error::InvalidParameter(format!(
                "max_len {max_len} leaves no room after a {}-token prompt",
                prompt.len()
            )));
        }
        prompt.iter().try_for_each(|&t| self.vocab().check(t))?;
        if policy.requires_greedy() && !self.config.sampling.greedy {
            return Err(Error::Misuse(format!("policy {} needs greedy decoding", policy.name())));
        }
        let eos = self.vocab().eos();
        let mut seq = prompt.to_vec();
        let mut rounds = Vec::new();
        let mut counters = Counters::default();
        loop {
            let mut round = self.run_round(&seq, policy, rng)?;
            let emitted = round.emitted();
            let mut kept = 0;
            let mut ended = false;
            for &tok in &emitted {
                if seq.len() >= max_len {
                    break;
                }
                seq.push(tok);
                kept += 1;
                if tok == eos {
                    ended = true;
                    break;
                }
            }
            round.dropped = emitted.len() - kept;
            counters += Counters { n: kept, n_draft: round.k(), n_target: 1, n_discarded: round.discarded() };
            rounds.push(round);
            if ended || seq.len() >= max_len {
                break;
            }
        }
        Ok(GenerationTrace { output: seq[prompt.len()..].to_vec(), prompt: prompt.to_vec(), rounds, counters })
    }
}

const BATCH_STREAM: u64 = 0xBE;

impl SpecDecoder {
    /// One generation per prompt, run in parallel. Prompt `i` uses the stream
    /// derived from `(seed, i)`, so results do not depend on the thread count.
    pub fn generate_batch(
        &self,
        prompts: &[Vec<TokenId>],
        policy: &dyn StoppingPolicy,
        seed: u64,
    ) -> Result<Vec<GenerationTrace>> {
        use rayon::prelude::*;
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| self.generate(p, policy, &mut crate::seeds::derived_rng(seed, BATCH_STREAM, i as u64)))
            .collect()
    }
}

/// Autoregressive sampling from a single model (with the sampling transform),
/// stopping at end-of-sequence or `max_len`. Returns the generated tokens.
pub fn sample_autoregressive<R: Rng + ?Sized>(
    model: &dyn LanguageModel,
    sampling: &Sampling,
    prompt: &[TokenId],
    max_len: usize,
    rng: &mut R,
) -> Vec<TokenId> {
    let eos = model.vocab().eos();
    let mut seq = prompt.to_vec();
    while seq.len() < max_len {
        let d = sampling.apply(model.next_dist(&seq));
        let tok = sample_with(&d, rng.random());
        seq.push(tok);
        if tok == eos {
            break;
        }
    }
    seq.split_off(prompt.len())
}
