//! Stopping policies: after each drafted candidate, decide whether to keep
//! drafting or hand the round to the target for verification.
//!
//! Forced stops (eos, `k_cap`, `max_len`) live in the engine, so policies
//! only ever see states where stopping is a real choice.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use crate::distributions::TokenId;
use crate::engine::Sampling;
use crate::error::{Error, Result};
use crate::lm::{greedy_token, LanguageModel};
use crate::predictor::{FeatureVec, PredictorHead};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

impl Decision {
    fn stop_if(cond: bool) -> Self {
        if cond {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

/// What a policy sees inside one round.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub prefix: Vec<TokenId>,
    pub candidates: Vec<TokenId>,
    pub features: Vec<FeatureVec>,
    /// Product of the policy's per-candidate acceptance estimates this round.
    pub cumulative_accept: f64,
}

impl PolicyState {
    pub fn new(prefix: Vec<TokenId>) -> Self {
        PolicyState { prefix, candidates: Vec::new(), features: Vec::new(), cumulative_accept: 1.0 }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Product of the draft probabilities of the candidates so far.
    pub fn prev_cum_q(&self) -> f64 {
        self.features.last().map_or(1.0, FeatureVec::cum_q)
    }

    /// Predicted probability that some candidate so far is rejected.
    pub fn rejection_risk(&self) -> f64 {
        1.0 - self.cumulative_accept
    }

    /// Prefix followed by the candidates.
    pub fn context(&self) -> Vec<TokenId> {
        let mut c = self.prefix.clone();
        c.extend_from_slice(&self.candidates);
        c
    }

    /// Appends a candidate and folds the policy's acceptance estimate for it
    /// into `cumulative_accept`.
    pub fn advance(&mut self, policy: &dyn StoppingPolicy, candidate: TokenId, features: FeatureVec) {
        self.candidates.push(candidate);
        self.features.push(features);
        let beta = policy.acceptance_estimate(self).clamp(0.0, 1.0);
        self.cumulative_accept *= beta;
    }
}

pub trait StoppingPolicy: Send + Sync {
    /// Short identifier, e.g. `fixed`.
    fn name(&self) -> &'static str;

    /// Parameter string, e.g. `K=4`.
    fn params(&self) -> String;

    /// Estimated acceptance probability of the newest candidate in `state`.
    /// Called once per candidate, before `decide`.
    fn acceptance_estimate(&self, _state: &PolicyState) -> f64 {
        1.0
    }

    fn decide(&self, state: &PolicyState) -> Decision;

    /// Only meaningful when both models decode by argmax.
    fn requires_greedy(&self) -> bool {
        false
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Always drafts exactly `K` candidates.
#[derive(Clone, Debug)]
pub struct FixedK {
    k: usize,
}

impl FixedK {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        Ok(FixedK { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl StoppingPolicy for FixedK {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn params(&self) -> String {
        format!("K={}", self.k)
    }

    fn decide(&self, state: &PolicyState) -> Decision {
        Decision::stop_if(state.len() >= self.k)
    }
}

/// Source of per-candidate acceptance probabilities.
pub trait AcceptanceEstimator: Send + Sync {
    fn name(&self) -> String;
    fn estimate(&self, state: &PolicyState) -> f64;
}

impl AcceptanceEstimator for PredictorHead {
    fn name(&self) -> String {
        format!("head(D={},H={})", self.depth(), self.width())
    }

    fn estimate(&self, state: &PolicyState) -> f64 {
        state.features.last().map_or(1.0, |f| self.predict(f))
    }
}

/// The exact acceptance probability `min(1, p(y)/q(y))`, read off the target.
/// Not available in a real deployment; used to study the threshold rule with
/// a perfect predictor.
pub struct TrueAcceptance {
    target: Arc<dyn LanguageModel>,
    sampling: Sampling,
}

impl TrueAcceptance {
    pub fn new(target: Arc<dyn LanguageModel>, sampling: Sampling) -> Self {
        TrueAcceptance { target, sampling }
    }
}

impl AcceptanceEstimator for TrueAcceptance {
    fn name(&self) -> String {
        "true".into()
    }

    fn estimate(&self, state: &PolicyState) -> f64 {
        let (Some(&y), Some(f)) = (state.candidates.last(), state.features.last()) else {
            return 1.0;
        };
        let mut ctx = state.prefix.clone();
        ctx.extend_from_slice(&state.candidates[..state.len() - 1]);
        let p = self.sampling.apply(self.target.next_dist(&ctx)).prob(y);
        let q = f.q_y();
        if q <= 0.0 {
            0.0
        } else {
            (p / q).min(1.0)
        }
    }
}

/// Stops once the predicted probability that some candidate of the round is
/// rejected exceeds `h`.
#[derive(Clone)]
pub struct AdaptiveThreshold {
    estimator: Arc<dyn AcceptanceEstimator>,
    h: f64,
}

impl AdaptiveThreshold {
    pub fn new(estimator: Arc<dyn AcceptanceEstimator>, h: f64) -> Result<Self> {
        check_unit("h", h)?;
        Ok(AdaptiveThreshold { estimator, h })
    }

    /// Panics if `h` is outside `[0, 1]`.
    pub fn with_head(head: Arc<PredictorHead>, h: f64) -> Self {
        Self::new(head, h).expect("threshold in [0, 1]")
    }

    pub fn h(&self) -> f64 {
        self.h
    }
}

impl StoppingPolicy for AdaptiveThreshold {
    fn name(&self) -> &'static str {
        "adaptive"
    }

    fn params(&self) -> String {
        format!("h={};est={}", self.h, self.estimator.name())
    }

    fn acceptance_estimate(&self, state: &PolicyState) -> f64 {
        self.estimator.estimate(state)
    }

    fn decide(&self, state: &PolicyState) -> Decision {
        Decision::stop_if(!state.is_empty() && state.rejection_risk() > self.h)
    }
}

/// Stops when the newest candidate's draft probability falls below `c`.
#[derive(Clone, Debug)]
pub struct DraftConfidence {
    c: f64,
}

impl DraftConfidence {
    pub fn new(c: f64) -> Result<Self> {
        check_unit("c", c)?;
        Ok(DraftConfidence { c })
    }
}

impl StoppingPolicy for DraftConfidence {
    fn name(&self) -> &'static str {
        "confidence"
    }

    fn params(&self) -> String {
        format!("c={}", self.c)
    }

    fn decide(&self, state: &PolicyState) -> Decision {
        Decision::stop_if(state.features.last().is_some_and(|f| f.q_y() < self.c))
    }
}

/// Stops when the product of the round's draft probabilities falls below `c`.
#[derive(Clone, Debug)]
pub struct ConfidenceProduct {
    c: f64,
}

impl ConfidenceProduct {
    pub fn new(c: f64) -> Result<Self> {
        check_unit("c", c)?;
        Ok(ConfidenceProduct { c })
    }
}

impl StoppingPolicy for ConfidenceProduct {
    fn name(&self) -> &'static str {
        "confprod"
    }

    fn params(&self) -> String {
        format!("c={}", self.c)
    }

    fn decide(&self, state: &PolicyState) -> Decision {
        Decision::stop_if(!state.is_empty() && state.prev_cum_q() < self.c)
    }
}

/// Greedy-mode oracle: keeps drafting while the next draft token agrees with
/// the target's greedy token, so nothing is ever discarded. It peeks at the
/// target and is for analysis only.
pub struct OracleGreedy {
    target: Arc<dyn LanguageModel>,
    draft: Arc<dyn LanguageModel>,
}

impl OracleGreedy {
    pub fn new(target: Arc<dyn LanguageModel>, draft: Arc<dyn LanguageModel>) -> Self {
        OracleGreedy { target, draft }
    }
}

impl StoppingPolicy for OracleGreedy {
    fn name(&self) -> &'static str {
        "oracle-greedy"
    }

    fn params(&self) -> String {
        String::new()
    }

    fn decide(&self, state: &PolicyState) -> Decision {
        let ctx = state.context();
        Decision::stop_if(greedy_token(self.draft.as_ref(), &ctx) != greedy_token(self.target.as_ref(), &ctx))
    }

    fn requires_greedy(&self) -> bool {
        true
    }
}

/// Textual policy description, as accepted on the command line:
/// `fixed:4`, `adaptive:h=0.7:head=heads/d3.json`, `adaptive-oracle:h=0.5`,
/// `confidence:c=0.5`, `confprod:c=0.5`, `oracle-greedy`.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicySpec {
    Fixed(usize),
    Adaptive { h: f64, head: PathBuf },
    /// Threshold rule driven by the true acceptance probabilities.
    AdaptiveOracle { h: f64 },
    Confidence(f64),
    ConfidenceProduct(f64),
    OracleGreedy,
}

/// Models a [`PolicySpec`] may need when built.
pub struct PolicyContext {
    pub target: Arc<dyn LanguageModel>,
    pub draft: Arc<dyn LanguageModel>,
    pub sampling: Sampling,
}

impl PolicySpec {
    pub fn build(&self, ctx: &PolicyContext) -> Result<Box<dyn StoppingPolicy>> {
        Ok(match self {
            PolicySpec::Fixed(k) => Box::new(FixedK::new(*k)?),
            PolicySpec::Adaptive { h, head } => {
                Box::new(AdaptiveThreshold::new(Arc::new(PredictorHead::load(head)?), *h)?)
            }
            PolicySpec::AdaptiveOracle { h } => Box::new(AdaptiveThreshold::new(
                Arc::new(TrueAcceptance::new(ctx.target.clone(), ctx.sampling.clone())),
                *h,
            )?),
            PolicySpec::Confidence(c) => Box::new(DraftConfidence::new(*c)?),
            PolicySpec::ConfidenceProduct(c) => Box::new(ConfidenceProduct::new(*c)?),
            PolicySpec::OracleGreedy => Box::new(OracleGreedy::new(ctx.target.clone(), ctx.draft.clone())),
        })
    }

    /// True for policies that look at the target model.
    pub fn is_oracle(&self) -> bool {
        matches!(self, PolicySpec::AdaptiveOracle { .. } | PolicySpec::OracleGreedy)
    }
}

fn key_value<'a>(part: &'a str, key: &str) -> Result<&'a str> {
    match part.split_once('=') {
        Some((k, v)) if k == key => Ok(v),
        _ => Err(Error::parse("policy", format!("expected {key}=..., got {part:?}"))),
    }
}

fn number<T: FromStr>(what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::parse("policy", format!("bad {what}: {s:?}")))
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let spec = match parts.as_slice() {
            ["fixed", k] => PolicySpec::Fixed(number("K", k)?),
            ["adaptive", h, head] => PolicySpec::Adaptive {
                h: number("h", key_value(h, "h")?)?,
                head: PathBuf::from(key_value(head, "head")?),
            },
            ["adaptive-oracle", h] => PolicySpec::AdaptiveOracle { h: number("h", key_value(h, "h")?)? },
            ["confidence", c] => PolicySpec::Confidence(number("c", key_value(c, "c")?)?),
            ["confprod", c] => PolicySpec::ConfidenceProduct(number("c", key_value(c, "c")?)?),
            ["oracle-greedy"] => PolicySpec::OracleGreedy,
            _ => return Err(Error::parse("policy", format!("unrecognised policy {s:?}"))),
        };
        match &spec {
            PolicySpec::Fixed(0) => Err(Error::parse("policy", "K must be at least 1")),
            PolicySpec::Adaptive { h, .. } | PolicySpec::AdaptiveOracle { h } if !(0.0..=1.0).contains(h) => {
                Err(Error::parse("policy", format!("h out of range: {h}")))
            }
            PolicySpec::Confidence(c) | PolicySpec::ConfidenceProduct(c) if !(0.0..=1.0).contains(c) => {
                Err(Error::parse("policy", format!("c out of range: {c}")))
            }
            _ => Ok(spec),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Fixed(k) => write!(f, "fixed:{k}"),
            PolicySpec::Adaptive { h, head } => write!(f, "adaptive:h={h}:head={}", head.display()),
            PolicySpec::AdaptiveOracle { h } => write!(f, "adaptive-oracle:h={h}"),
            PolicySpec::Confidence(c) => write!(f, "confidence:c={c}"),
            PolicySpec::ConfidenceProduct(c) => write!(f, "confprod:c={c}"),
            PolicySpec::OracleGreedy => write!(f, "oracle-greedy"),
        }
    }
}
