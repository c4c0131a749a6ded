//! Training data for the acceptance head, built by token mixing.
//!
//! For each prompt a response `X` is sampled from the target. At every
//! position a draft token `Y_i ~ q(·|x, X_<i)` is drawn and labelled with its
//! acceptance probability `min(1, p(Y_i)/q(Y_i))`. A mixed sequence `Z` takes
//! `X_i` with probability `r%` and `Y_i` otherwise. Features describe `Y_i`
//! appended to the `Z` prefix, and only positions where `Z_i = Y_i` carry loss.
//!
//! Round-dependent features (position in round, running product of draft
//! probabilities) have no natural value outside decoding, so the sequence is
//! cut into pseudo-rounds whose lengths are uniform on `1..=k_cap`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureVec;
use super::head::PredictorHead;
use crate::distributions::{accept_prob, sample_with, TokenId};
use crate::engine::{sample_autoregressive, Sampling, DEFAULT_K_CAP};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::seeds;

const DATASET_STREAM: u64 = 0xDA7A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub features: FeatureVec,
    /// Acceptance probability of the candidate.
    pub label: f64,
    /// Whether the example counts towards the loss.
    #[serde(rename = "mask")]
    pub include_in_loss: bool,
}

/// Which prefix the label is computed on.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPrefix {
    /// The target-generated prefix `X_<i`, on which `Y_i` was sampled.
    #[default]
    Target,
    /// The mixed prefix `Z_<i` the features are computed on.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Percentage of positions taken from the target response.
    pub r_percent: f64,
    /// Bound on prompt plus response length.
    pub max_len: usize,
    pub k_cap: usize,
    pub label_prefix: LabelPrefix,
    pub sampling: Sampling,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            r_percent: 15.0,
            max_len: 128,
            k_cap: DEFAULT_K_CAP,
            label_prefix: LabelPrefix::Target,
            sampling: Sampling::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.r_percent) {
            return Err(Error::InvalidParameter(format!("r_percent must lie in [0, 100], got {}", self.r_percent)));
        }
        if self.k_cap == 0 {
            return Err(Error::InvalidParameter("k_cap must be at least 1".into()));
        }
        self.sampling.validate()
    }
}

/// Generates one example per response position of every prompt.
///
/// Prompts are processed in parallel, each with its own stream derived from
/// `seed` and the prompt index, so the result does not depend on the thread
/// count.
pub fn gen_dataset(
    target: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    prompts: &[Vec<TokenId>],
    config: &DatasetConfig,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    config.validate()?;
    if target.vocab().size() != draft.vocab().size() {
        return Err(Error::VocabMismatch { expected: target.vocab().size(), actual: draft.vocab().size() });
    }
    let per_prompt: Vec<Vec<TrainingExample>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = seeds::derived_rng(seed, DATASET_STREAM, i as u64);
            examples_for_prompt(target, draft, prompt, config, &mut rng)
        })
        .collect();
    Ok(per_prompt.into_iter().flatten().collect())
}

fn examples_for_prompt<R: Rng + ?Sized>(
    target: &dyn LanguageModel,
    draft: &dyn LanguageModel,
    prompt: &[TokenId],
    config: &DatasetConfig,
    rng: &mut R,
) -> Vec<TrainingExample> {
    let s = &config.sampling;
    let response = sample_autoregressive(target, s, prompt, config.max_len, rng);
    let mut x_ctx = prompt.to_vec();
    let mut z_ctx = prompt.to_vec();
    let mut out = Vec::with_capacity(response.len());
    let mut round_left = 0usize;
    let mut position = 0usize;
    let mut cum_q = 1.0;
    for &x in &response {
        let q_x = s.apply(draft.next_dist(&x_ctx));
        let y = sample_with(&q_x, rng.random());
        let from_target = rng.random::<f64>() * 100.0 < config.r_percent;

        let q_z = s.apply(draft.next_dist(&z_ctx));
        let label = match config.label_prefix {
            LabelPrefix::Target => accept_prob(&s.apply(target.next_dist(&x_ctx)), &q_x, y),
            LabelPrefix::Mixed => accept_prob(&s.apply(target.next_dist(&z_ctx)), &q_z, y),
        };
        // y may have no mass under the Z-prefix draft; such a position could
        // never be a candidate there, so it is skipped
        if let Ok(label) = label {
            if q_z.prob(y) > 0.0 {
                if round_left == 0 {
                    round_left = rng.random_range(1..=config.k_cap);
                    position = 0;
                    cum_q = 1.0;
                }
                position += 1;
                round_left -= 1;
                let features = FeatureVec::compute(&q_z, y, position, config.k_cap, cum_q);
                cum_q = features.cum_q();
                out.push(TrainingExample { features, label, include_in_loss: !from_target });
            }
        }
        x_ctx.push(x);
        z_ctx.push(if from_target { x } else { y });
    }
    out
}

/// Mean binary KL divergence `KL(P‖β̂)` over the examples carrying loss.
pub fn eval_binary_kl(head: &PredictorHead, examples: &[TrainingExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples.iter().filter(|e| e.include_in_loss) {
        total += binary_kl(ex.label, head.predict(&ex.features));
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / count as f64)
}

/// `p ln(p/q) + (1−p) ln((1−p)/(1−q))` with `0·ln 0 = 0`.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line)?;
        if !ex.features.is_finite() || !(0.0..=1.0).contains(&ex.label) {
            return Err(Error::parse("dataset", format!("bad example: {line}")));
        }
        out.push(ex);
    }
    Ok(out)
}
