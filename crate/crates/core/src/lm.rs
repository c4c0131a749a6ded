//! Small language models that play the draft and target roles.
//!
//! Every model maps a token context to a next-token [`Dist`] and is
//! deterministic: the same context always yields bitwise-identical output.
//! Contexts shorter than a model's order are left-padded with the vocabulary's
//! BOS sentinel (`vocab.size()`), which never appears in a distribution.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{self, normalize, Dist, TokenId, Vocab};
use crate::error::{Error, Result};

pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Number of trailing context tokens the model reads; 0 means unconditional.
    fn context_order(&self) -> usize;

    fn next_dist(&self, context: &[TokenId]) -> Dist;

    /// Serializable form, when the model has one.
    fn to_saved(&self) -> Option<SavedModel> {
        None
    }
}

/// Most likely next token, ties toward the lower id.
pub fn greedy_token(model: &dyn LanguageModel, context: &[TokenId]) -> TokenId {
    model.next_dist(context).argmax()
}

/// Last `order` tokens of `context`, left-padded with the BOS sentinel.
fn context_key(vocab: &Vocab, order: usize, context: &[TokenId]) -> Vec<u32> {
    let mut key = Vec::with_capacity(order);
    let have = context.len().min(order);
    key.extend(std::iter::repeat_n(vocab.bos_sentinel(), order - have));
    key.extend(context[context.len() - have..].iter().map(|t| t.0));
    key
}

fn join_key(key: &[u32]) -> String {
    key.iter().map(u32::to_string).collect::<Vec<_>>().join("-")
}

fn split_key(s: &str) -> Result<Vec<u32>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('-')
        .map(|part| part.parse::<u32>().map_err(|e| Error::parse("count key", format!("{s:?}: {e}"))))
        .collect()
}

// ---------------------------------------------------------------------------
// k-gram
// ---------------------------------------------------------------------------

/// Add-α smoothed k-gram model: `next_dist(c) = normalize(counts(last-m(c)) + α)`.
#[derive(Clone, Debug)]
pub struct KGramModel {
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    counts: HashMap<Vec<u32>, Vec<f64>>,
}

impl KGramModel {
    pub fn fit(corpus: &[Vec<TokenId>], vocab: Vocab, order: usize, smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothing must be positive, got {smoothing}")));
        }
        if corpus.iter().all(Vec::is_empty) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        for seq in corpus {
            for (i, &tok) in seq.iter().enumerate() {
                vocab.check(tok)?;
                let key = context_key(&vocab, order, &seq[..i]);
                counts.entry(key).or_insert_with(|| vec![0.0; vocab.size()])[tok.index()] += 1.0;
            }
        }
        Ok(KGramModel { vocab, order, smoothing, counts })
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    /// Raw count of `token` after `context`.
    pub fn count(&self, context: &[TokenId], token: TokenId) -> f64 {
        let key = context_key(&self.vocab, self.order, context);
        self.counts.get(&key).map_or(0.0, |row| row[token.index()])
    }

    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    fn from_saved(vocab: Vocab, order: usize, smoothing: f64, flat: &BTreeMap<String, f64>) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::InvalidParameter(format!("smoothing must be positive, got {smoothing}")));
        }
        let mut counts: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        for (k, &c) in flat {
            let mut key = split_key(k)?;
            let tok = key.pop().ok_or_else(|| Error::parse("count key", "empty key"))?;
            if key.len() != order || tok as usize >= vocab.size() {
                return Err(Error::parse("count key", format!("{k:?} does not match order {order}")));
            }
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::parse("count", format!("{k:?} has count {c}")));
            }
            counts.entry(key).or_insert_with(|| vec![0.0; vocab.size()])[tok as usize] = c;
        }
        Ok(KGramModel { vocab, order, smoothing, counts })
    }
}

impl LanguageModel for KGramModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_order(&self) -> usize {
        self.order
    }

    fn next_dist(&self, context: &[TokenId]) -> Dist {
        let key = context_key(&self.vocab, self.order, context);
        match self.counts.get(&key) {
            Some(row) => {
                let smoothed: Vec<f64> = row.iter().map(|c| c + self.smoothing).collect();
                normalize(&smoothed).expect("smoothed counts are positive")
            }
            None => Dist::uniform(self.vocab.size()),
        }
    }

    fn to_saved(&self) -> Option<SavedModel> {
        let mut counts = BTreeMap::new();
        for (key, row) in &self.counts {
            for (tok, &c) in row.iter().enumerate() {
                if c > 0.0 {
                    let mut full = key.clone();
                    full.push(tok as u32);
                    counts.insert(join_key(&full), c);
                }
            }
        }
        Some(SavedModel::KGram { vocab: self.vocab.clone(), order: self.order, smoothing: self.smoothing, counts })
    }
}

// ---------------------------------------------------------------------------
// Explicit Markov table
// ---------------------------------------------------------------------------

/// Order-m Markov model with an explicit next-token table and a fallback row
/// for contexts missing from the table.
#[derive(Clone, Debug)]
pub struct MarkovModel {
    vocab: Vocab,
    order: usize,
    rows: HashMap<Vec<u32>, Dist>,
    fallback: Dist,
}

impl MarkovModel {
    pub fn new(vocab: Vocab, order: usize, fallback: Dist) -> Result<Self> {
        if fallback.len() != vocab.size() {
            return Err(Error::VocabMismatch { expected: vocab.size(), actual: fallback.len() });
        }
        Ok(MarkovModel { vocab, order, rows: HashMap::new(), fallback })
    }

    /// Model that ignores its context.
    pub fn unconditional(vocab: Vocab, dist: Dist) -> Result<Self> {
        Self::new(vocab, 0, dist)
    }

    /// Sets the row for a context; `context` is taken as-is if it has exactly
    /// `order` entries (BOS sentinels allowed), otherwise it is padded.
    pub fn set_row(&mut self, context: &[u32], dist: Dist) -> Result<()> {
        if dist.len() != self.vocab.size() {
            return Err(Error::VocabMismatch { expected: self.vocab.size(), actual: dist.len() });
        }
        let key = if context.len() == self.order {
            context.to_vec()
        } else {
            let toks: Vec<TokenId> = context.iter().copied().map(TokenId).collect();
            context_key(&self.vocab, self.order, &toks)
        };
        self.rows.insert(key, dist);
        Ok(())
    }

    pub fn with_row(mut self, context: &[u32], dist: Dist) -> Result<Self> {
        self.set_row(context, dist)?;
        Ok(self)
    }

    /// Random model with a row for every padded context. Every row has full
    /// support; `sharpness` > 1 concentrates mass.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, order: usize, sharpness: f64, rng: &mut R) -> Self {
        let alphabet = vocab.size() as u32 + 1;
        let mut rows = HashMap::new();
        let n_contexts = (alphabet as usize).pow(order as u32);
        for idx in 0..n_contexts {
            let mut key = Vec::with_capacity(order);
            let mut rest = idx;
            for _ in 0..order {
                key.push((rest % alphabet as usize) as u32);
                rest /= alphabet as usize;
            }
            rows.insert(key, random_full_support(vocab.size(), sharpness, rng));
        }
        let fallback = random_full_support(vocab.size(), sharpness, rng);
        MarkovModel { vocab, order, rows, fallback }
    }
}

fn random_full_support<R: Rng + ?Sized>(size: usize, sharpness: f64, rng: &mut R) -> Dist {
    let w: Vec<f64> = (0..size).map(|_| rng.random_range(0.05..1.0f64).powf(sharpness)).collect();
    normalize(&w).expect("positive weights")
}

impl LanguageModel for MarkovModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_order(&self) -> usize {
        self.order
    }

    fn next_dist(&self, context: &[TokenId]) -> Dist {
        let key = context_key(&self.vocab, self.order, context);
        self.rows.get(&key).unwrap_or(&self.fallback).clone()
    }

    fn to_saved(&self) -> Option<SavedModel> {
        let rows = self.rows.iter().map(|(k, d)| (join_key(k), d.clone())).collect();
        Some(SavedModel::Markov {
            vocab: self.vocab.clone(),
            order: self.order,
            rows,
            fallback: self.fallback.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Perturbation
// ---------------------------------------------------------------------------

/// `normalize((1 − λ)·softmax(ln base / τ) + λ·uniform)`.
///
/// The usual way to derive a draft from a target: λ and τ move the pair along
/// the alignment spectrum.
#[derive(Clone)]
pub struct PerturbedModel {
    base: Arc<dyn LanguageModel>,
    mix: f64,
    temperature: f64,
}

impl PerturbedModel {
    pub fn new(base: Arc<dyn LanguageModel>, mix: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::InvalidParameter(format!("mix must lie in [0, 1], got {mix}")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!("temperature must be positive, got {temperature}")));
        }
        Ok(PerturbedModel { base, mix, temperature })
    }

    pub fn mix(&self) -> f64 {
        self.mix
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

pub fn perturb(base: Arc<dyn LanguageModel>, mix: f64, temperature: f64) -> Result<PerturbedModel> {
    PerturbedModel::new(base, mix, temperature)
}

impl LanguageModel for PerturbedModel {
    fn vocab(&self) -> &Vocab {
        self.base.vocab()
    }

    fn context_order(&self) -> usize {
        self.base.context_order()
    }

    fn next_dist(&self, context: &[TokenId]) -> Dist {
        let base = self.base.next_dist(context);
        let tempered = distributions::temper(&base, self.temperature);
        if self.mix == 0.0 {
            tempered
        } else {
            distributions::mix_uniform(&tempered, self.mix)
        }
    }

    fn to_saved(&self) -> Option<SavedModel> {
        Some(SavedModel::Perturbed {
            base: Box::new(self.base.to_saved()?),
            mix: self.mix,
            temperature: self.temperature,
        })
    }
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// On-disk model description.
///
/// k-gram counts are flattened: each key is the context tokens followed by
/// the next token, joined by `-` (BOS padding appears as `vocab.size`).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SavedModel {
    #[serde(rename = "kgram")]
    KGram { vocab: Vocab, order: usize, smoothing: f64, counts: BTreeMap<String, f64> },
    Markov { vocab: Vocab, order: usize, rows: BTreeMap<String, Dist>, fallback: Dist },
    Perturbed { base: Box<SavedModel>, mix: f64, temperature: f64 },
}

impl SavedModel {
    pub fn build(self) -> Result<Arc<dyn LanguageModel>> {
        Ok(match self {
            SavedModel::KGram { vocab, order, smoothing, counts } => {
                Arc::new(KGramModel::from_saved(vocab, order, smoothing, &counts)?)
            }
            SavedModel::Markov { vocab, order, rows, fallback } => {
                let mut m = MarkovModel::new(vocab, order, fallback)?;
                for (k, d) in rows {
                    let key = split_key(&k)?;
                    if key.len() != order {
                        return Err(Error::parse("markov row", format!("{k:?} does not match order {order}")));
                    }
                    m.set_row(&key, d)?;
                }
                Arc::new(m)
            }
            SavedModel::Perturbed { base, mix, temperature } => {
                Arc::new(PerturbedModel::new(base.build()?, mix, temperature)?)
            }
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

pub fn save_model(model: &dyn LanguageModel, path: impl AsRef<Path>) -> Result<()> {
    model
        .to_saved()
        .ok_or_else(|| Error::Misuse("model has no serializable form".into()))?
        .save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Arc<dyn LanguageModel>> {
    SavedModel::load(path)?.build()
}

/// Newline-delimited, space-separated token ids. Blank lines are skipped.
pub fn parse_token_corpus(text: &str) -> Result<Vec<Vec<TokenId>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|w| w.parse::<u32>().map(TokenId).map_err(|e| Error::parse("token corpus", format!("{w:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// Byte-level corpus: every non-empty line becomes one sequence of bytes
/// terminated by the newline (the byte vocabulary's end-of-sequence token).
pub fn parse_byte_corpus(bytes: &[u8]) -> Vec<Vec<TokenId>> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|line| !line.is_empty())
        .map(|line| line.iter().copied().chain(std::iter::once(b'\n')).map(TokenId::from).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(ids: &[u32]) -> Vec<TokenId> {
        distributions::tokens(ids)
    }

    #[test]
    fn kgram_vanishing_smoothing_learns_successors() {
        let vocab = Vocab::new(2, TokenId(1)).unwrap();
        let m = KGramModel::fit(&[t(&[0, 1, 0, 1])], vocab, 1, 1e-12).unwrap();
        let d = m.next_dist(&t(&[0]));
        assert!(d.prob(TokenId(0)) < 1e-11);
        assert!((d.prob(TokenId(1)) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn kgram_unseen_context_is_uniform() {
        let vocab = Vocab::new(4, TokenId(3)).unwrap();
        let m = KGramModel::fit(&[t(&[0, 1])], vocab, 2, 0.5).unwrap();
        assert_eq!(m.next_dist(&t(&[2, 2])).as_slice(), &[0.25; 4]);
    }

    #[test]
    fn kgram_add_alpha_arithmetic() {
        let vocab = Vocab::new(2, TokenId(1)).unwrap();
        let m = KGramModel::fit(&[t(&[0, 0, 1])], vocab, 1, 1.0).unwrap();
        assert_eq!(m.next_dist(&t(&[0])).as_slice(), &[0.5, 0.5]);
        // BOS context saw a single 0
        let first = m.next_dist(&[]);
        assert!((first.prob(TokenId(0)) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kgram_errors() {
        let vocab = Vocab::new(2, TokenId(1)).unwrap();
        assert!(matches!(KGramModel::fit(&[vec![]], vocab.clone(), 1, 1.0), Err(Error::EmptyCorpus)));
        assert!(KGramModel::fit(&[t(&[0])], vocab.clone(), 1, 0.0).is_err());
        assert!(KGramModel::fit(&[t(&[5])], vocab, 1, 1.0).is_err());
    }

    #[test]
    fn kgram_reproduces_corpus_greedily() {
        let seq = t(&[1, 2, 3, 4, 0]);
        let vocab = Vocab::new(5, TokenId(0)).unwrap();
        let m = KGramModel::fit(std::slice::from_ref(&seq), vocab, 1, 1e-6).unwrap();
        let mut out = Vec::new();
        for _ in 0..seq.len() {
            let next = greedy_token(&m, &out);
            out.push(next);
        }
        assert_eq!(out, seq);
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vocab = Vocab::new(4, TokenId(3)).unwrap();
        let base: Arc<dyn LanguageModel> = Arc::new(MarkovModel::random(vocab, 1, 2.0, &mut rng));
        let identity = perturb(base.clone(), 0.0, 1.0).unwrap();
        let flat = perturb(base.clone(), 1.0, 0.7).unwrap();
        for ctx in [t(&[]), t(&[0]), t(&[2, 1])] {
            assert_eq!(identity.next_dist(&ctx), base.next_dist(&ctx));
            for (_, m) in flat.next_dist(&ctx).iter() {
                assert!((m - 0.25).abs() < 1e-15);
            }
        }
        let vocab2 = Vocab::new(2, TokenId(1)).unwrap();
        let point: Arc<dyn LanguageModel> =
            Arc::new(MarkovModel::unconditional(vocab2, Dist::point_mass(2, TokenId(0))).unwrap());
        let p = perturb(point, 0.1, 1.0).unwrap();
        let d = p.next_dist(&[]);
        assert!((d.prob(TokenId(0)) - 0.95).abs() < 1e-15);
        assert!((d.prob(TokenId(1)) - 0.05).abs() < 1e-15);
        assert!(perturb(p.base.clone(), 1.5, 1.0).is_err());
        assert!(perturb(p.base.clone(), 0.5, 0.0).is_err());
    }

    #[test]
    fn greedy_examples() {
        let vocab = Vocab::new(3, TokenId(2)).unwrap();
        let m = MarkovModel::unconditional(vocab.clone(), Dist::new(vec![0.2, 0.7, 0.1]).unwrap()).unwrap();
        assert_eq!(greedy_token(&m, &[]), TokenId(1));
        let tie = MarkovModel::unconditional(Vocab::new(2, TokenId(1)).unwrap(), Dist::uniform(2)).unwrap();
        assert_eq!(greedy_token(&tie, &[]), TokenId(0));
        let eos = MarkovModel::unconditional(vocab, Dist::point_mass(3, TokenId(2))).unwrap();
        assert_eq!(greedy_token(&eos, &t(&[0, 1])), TokenId(2));
    }

    #[test]
    fn next_dist_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = Vocab::new(5, TokenId(4)).unwrap();
        let base: Arc<dyn LanguageModel> = Arc::new(MarkovModel::random(vocab, 2, 1.5, &mut rng));
        let draft = perturb(base.clone(), 0.3, 1.3).unwrap();
        let ctx = t(&[1, 3, 0]);
        assert_eq!(draft.next_dist(&ctx).as_slice(), draft.next_dist(&ctx).as_slice());
    }

    #[test]
    fn saved_models_round_trip() {
        let dir = std::env::temp_dir().join(format!("specdec-lm-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let vocab = Vocab::new(4, TokenId(3)).unwrap();
        let corpus = vec![t(&[0, 1, 2, 3]), t(&[1, 1, 2, 0, 3])];
        let kgram: Arc<dyn LanguageModel> = Arc::new(KGramModel::fit(&corpus, vocab, 2, 0.3).unwrap());
        let draft = perturb(kgram.clone(), 0.2, 1.4).unwrap();
        let path = dir.join("draft.json");
        save_model(&draft, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        for ctx in [t(&[]), t(&[0]), t(&[1, 1]), t(&[2, 0, 3]), t(&[3, 3])] {
            assert_eq!(loaded.next_dist(&ctx), draft.next_dist(&ctx));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let markov = MarkovModel::random(Vocab::new(3, TokenId(0)).unwrap(), 1, 1.0, &mut rng);
        let path = dir.join("markov.json");
        save_model(&markov, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        for ctx in [t(&[]), t(&[0]), t(&[2])] {
            assert_eq!(loaded.next_dist(&ctx), markov.next_dist(&ctx));
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn corpus_parsing() {
        let c = parse_token_corpus("0 1 2\n\n3 4\n").unwrap();
        assert_eq!(c, vec![t(&[0, 1, 2]), t(&[3, 4])]);
        assert!(parse_token_corpus("0 x").is_err());
        let b = parse_byte_corpus(b"ab\n\nc");
        assert_eq!(b, vec![t(&[97, 98, 10]), t(&[99, 10])]);
    }
}
