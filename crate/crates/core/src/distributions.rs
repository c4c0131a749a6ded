//! Probability vectors over a finite vocabulary and the rejection-sampling
//! primitives built on them.
//!
//! A [`Dist`] always satisfies its invariants: every entry is non-negative and
//! the entries sum to one within [`SUM_TOLERANCE`]. Constructors that accept
//! arbitrary vectors validate or normalize.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σ mass − 1|` for a valid [`Dist`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Index of a token in a [`Vocab`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl From<u8> for TokenId {
    fn from(v: u8) -> Self {
        TokenId(v as u32)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Converts a slice of raw ids into tokens.
pub fn tokens(ids: &[u32]) -> Vec<TokenId> {
    ids.iter().copied().map(TokenId).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    eos: TokenId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, eos: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidParameter(format!("vocab size must be at least 2, got {size}")));
        }
        if eos.index() >= size {
            return Err(Error::InvalidParameter(format!("eos {eos} outside vocab of size {size}")));
        }
        Ok(Vocab { size, eos, names: None })
    }

    /// Byte-level vocabulary: 256 tokens, newline doubles as end-of-sequence.
    pub fn bytes() -> Self {
        Vocab { size: 256, eos: TokenId(b'\n' as u32), names: None }
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.size {
            return Err(Error::VocabMismatch { expected: self.size, actual: names.len() });
        }
        self.names = Some(names);
        Ok(self)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn eos(&self) -> TokenId {
        self.eos
    }

    /// Sentinel index used to left-pad contexts; never part of a [`Dist`].
    #[inline]
    pub fn bos_sentinel(&self) -> u32 {
        self.size as u32
    }

    pub fn name(&self, token: TokenId) -> Option<&str> {
        self.names.as_ref().and_then(|n| n.get(token.index())).map(String::as_str)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token.index() < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::Domain(format!("token {token} outside vocab of size {}", self.size)))
        }
    }
}

/// A probability vector, one entry per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Dist {
    mass: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Dist {
    type Error = Error;

    fn try_from(mass: Vec<f64>) -> Result<Self> {
        Dist::new(mass)
    }
}

impl From<Dist> for Vec<f64> {
    fn from(d: Dist) -> Self {
        d.mass
    }
}

impl Dist {
    /// Validates an already-normalized vector.
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::InvalidDist("empty vector".into()));
        }
        if let Some(bad) = mass.iter().find(|m| !m.is_finite() || **m < 0.0) {
            return Err(Error::InvalidDist(format!("entry {bad} is negative or not finite")));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDist(format!("entries sum to {total}")));
        }
        Ok(Dist { mass })
    }

    pub fn point_mass(size: usize, token: TokenId) -> Self {
        assert!(token.index() < size, "point mass outside support");
        let mut mass = vec![0.0; size];
        mass[token.index()] = 1.0;
        Dist { mass }
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0);
        Dist { mass: vec![1.0 / size as f64; size] }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    #[inline]
    pub fn prob(&self, token: TokenId) -> f64 {
        self.mass[token.index()]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.mass
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.mass.iter().enumerate().map(|(i, &m)| (TokenId(i as u32), m))
    }

    /// Tokens with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.iter().filter(|&(_, m)| m > 0.0)
    }

    pub fn support_size(&self) -> usize {
        self.mass.iter().filter(|&&m| m > 0.0).count()
    }

    /// Most likely token; ties go to the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &m) in self.mass.iter().enumerate().skip(1) {
            if m > self.mass[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    pub fn top1(&self) -> f64 {
        self.mass[self.argmax().index()]
    }

    fn same_size(&self, other: &Dist) -> Result<()> {
        if self.len() == other.len() {
            Ok(())
        } else {
            Err(Error::VocabMismatch { expected: self.len(), actual: other.len() })
        }
    }
}

/// `f / Σ f` for a non-negative vector.
pub fn normalize(f: &[f64]) -> Result<Dist> {
    if f.is_empty() {
        return Err(Error::InvalidDist("empty vector".into()));
    }
    if let Some(bad) = f.iter().find(|m| !m.is_finite() || **m < 0.0) {
        return Err(Error::InvalidDist(format!("entry {bad} is negative or not finite")));
    }
    let total: f64 = f.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(Dist { mass: f.iter().map(|m| m / total).collect() })
}

/// The modified distribution `Norm[(p − q)+]` used to replace a rejected
/// candidate.
pub fn residual(p: &Dist, q: &Dist) -> Result<Dist> {
    p.same_size(q)?;
    let diff: Vec<f64> = p.mass.iter().zip(&q.mass).map(|(a, b)| (a - b).max(0.0)).collect();
    normalize(&diff)
}

/// Probability `min(1, p[y] / q[y])` that a candidate `y ~ q` is accepted.
pub fn accept_prob(p: &Dist, q: &Dist, y: TokenId) -> Result<f64> {
    p.same_size(q)?;
    if y.index() >= q.len() {
        return Err(Error::Domain(format!("token {y} outside vocab of size {}", q.len())));
    }
    let qy = q.prob(y);
    if qy <= 0.0 {
        return Err(Error::Domain(format!("candidate {y} has zero draft probability")));
    }
    Ok((p.prob(y) / qy).min(1.0))
}

/// Inverse-CDF sampling with a single uniform draw.
pub fn sample<R: Rng + ?Sized>(d: &Dist, rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    sample_with(d, u)
}

/// Inverse-CDF lookup for a given `u ∈ [0, 1)`.
pub fn sample_with(d: &Dist, u: f64) -> TokenId {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &m) in d.mass.iter().enumerate() {
        if m > 0.0 {
            acc += m;
            last_positive = i;
            if u < acc {
                return TokenId(i as u32);
            }
        }
    }
    // rounding left `acc` a hair below 1
    TokenId(last_positive as u32)
}

/// Keeps the `k` largest entries (ties toward lower ids) and renormalizes.
///
/// `k` is clamped to the vocabulary size.
pub fn top_k_truncate(d: &Dist, k: usize) -> Dist {
    assert!(k >= 1, "top-k needs k >= 1");
    if k >= d.len() {
        return d.clone();
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    // stable sort keeps lower ids first among equal masses
    order.sort_by(|&a, &b| d.mass[b].total_cmp(&d.mass[a]));
    let mut kept = vec![0.0; d.len()];
    for &i in &order[..k] {
        kept[i] = d.mass[i];
    }
    normalize(&kept).expect("top-k of a valid distribution keeps positive mass")
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(d: &Dist) -> f64 {
    -d.mass.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>()
}

/// `softmax(ln d / temperature)`, i.e. `d^(1/τ)` renormalized. Zero entries
/// stay zero.
pub fn temper(d: &Dist, temperature: f64) -> Dist {
    assert!(temperature > 0.0, "temperature must be positive");
    if temperature == 1.0 {
        return d.clone();
    }
    let max_log = d.top1().ln();
    let w: Vec<f64> = d
        .mass
        .iter()
        .map(|&m| if m > 0.0 { ((m.ln() - max_log) / temperature).exp() } else { 0.0 })
        .collect();
    normalize(&w).expect("tempered weights keep the argmax at 1")
}

/// `(1 − λ)·d + λ·uniform`.
pub fn mix_uniform(d: &Dist, lambda: f64) -> Dist {
    assert!((0.0..=1.0).contains(&lambda), "mixing weight must lie in [0, 1]");
    let u = lambda / d.len() as f64;
    let mass: Vec<f64> = d.mass.iter().map(|m| (1.0 - lambda) * m + u).collect();
    normalize(&mass).expect("mixture of distributions has unit mass")
}

/// Total-variation distance `½ Σ |a − b|`.
pub fn total_variation(a: &Dist, b: &Dist) -> Result<f64> {
    a.same_size(b)?;
    Ok(0.5 * a.mass.iter().zip(&b.mass).map(|(x, y)| (x - y).abs()).sum::<f64>())
}
