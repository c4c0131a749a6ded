use serde::{Deserialize, Serialize};

use crate::distributions::{entropy, Dist, TokenId};

/// Number of entries in a [`FeatureVec`].
pub const FEATURE_DIM: usize = 6;

/// Names of the feature columns, in order.
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = ["q_y", "entropy", "top1", "top1_gap", "position", "cum_q"];

/// Per-candidate inputs to the acceptance head, computed from the draft
/// distribution alone:
///
/// | index | meaning |
/// |-------|---------|
/// | 0 | `q(y)`, draft probability of the candidate |
/// | 1 | entropy of the draft distribution (nats) |
/// | 2 | largest draft probability |
/// | 3 | `top1 − q(y)` |
/// | 4 | 1-based position of the candidate in its round, divided by `k_cap` |
/// | 5 | running product of `q(y_i)` over the round so far, this candidate included |
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVec(pub [f64; FEATURE_DIM]);

impl FeatureVec {
    /// Features of candidate `y` drawn from `q` at round position `position`
    /// (1-based); `prev_cum_q` is the product of the earlier candidates' draft
    /// probabilities in the round (1 for the first).
    pub fn compute(q: &Dist, y: TokenId, position: usize, k_cap: usize, prev_cum_q: f64) -> Self {
        let q_y = q.prob(y);
        let top1 = q.top1();
        FeatureVec([
            q_y,
            entropy(q),
            top1,
            top1 - q_y,
            position as f64 / k_cap.max(1) as f64,
            prev_cum_q * q_y,
        ])
    }

    #[inline]
    pub fn q_y(&self) -> f64 {
        self.0[0]
    }

    #[inline]
    pub fn cum_q(&self) -> f64 {
        self.0[5]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
