//! Cost accounting, throughput, forward-time regression and Pareto frontiers.
//!
//! With `c1 = t_draft` and `c2 = t_target − t_draft`, the time of a trace is
//! `t_draft·N_draft + t_target·N_target`, and by the trace identity also
//! `t_draft·N + t_draft·N_discarded + c2·N_target`. Per generated token this
//! is the latency `t_draft + t_draft·discard_rate + c2·verification_rate`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{Counters, GenerationTrace};
use crate::error::{Error, Result};

/// Seconds per forward pass of each model.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub t_draft: f64,
    pub t_target: f64,
}

impl CostModel {
    pub fn new(t_draft: f64, t_target: f64) -> Result<Self> {
        if !(t_draft > 0.0 && t_draft < t_target && t_target.is_finite()) {
            return Err(Error::InvalidParameter(format!("need 0 < t_draft < t_target, got ({t_draft}, {t_target})")));
        }
        Ok(CostModel { t_draft, t_target })
    }

    /// Cost of one draft pass.
    pub fn c1(&self) -> f64 {
        self.t_draft
    }

    /// Extra cost of a target pass over a draft pass.
    pub fn c2(&self) -> f64 {
        self.t_target - self.t_draft
    }

    /// `t_draft·N_draft + t_target·N_target`.
    pub fn total_time(&self, c: &Counters) -> f64 {
        self.t_draft * c.n_draft as f64 + self.t_target * c.n_target as f64
    }

    /// `t_draft·N + t_draft·N_discarded + c2·N_target`.
    pub fn total_time_decomposed(&self, c: &Counters) -> f64 {
        self.t_draft * c.n as f64 + self.t_draft * c.n_discarded as f64 + self.c2() * c.n_target as f64
    }

    /// Seconds per generated token.
    pub fn latency(&self, c: &Counters) -> Result<f64> {
        let rates = Rates::of(c)?;
        Ok(self.latency_from_rates(rates.discard_rate, rates.verification_rate))
    }

    pub fn latency_from_rates(&self, discard_rate: f64, verification_rate: f64) -> f64 {
        self.t_draft + self.t_draft * discard_rate + self.c2() * verification_rate
    }

    /// Generated tokens per second.
    pub fn throughput(&self, c: &Counters) -> Result<f64> {
        Ok(1.0 / self.latency(c)?)
    }
}

pub fn total_time(trace: &GenerationTrace, cm: &CostModel) -> f64 {
    cm.total_time(&trace.counters)
}

pub fn latency(trace: &GenerationTrace, cm: &CostModel) -> Result<f64> {
    cm.latency(&trace.counters)
}

pub fn throughput(trace: &GenerationTrace, cm: &CostModel) -> Result<f64> {
    cm.throughput(&trace.counters)
}

/// Per-generated-token ratios.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub discard_rate: f64,
    pub verification_rate: f64,
}

impl Rates {
    pub fn of(c: &Counters) -> Result<Self> {
        if c.n == 0 {
            return Err(Error::EmptyGeneration);
        }
        let n = c.n as f64;
        Ok(Rates { discard_rate: c.n_discarded as f64 / n, verification_rate: c.n_target as f64 / n })
    }
}

/// One policy's benchmark result. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub policy: String,
    pub params: String,
    pub discard_rate: f64,
    pub verification_rate: f64,
    pub latency: f64,
    pub throughput: f64,
    pub speedup: f64,
}

impl BenchPoint {
    /// Pools the counters of many traces: rates are totals over totals.
    /// Speedup is relative to the target decoding alone at
    /// `standalone_t_target` seconds per token.
    pub fn from_counters<'a>(
        policy: impl Into<String>,
        params: impl Into<String>,
        counters: impl IntoIterator<Item = &'a Counters>,
        cm: &CostModel,
        standalone_t_target: f64,
    ) -> Result<Self> {
        let mut pooled = Counters::default();
        for c in counters {
            pooled += *c;
        }
        let rates = Rates::of(&pooled)?;
        let latency = cm.latency_from_rates(rates.discard_rate, rates.verification_rate);
        Ok(BenchPoint {
            policy: policy.into(),
            params: params.into(),
            discard_rate: rates.discard_rate,
            verification_rate: rates.verification_rate,
            latency,
            throughput: 1.0 / latency,
            speedup: standalone_t_target / latency,
        })
    }

    pub fn from_traces(
        policy: impl Into<String>,
        params: impl Into<String>,
        traces: &[GenerationTrace],
        cm: &CostModel,
        standalone_t_target: f64,
    ) -> Result<Self> {
        Self::from_counters(policy, params, traces.iter().map(|t| &t.counters), cm, standalone_t_target)
    }
}

/// Mean and sample standard deviation.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

/// Per-trace spread of the rates and throughput.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub traces: usize,
    pub discard_rate: MeanStd,
    pub verification_rate: MeanStd,
    pub throughput: MeanStd,
}

impl TraceSummary {
    pub fn of<'a>(counters: impl IntoIterator<Item = &'a Counters>, cm: &CostModel) -> Result<Self> {
        let (mut d, mut v, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for c in counters {
            let r = Rates::of(c)?;
            d.push(r.discard_rate);
            v.push(r.verification_rate);
            t.push(cm.throughput(c)?);
        }
        Ok(TraceSummary {
            traces: d.len(),
            discard_rate: MeanStd::of(&d),
            verification_rate: MeanStd::of(&v),
            throughput: MeanStd::of(&t),
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTimeFit {
    pub t_draft: f64,
    pub t_target: f64,
    /// Present only when fitted with an intercept.
    pub intercept: Option<f64>,
    pub r_squared: f64,
}

/// Least-squares fit of `T = t_draft·N_draft + t_target·N_target` (plus an
/// optional intercept) to `(N_draft, N_target, T)` samples.
pub fn fit_forward_times(samples: &[(f64, f64, f64)], with_intercept: bool) -> Result<ForwardTimeFit> {
    let cols = if with_intercept { 3 } else { 2 };
    if samples.len() < cols + 1 {
        return Err(Error::InvalidParameter(format!("need at least {} samples", cols + 1)));
    }
    let x = DMatrix::from_fn(samples.len(), cols, |i, j| match j {
        0 => samples[i].0,
        1 => samples[i].1,
        _ => 1.0,
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.2));
    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * samples.len() as f64 * f64::EPSILON;
    if svd.rank(tol) < cols {
        return Err(Error::RankDeficient);
    }
    let beta = svd.solve(&y, tol).map_err(|_| Error::RankDeficient)?;
    let fitted = &x * &beta;
    let mean = y.mean();
    let ss_res = (&y - fitted).norm_squared();
    let ss_tot = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(ForwardTimeFit {
        t_draft: beta[0],
        t_target: beta[1],
        intercept: with_intercept.then(|| beta[2]),
        r_squared,
    })
}

/// `a` dominates `b`: no worse on both rates and strictly better on one.
pub fn dominates(a: &BenchPoint, b: &BenchPoint) -> bool {
    a.verification_rate <= b.verification_rate
        && a.discard_rate <= b.discard_rate
        && (a.verification_rate < b.verification_rate || a.discard_rate < b.discard_rate)
}

/// Points not dominated by any other point, in input order.
pub fn pareto_frontier(points: &[BenchPoint]) -> Vec<BenchPoint> {
    points.iter().filter(|p| !points.iter().any(|o| dominates(o, p))).cloned().collect()
}
