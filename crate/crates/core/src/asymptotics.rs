//! Constants of the null limit laws of `√n ξ_n` and `√n ξ_#`.
//!
//! `κ_d` (limit of the mutual-neighbor fraction) has a closed form through
//! the regularized incomplete beta function. `o_d` (limit of the
//! shared-target count per vertex) is the integral
//!
//! ```text
//! o_d = ∫_Γ exp(-λ(B(w₁, |w₁|) ∪ B(w₂, |w₂|))) dw₁ dw₂,
//! Γ = {max(|w₁|, |w₂|) < |w₁ - w₂|},
//! ```
//!
//! which is estimated by importance sampling in the coordinates
//! `u = λ(B(0, |w|))`: under that change of variables `dw` becomes
//! `du × (uniform direction)`, and with `u ~ Exp(1/2)` the weight
//! `4 exp((u₁ + u₂)/2 - λ(∪))` is bounded by 4 because the union has volume
//! at least `max(u₁, u₂)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Matrix, TieBreak};
use crate::nn_graph::{build_nn_graph, graph_stats};
use crate::rng::RngStream;
use crate::special::{ball_intersection_volume, beta_reg, unit_ball_volume};

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("constant {name} is not available for dimension {d}")]
    MissingConstant { name: &'static str, d: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("constants cache: {0}")]
    Cache(String),
}

/// `κ_d = 1 / (2 - I_{3/4}((d+1)/2, 1/2))`.
pub fn kappa(d: usize) -> f64 {
    assert!(d >= 1, "kappa needs d >= 1");
    1.0 / (2.0 - beta_reg((d as f64 + 1.0) / 2.0, 0.5, 0.75))
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub n_samples: u64,
}

impl OEstimate {
    /// A value known exactly (zero standard error).
    pub fn exact(value: f64) -> Self {
        Self {
            estimate: value,
            standard_error: 0.0,
            n_samples: 0,
        }
    }
}

const O_BLOCK: u64 = 1 << 14;

fn random_direction<R: Rng>(rng: &mut R, d: usize, out: &mut [f64]) {
    loop {
        let mut norm = 0.0;
        for v in out.iter_mut().take(d) {
            *v = rng.sample(StandardNormal);
            norm += *v * *v;
        }
        if norm > 0.0 {
            let s = norm.sqrt().recip();
            out.iter_mut().for_each(|v| *v *= s);
            return;
        }
    }
}

/// Integrand weight for one proposal `(u₁, e₁), (u₂, e₂)`.
fn o_weight(d: usize, u1: f64, u2: f64, e1: &[f64], e2: &[f64]) -> f64 {
    let vd = unit_ball_volume(d);
    let r1 = (u1 / vd).powf(1.0 / d as f64);
    let r2 = (u2 / vd).powf(1.0 / d as f64);
    let dist = e1
        .iter()
        .zip(e2)
        .map(|(a, b)| (r1 * a - r2 * b).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist <= r1.max(r2) {
        return 0.0;
    }
    let union = u1 + u2 - ball_intersection_volume(d, r1, r2, dist);
    4.0 * ((u1 + u2) / 2.0 - union).exp()
}

/// Importance-sampling estimate of `o_d` from `n_samples` proposals.
///
/// Work is split into fixed blocks, each with its own child stream, and the
/// block sums are combined in block order, so the result does not depend on
/// the thread pool.
pub fn o_constant(d: usize, n_samples: u64, stream: RngStream) -> OEstimate {
    assert!(d >= 1, "o_constant needs d >= 1");
    let blocks = n_samples.div_ceil(O_BLOCK);
    let sums: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = O_BLOCK.min(n_samples - b * O_BLOCK);
            let mut rng = stream.derive(b).rng();
            let (mut e1, mut e2) = (vec![0.0; d], vec![0.0; d]);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let u1 = 2.0 * rng.sample::<f64, _>(Exp1);
                let u2 = 2.0 * rng.sample::<f64, _>(Exp1);
                random_direction(&mut rng, d, &mut e1);
                random_direction(&mut rng, d, &mut e2);
                let w = o_weight(d, u1, u2, &e1, &e2);
                s += w;
                s2 += w * w;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let n = n_samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    OEstimate {
        estimate: mean,
        standard_error: (var / n).sqrt(),
        n_samples,
    }
}

/// `κ_d` and `o_d` for a set of dimensions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceConstants {
    pub kappa: BTreeMap<usize, f64>,
    pub o: BTreeMap<usize, OEstimate>,
}

impl VarianceConstants {
    /// Exact `κ_d` and Monte Carlo `o_d` for every dimension in `dims`.
    /// `o_d` for dimension `d` uses the child stream `d`.
    pub fn compute(dims: &[usize], n_samples: u64, stream: RngStream) -> Self {
        let mut c = Self::default();
        for &d in dims {
            c.kappa.insert(d, kappa(d));
            c.o.insert(d, o_constant(d, n_samples, stream.derive(d as u64)));
        }
        c
    }

    /// Constants for `d = 1`, where both are known exactly (`2/3` and `1/2`).
    pub fn exact_one_dimensional() -> Self {
        let mut c = Self::default();
        c.kappa.insert(1, 2.0 / 3.0);
        c.o.insert(1, OEstimate::exact(0.5));
        c
    }

    pub fn kappa_of(&self, d: usize) -> Result<f64, AsymptoticsError> {
        self.kappa
            .get(&d)
            .copied()
            .ok_or(AsymptoticsError::MissingConstant { name: "kappa", d })
    }

    pub fn o_of(&self, d: usize) -> Result<f64, AsymptoticsError> {
        self.o
            .get(&d)
            .map(|o| o.estimate)
            .ok_or(AsymptoticsError::MissingConstant { name: "o", d })
    }
}

/// Null variance of `√n ξ_n`:
/// `4/5 + (2/5)(κ_{p+q} + κ_p) + (4/5)(o_{p+q} + o_p)`.
pub fn sigma_sq_xi(p: usize, q: usize, c: &VarianceConstants) -> Result<f64, AsymptoticsError> {
    if p == 0 {
        return Err(AsymptoticsError::MissingConstant { name: "kappa", d: 0 });
    }
    if q == 0 {
        return Err(AsymptoticsError::InvalidArgument("q must be positive".into()));
    }
    let d = p + q;
    Ok(0.8 + 0.4 * (c.kappa_of(d)? + c.kappa_of(p)?) + 0.8 * (c.o_of(d)? + c.o_of(p)?))
}

/// Null variance of `√n ξ_#`: `2/5 + (2/5)κ_q + (4/5)o_q`.
pub fn sigma_sq_hash(q: usize, c: &VarianceConstants) -> Result<f64, AsymptoticsError> {
    Ok(0.4 + 0.4 * c.kappa_of(q)? + 0.8 * c.o_of(q)?)
}

/// Simulated in-degree law of the 1-NN graph on standard normal clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeLimit {
    /// `p_hat[k]`: average fraction of vertices with in-degree `k`.
    pub p_hat: Vec<f64>,
    pub p_se: Vec<f64>,
    /// Average of the per-replicate in-degree variance; its limit is `o_d`.
    pub var_in_degree: f64,
    pub var_in_degree_se: f64,
    pub reps: usize,
}

pub fn degree_distribution_limit(
    d: usize,
    n: usize,
    reps: usize,
    stream: RngStream,
) -> Result<DegreeLimit, AsymptoticsError> {
    if d == 0 || n < 2 || reps < 2 {
        return Err(AsymptoticsError::InvalidArgument(format!(
            "need d >= 1, n >= 2, reps >= 2 (got d={d}, n={n}, reps={reps})"
        )));
    }
    let per_rep: Vec<(Vec<f64>, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.derive(r as u64).rng();
            let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            let pts = Matrix::new(n, d, data).expect("shape is consistent");
            let g = build_nn_graph(&pts, TieBreak::lowest_index()).expect("n >= 2, d >= 1");
            let s = graph_stats(&g);
            let hist = s.degree_histogram.iter().map(|&c| c as f64 / n as f64).collect();
            // Mean in-degree is exactly 1, so the variance is n⁻¹ Σ d(d-1).
            (hist, s.shared_target_fraction)
        })
        .collect();
    let kmax = per_rep.iter().map(|(h, _)| h.len()).max().unwrap_or(0);
    let mut p_hat = vec![0.0; kmax];
    let mut p_se = vec![0.0; kmax];
    for k in 0..kmax {
        let vals: Vec<f64> = per_rep.iter().map(|(h, _)| h.get(k).copied().unwrap_or(0.0)).collect();
        p_hat[k] = crate::stats::mean(&vals);
        p_se[k] = (crate::stats::variance(&vals) / reps as f64).sqrt();
    }
    let vars: Vec<f64> = per_rep.iter().map(|(_, v)| *v).collect();
    Ok(DegreeLimit {
        p_hat,
        p_se,
        var_in_degree: crate::stats::mean(&vars),
        var_in_degree_se: (crate::stats::variance(&vars) / reps as f64).sqrt(),
        reps,
    })
}

/// One dimension's entry in the constants table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEntry {
    pub kappa: f64,
    pub o_hat: f64,
    pub o_se: f64,
}

/// `{d: {kappa, o_hat, o_se}}` for the requested dimensions.
pub fn constants_table(dims: &[usize], n_samples: u64, seed: u64) -> BTreeMap<usize, ConstantEntry> {
    let c = VarianceConstants::compute(dims, n_samples, RngStream::root(seed));
    dims.iter()
        .map(|&d| {
            let o = c.o[&d];
            (
                d,
                ConstantEntry {
                    kappa: c.kappa[&d],
                    o_hat: o.estimate,
                    o_se: o.standard_error,
                },
            )
        })
        .collect()
}

/// JSON sidecar of previously integrated constants, keyed by
/// `(d, n_samples, seed)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstantsCache {
    entries: BTreeMap<String, ConstantEntry>,
}

impl ConstantsCache {
    fn key(d: usize, n_samples: u64, seed: u64) -> String {
        format!("d={d};n_samples={n_samples};seed={seed}")
    }

    pub fn load(path: &Path) -> Result<Self, AsymptoticsError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path).map_err(|e| AsymptoticsError::Cache(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| AsymptoticsError::Cache(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), AsymptoticsError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| AsymptoticsError::Cache(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|e| AsymptoticsError::Cache(e.to_string()))
    }

    pub fn get(&self, d: usize, n_samples: u64, seed: u64) -> Option<ConstantEntry> {
        self.entries.get(&Self::key(d, n_samples, seed)).copied()
    }

    /// Look up `(d, n_samples, seed)`, integrating and storing on a miss.
    /// Uses the same streams as [`constants_table`], so cached and fresh
    /// values coincide.
    pub fn get_or_compute(&mut self, d: usize, n_samples: u64, seed: u64) -> ConstantEntry {
        *self
            .entries
            .entry(Self::key(d, n_samples, seed))
            .or_insert_with(|| constants_table(&[d], n_samples, seed)[&d])
    }

    /// [`VarianceConstants`] for `dims`, filling the cache as needed.
    pub fn variance_constants(&mut self, dims: &[usize], n_samples: u64, seed: u64) -> VarianceConstants {
        let mut c = VarianceConstants::default();
        for &d in dims {
            let e = self.get_or_compute(d, n_samples, seed);
            c.kappa.insert(d, e.kappa);
            c.o.insert(
                d,
                OEstimate {
                    estimate: e.o_hat,
                    standard_error: e.o_se,
                    n_samples,
                },
            );
        }
        c
    }
}
