//! Conditional randomization test.
//!
//! `Y` is redrawn `B` times from a known kernel `Q(· | X_i)` with `X` and `Z`
//! held fixed; the p-value is `(1 + #{b: T_b >= T_obs}) / (1 + B)`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, TieBreak};
use crate::estimators::{EstimatorError, XiGraphs};
use crate::generators::HolderFamilyParams;
use crate::rng::{RngStream, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrtError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("statistic failed on replicate {replicate} twice: {message}")]
    StatisticFailure { replicate: usize, message: String },
    #[error("statistic failed on the observed data: {0}")]
    ObservedFailure(String),
}

type Sampler = dyn Fn(&[f64], &mut StreamRng) -> f64 + Send + Sync;

/// A sampler for the conditional law `Q(· | x)` of `Y` given `X = x`.
#[derive(Clone)]
pub struct MarkovKernel {
    sampler: Arc<Sampler>,
    description: String,
}

impl fmt::Debug for MarkovKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovKernel").field("description", &self.description).finish()
    }
}

impl MarkovKernel {
    pub fn new<F>(description: impl Into<String>, sampler: F) -> Self
    where
        F: Fn(&[f64], &mut StreamRng) -> f64 + Send + Sync + 'static,
    {
        Self {
            sampler: Arc::new(sampler),
            description: description.into(),
        }
    }

    pub fn sample(&self, x: &[f64], rng: &mut StreamRng) -> f64 {
        (self.sampler)(x, rng)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    /// Draws a full response vector, one value per row of `data.x()`.
    pub fn sample_response(&self, data: &Dataset, rng: &mut StreamRng) -> Vec<f64> {
        (0..data.n()).map(|i| self.sample(data.x().row(i), rng)).collect()
    }
}

/// `Y | X ~ Uniform(0, 1)`, independent of `x`.
pub fn kernel_uniform01() -> MarkovKernel {
    MarkovKernel::new("uniform01", |_, rng| rng.random::<f64>())
}

/// `Y | X = x ~ N(mean_fn(x), sd²)`.
pub fn kernel_gaussian<F>(mean_fn: F, sd: f64) -> Result<MarkovKernel, CrtError>
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    if !(sd.is_finite() && sd > 0.0) {
        return Err(CrtError::InvalidParameter(format!("sd must be positive, got {sd}")));
    }
    Ok(MarkovKernel::new(format!("gaussian(sd={sd})"), move |x, rng| {
        mean_fn(x) + sd * rng.sample::<f64, _>(StandardNormal)
    }))
}

/// Kernel for the bump family: its `(X, Y)` marginal is uniform on the unit
/// square for every sign pattern, so `Q` is uniform whatever the parameters.
pub fn kernel_from_h_family(params: &HolderFamilyParams) -> Result<MarkovKernel, CrtError> {
    params
        .validate()
        .map_err(|e| CrtError::InvalidParameter(e.to_string()))?;
    Ok(MarkovKernel::new("holder_bump(uniform01)", |_, rng| rng.random::<f64>()))
}

/// Result of one conditional randomization test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrtOutcome {
    pub p_value: f64,
    pub reject: bool,
    pub observed_stat: f64,
    pub simulated_stats: Vec<f64>,
    pub b: usize,
    pub alpha: f64,
}

impl CrtOutcome {
    /// Builds the outcome from the observed and simulated statistics.
    /// Simulated values equal to the observed one count against rejection.
    pub fn from_stats(observed_stat: f64, simulated_stats: Vec<f64>, alpha: f64) -> Self {
        let b = simulated_stats.len();
        let exceed = simulated_stats.iter().filter(|&&s| s >= observed_stat).count();
        let p_value = (1 + exceed) as f64 / (1 + b) as f64;
        Self {
            p_value,
            reject: p_value <= alpha,
            observed_stat,
            simulated_stats,
            b,
            alpha,
        }
    }
}

fn check_params(b: usize, alpha: f64) -> Result<(), CrtError> {
    if b == 0 {
        return Err(CrtError::InvalidParameter("B must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CrtError::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// CRT for a statistic that depends on the data only through the response
/// vector (with `X`, `Z` baked in, e.g. prebuilt nearest-neighbor graphs).
///
/// Replicate `b` draws its responses from child stream `b`; if the statistic
/// fails, the replicate is redrawn once from the same generator.
pub fn run_crt_on_response<S, E>(
    data: &Dataset,
    kernel: &MarkovKernel,
    statistic: S,
    b: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<CrtOutcome, CrtError>
where
    S: Fn(&[f64]) -> Result<f64, E> + Sync,
    E: fmt::Display,
{
    check_params(b, alpha)?;
    let observed = statistic(data.y()).map_err(|e| CrtError::ObservedFailure(e.to_string()))?;
    let simulated = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream.derive(rep as u64).rng();
            let first = statistic(&kernel.sample_response(data, &mut rng));
            first.or_else(|_| {
                statistic(&kernel.sample_response(data, &mut rng)).map_err(|e| CrtError::StatisticFailure {
                    replicate: rep,
                    message: e.to_string(),
                })
            })
        })
        .collect::<Result<Vec<f64>, CrtError>>()?;
    Ok(CrtOutcome::from_stats(observed, simulated, alpha))
}

/// CRT for an arbitrary statistic of the full dataset.
pub fn run_crt<S, E>(
    data: &Dataset,
    kernel: &MarkovKernel,
    statistic: S,
    b: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<CrtOutcome, CrtError>
where
    S: Fn(&Dataset) -> Result<f64, E> + Sync,
    E: fmt::Display,
{
    run_crt_on_response(
        data,
        kernel,
        |y: &[f64]| -> Result<f64, String> {
            let d = data.with_y(y.to_vec()).map_err(|e| e.to_string())?;
            statistic(&d).map_err(|e| e.to_string())
        },
        b,
        alpha,
        stream,
    )
}

/// Coefficient used as the CRT statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiStatistic {
    Xi,
    XiHash,
    XiHat,
}

impl std::str::FromStr for XiStatistic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "xi" => Ok(Self::Xi),
            "xi_hash" => Ok(Self::XiHash),
            "xi_hat" => Ok(Self::XiHat),
            other => Err(format!("unknown statistic `{other}` (expected xi, xi_hash or xi_hat)")),
        }
    }
}

/// CRT with a nearest-neighbor coefficient; both graphs are built once.
///
/// For [`XiStatistic::XiHash`] the graph is built on `(X, Z)`, so with
/// `p = 0` this is the unconditional coefficient of `Y` on `Z`.
pub fn run_xi_crt(
    data: &Dataset,
    kernel: &MarkovKernel,
    which: XiStatistic,
    tie: TieBreak,
    b: usize,
    alpha: f64,
    stream: RngStream,
) -> Result<CrtOutcome, CrtError> {
    let graphs = XiGraphs::build(data, tie).map_err(|e| CrtError::ObservedFailure(e.to_string()))?;
    let stat = |y: &[f64]| -> Result<f64, EstimatorError> {
        match which {
            XiStatistic::Xi => graphs.xi(y).map(|r| r.value),
            XiStatistic::XiHash => graphs.xi_hash(y).map(|r| r.value),
            XiStatistic::XiHat => graphs.xi_hat(y).map(|r| r.value),
        }
    };
    run_crt_on_response(data, kernel, stat, b, alpha, stream)
}

/// Order-statistic form of the decision: reject iff the observed statistic
/// exceeds the `(1 + B - ⌊α(1 + B)⌋)`-th smallest simulated statistic.
pub fn crt_decision_orderstat(outcome: &CrtOutcome) -> bool {
    let b = outcome.simulated_stats.len();
    let k = (outcome.alpha * (b + 1) as f64).floor() as usize;
    if k == 0 {
        return false;
    }
    let idx = 1 + b - k.min(b);
    let mut sorted = outcome.simulated_stats.clone();
    sorted.sort_by(f64::total_cmp);
    outcome.observed_stat > sorted[idx - 1]
}
