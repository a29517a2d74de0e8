//! Declarative Monte Carlo studies.
//!
//! A study is a JSON [`ExperimentConfig`]. [`run_experiment`] runs `reps`
//! replicates at each sample size of `n_grid`; replicate `r` at size `n` draws
//! everything from `RngStream::new(master_seed, r).derive(n)`, so the output
//! does not depend on the worker count or on resumption. Results go to
//! `<output>.records.csv` (one row per replicate and size) and
//! `<output>.summary.json`, both tagged with the config hash and written
//! atomically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asymptotics::{o_constant, sigma_sq_hash, sigma_sq_xi, VarianceConstants};
use crate::binning_test::{bin_count, calibrate_zeta, run_bin_test, BinTestParams};
use crate::crt::{kernel_gaussian, kernel_uniform01, run_xi_crt, MarkovKernel, XiStatistic};
use crate::data::{Dataset, Matrix, TieBreak, TieBreakPolicy};
use crate::estimators::{xi_hash, xi_hat, xi_n};
use crate::generators::{
    holder_params_for_n, holder_population_xi, sample_farlie, sample_holder, sample_holder_valid_density,
    sample_null_uniform, sample_rotation, FarlieParams, GeneratorError, HolderFamilyParams, RotationParams,
};
use crate::rng::RngStream;
use crate::special::normal_cdf;
use crate::stats::{binomial_se, ks_distance, mean, median, variance, variance_se};

pub const SCHEMA_VERSION: u32 = 1;

/// Replicates computed between two checkpoints of the records file.
const CHECKPOINT_REPS: usize = 64;

/// Stream ids reserved for per-study (not per-replicate) randomness.
const CALIBRATION_STREAM: u64 = u64::MAX;
const CONSTANTS_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("replicate {replicate} at n = {n} failed: {message}")]
    Runtime { replicate: usize, n: usize, message: String },
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::ConfigInvalid(msg.into())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::IoFailure(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    CltVariance,
    Constants,
    CrtSize,
    CrtPower,
    LocalPowerQmd,
    LocalPowerHolder,
    RateCheck,
    BinTestPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    NullUniform {
        p: usize,
        q: usize,
    },
    /// `X`, `Y` independent uniforms, `Z = Y + noise_sd · ε`.
    NoisyCopy {
        noise_sd: f64,
    },
    Rotation {
        params: RotationParams,
    },
    /// Rotation alternative with `Δ = Δ₀ / √n`.
    RotationLocal {
        base: RotationParams,
        delta0: f64,
    },
    Farlie {
        delta: f64,
    },
    /// Bump family with checkerboard signs, the same at every `n`.
    HolderFixed {
        rho: f64,
        m: usize,
        m_prime: usize,
        /// Only require a valid density instead of the bona fide bound.
        #[serde(default)]
        valid_density_only: bool,
    },
    /// Shrinking bump sequence; signs are redrawn per replicate.
    HolderShrinking {
        s: f64,
        l: f64,
        delta0: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StatisticSpec {
    /// A coefficient estimate per replicate.
    Xi { variant: XiStatistic },
    /// CRT with a coefficient statistic; `B` and `alpha` come from the config.
    Crt { statistic: XiStatistic },
    /// Binning test; `zeta` is calibrated on null uniform data when absent.
    BinTest {
        s: f64,
        #[serde(default)]
        zeta: Option<f64>,
        #[serde(default = "default_calibration_reps")]
        calibration_reps: usize,
    },
    /// One `o_d` estimate per replicate; `n_grid` lists the dimensions `d`.
    Constants { n_samples: u64 },
}

fn default_calibration_reps() -> usize {
    1000
}

fn default_alpha() -> f64 {
    0.05
}

fn default_constants_samples() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub study: Study,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
    pub statistic: StatisticSpec,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    #[serde(default, rename = "B")]
    pub b: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub tie_break: TieBreakPolicy,
    /// Monte Carlo size for the `o_d` entering reference variances.
    #[serde(default = "default_constants_samples")]
    pub constants_samples: u64,
    /// Base path; `.records.csv` and `.summary.json` are appended.
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn records_path(&self) -> PathBuf {
        suffixed(&self.output, ".records.csv")
    }

    pub fn summary_path(&self) -> PathBuf {
        suffixed(&self.output, ".summary.json")
    }

    /// SHA-256 of the canonical JSON form, ignoring the output path.
    pub fn hash(&self) -> String {
        let canonical = Self {
            output: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported schema version {}", self.version)));
        }
        if self.reps == 0 {
            return Err(invalid("reps must be at least 1"));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(invalid("n_grid must be a non-empty list of positive sizes"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        use StatisticSpec as S;
        use Study::*;
        let stat_ok = matches!(
            (self.study, &self.statistic),
            (CltVariance | RateCheck, S::Xi { .. })
                | (CrtSize | CrtPower | LocalPowerQmd | LocalPowerHolder, S::Crt { .. })
                | (BinTestPower, S::BinTest { .. })
                | (Constants, S::Constants { .. })
        );
        if !stat_ok {
            return Err(invalid(format!("statistic {:?} does not fit study {:?}", self.statistic, self.study)));
        }
        if let S::Constants { n_samples } = self.statistic {
            if n_samples == 0 {
                return Err(invalid("n_samples must be positive"));
            }
            return match self.generator {
                None => Ok(()),
                Some(_) => Err(invalid("the constants study takes no generator")),
            };
        }
        let gen = self.generator.as_ref().ok_or_else(|| invalid("a generator is required"))?;
        let gen_ok = match self.study {
            CltVariance | CrtSize => matches!(gen, GeneratorSpec::NullUniform { .. }),
            LocalPowerQmd => matches!(gen, GeneratorSpec::RotationLocal { .. }),
            LocalPowerHolder => matches!(gen, GeneratorSpec::HolderShrinking { .. }),
            RateCheck => matches!(gen, GeneratorSpec::HolderFixed { .. } | GeneratorSpec::HolderShrinking { .. }),
            _ => true,
        };
        if !gen_ok {
            return Err(invalid(format!("generator {gen:?} does not fit study {:?}", self.study)));
        }
        match &self.statistic {
            S::Crt { .. } => {
                if self.b == 0 {
                    return Err(invalid("B must be at least 1 for a CRT study"));
                }
                kernel_for(gen)?;
            }
            S::BinTest { s, calibration_reps, .. } => {
                if !(*s > 0.0 && *s <= 1.0) {
                    return Err(invalid(format!("s must lie in (0, 1], got {s}")));
                }
                if *calibration_reps < 200 {
                    return Err(invalid("calibration_reps must be at least 200"));
                }
                if self.n_grid.iter().any(|&n| n < 8) {
                    return Err(invalid("the binning test needs n >= 8"));
                }
                if !unit_cube_1d(gen) {
                    return Err(invalid("the binning test needs p = q = 1 data on the unit cube"));
                }
            }
            S::Xi { variant } => {
                let p = generator_p(gen);
                match (variant, p) {
                    (XiStatistic::XiHash, Some(0)) | (XiStatistic::Xi | XiStatistic::XiHat, Some(1..)) => {}
                    _ => return Err(invalid(format!("statistic {variant:?} does not fit the generator's X dimension"))),
                }
            }
            S::Constants { .. } => unreachable!(),
        }
        for &n in &self.n_grid {
            validate_generator(gen, n)?;
        }
        Ok(())
    }
}

fn suffixed(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generator_p(gen: &GeneratorSpec) -> Option<usize> {
    match gen {
        GeneratorSpec::NullUniform { p, .. } => Some(*p),
        GeneratorSpec::Rotation { params } => Some(params.p()),
        GeneratorSpec::RotationLocal { base, .. } => Some(base.p()),
        _ => Some(1),
    }
}

fn unit_cube_1d(gen: &GeneratorSpec) -> bool {
    match gen {
        GeneratorSpec::NullUniform { p, q } => *p == 1 && *q == 1,
        GeneratorSpec::Farlie { .. } | GeneratorSpec::HolderFixed { .. } | GeneratorSpec::HolderShrinking { .. } => true,
        _ => false,
    }
}

fn validate_generator(gen: &GeneratorSpec, n: usize) -> Result<(), ExperimentError> {
    let probe = RngStream::root(0);
    let checked = match gen {
        GeneratorSpec::NullUniform { q, .. } => {
            if *q == 0 {
                return Err(invalid("q must be positive"));
            }
            Ok(())
        }
        GeneratorSpec::NoisyCopy { noise_sd } => {
            if !(noise_sd.is_finite() && *noise_sd >= 0.0) {
                return Err(invalid("noise_sd must be finite and nonnegative"));
            }
            Ok(())
        }
        GeneratorSpec::Rotation { params } => sample_rotation(1, params, probe).map(|_| ()),
        GeneratorSpec::RotationLocal { base, delta0 } => {
            let alt = LocalAlternative::RotationQmd {
                base: base.clone(),
                delta0: *delta0,
            };
            local_alternative_sequence(&alt, n, probe).and_then(|p| match p {
                AlternativeParams::Rotation(r) => sample_rotation(1, &r, probe).map(|_| ()),
                AlternativeParams::Holder(_) => unreachable!(),
            })
        }
        GeneratorSpec::Farlie { delta } => sample_farlie(1, FarlieParams { delta: *delta }, probe).map(|_| ()),
        GeneratorSpec::HolderFixed {
            rho,
            m,
            m_prime,
            valid_density_only,
        } => HolderFamilyParams::fixed(*rho, *m, *m_prime).and_then(|p| {
            if *valid_density_only {
                if p.density_ratio() > 1.0 {
                    return Err(GeneratorError::InvalidParameter("density would be negative".into()));
                }
                Ok(())
            } else if p.is_bona_fide() {
                Ok(())
            } else {
                Err(GeneratorError::NotBonaFide {
                    ratio: p.bona_fide_ratio(),
                })
            }
        }),
        GeneratorSpec::HolderShrinking { s, l, delta0 } => holder_params_for_n(n, *s, *l, *delta0, probe).map(|_| ()),
    };
    checked.map_err(|e| invalid(format!("generator at n = {n}: {e}")))
}

/// Parameters of one member of a local alternative sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalAlternative {
    /// `Δ_n = Δ₀ / √n`.
    RotationQmd { base: RotationParams, delta0: f64 },
    /// `m = m' ≍ n^{2/(4s+3)}`, `ρ³ ≍ n^{-(2s+3)/(4s+3)}`.
    HolderShrinking { s: f64, l: f64, delta0: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlternativeParams {
    Rotation(RotationParams),
    Holder(HolderFamilyParams),
}

/// The `n`-th member; `stream` draws the bump signs.
pub fn local_alternative_sequence(
    kind: &LocalAlternative,
    n: usize,
    stream: RngStream,
) -> Result<AlternativeParams, GeneratorError> {
    if n == 0 {
        return Err(GeneratorError::InvalidParameter("n must be positive".into()));
    }
    match kind {
        LocalAlternative::RotationQmd { base, delta0 } => {
            Ok(AlternativeParams::Rotation(base.with_delta(delta0 / (n as f64).sqrt())))
        }
        LocalAlternative::HolderShrinking { s, l, delta0 } => {
            holder_params_for_n(n, *s, *l, *delta0, stream).map(AlternativeParams::Holder)
        }
    }
}

fn kernel_for(gen: &GeneratorSpec) -> Result<MarkovKernel, ExperimentError> {
    match gen {
        GeneratorSpec::NullUniform { .. }
        | GeneratorSpec::NoisyCopy { .. }
        | GeneratorSpec::HolderFixed { .. }
        | GeneratorSpec::HolderShrinking { .. } => Ok(kernel_uniform01()),
        // Y* is independent of X* in the rotation model.
        GeneratorSpec::Rotation { params } | GeneratorSpec::RotationLocal { base: params, .. } => {
            kernel_gaussian(|_| 0.0, params.var_y.sqrt()).map_err(|e| invalid(e.to_string()))
        }
        GeneratorSpec::Farlie { .. } => Err(invalid("no CRT kernel is available for the Farlie generator")),
    }
}

/// Draws the data for one replicate; also returns the population coefficient
/// when it is known.
pub fn sample_generator(gen: &GeneratorSpec, n: usize, stream: RngStream) -> Result<(Dataset, Option<f64>), GeneratorError> {
    let data_stream = stream.derive_named("data");
    match gen {
        GeneratorSpec::NullUniform { p, q } => Ok((sample_null_uniform(n, *p, *q, data_stream), Some(0.0))),
        GeneratorSpec::NoisyCopy { noise_sd } => {
            let mut rng = data_stream.rng();
            let mut cols = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let y: f64 = rng.random();
                cols.0.push(rng.random::<f64>());
                cols.1.push(y);
                cols.2.push(y + noise_sd * rng.sample::<f64, _>(StandardNormal));
            }
            let data = Dataset::new(Matrix::column(&cols.0), cols.1, Matrix::column(&cols.2))
                .map_err(|e| GeneratorError::InvalidParameter(e.to_string()))?;
            Ok((data, None))
        }
        GeneratorSpec::Rotation { params } => Ok((sample_rotation(n, params, data_stream)?, None)),
        GeneratorSpec::RotationLocal { base, delta0 } => {
            let r = base.with_delta(delta0 / (n as f64).sqrt());
            let target = (*delta0 == 0.0).then_some(0.0);
            Ok((sample_rotation(n, &r, data_stream)?, target))
        }
        GeneratorSpec::Farlie { delta } => Ok((sample_farlie(n, FarlieParams { delta: *delta }, data_stream)?, None)),
        GeneratorSpec::HolderFixed {
            rho,
            m,
            m_prime,
            valid_density_only,
        } => {
            let params = HolderFamilyParams::fixed(*rho, *m, *m_prime)?;
            let data = if *valid_density_only {
                sample_holder_valid_density(n, &params, data_stream)?
            } else {
                sample_holder(n, &params, data_stream)?
            };
            Ok((data, Some(holder_population_xi(&params))))
        }
        GeneratorSpec::HolderShrinking { s, l, delta0 } => {
            let params = holder_params_for_n(n, *s, *l, *delta0, stream.derive_named("params"))?;
            Ok((sample_holder(n, &params, data_stream)?, Some(holder_population_xi(&params))))
        }
    }
}

/// One row of the records file.
///
/// For the constants study `n` holds the dimension and `value` the `o_d`
/// estimate; for the binning test `value` is `T / √d` (`-inf` when the
/// Poisson size exceeded `n`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub replicate: usize,
    pub n: usize,
    pub value: f64,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub target: Option<f64>,
}

/// Config-derived reference values at one sample size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    /// Population coefficient, when known (for shrinking bump sequences it
    /// depends on `n`).
    pub population_xi: Option<f64>,
    /// Null variance of `√n` times the statistic (CLT study).
    pub null_variance: Option<f64>,
    /// Calibrated binning-test threshold.
    pub zeta: Option<f64>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub reps: usize,
    /// Replicates with a finite value; moments use only these.
    pub finite: usize,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    /// `n · variance`, i.e. the variance of `√n` times the value.
    pub scaled_variance: Option<f64>,
    pub scaled_variance_se: Option<f64>,
    /// KS distance of `√n · value` to `N(0, null_variance)`.
    pub ks_to_null_normal: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub rejection_se: Option<f64>,
    pub median_abs_error: Option<f64>,
    pub reference: Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub study: Study,
    pub config_hash: String,
    pub master_seed: u64,
    pub code_version: String,
    pub records: usize,
    pub elapsed_secs: f64,
    pub per_n: Vec<SizeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<Record>,
    pub summary: Summary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep replicates already present in an output with the same config hash.
    pub resume: bool,
}

fn finite_opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Per-size summaries recomputed from the records.
pub fn summarize(records: &[Record], references: &BTreeMap<usize, Reference>, n_grid: &[usize]) -> Vec<SizeSummary> {
    n_grid
        .iter()
        .map(|&n| {
            let rows: Vec<&Record> = records.iter().filter(|r| r.n == n).collect();
            let reference = references.get(&n).cloned().unwrap_or_default();
            let vals: Vec<f64> = rows.iter().map(|r| r.value).filter(|v| v.is_finite()).collect();
            let nf = n as f64;
            let var = finite_opt(variance(&vals));
            let decisions: Vec<bool> = rows.iter().filter_map(|r| r.reject).collect();
            let rate = (!decisions.is_empty())
                .then(|| decisions.iter().filter(|&&d| d).count() as f64 / decisions.len() as f64);
            let errors: Vec<f64> = rows
                .iter()
                .filter_map(|r| r.target.map(|t| (r.value - t).abs()))
                .filter(|e| e.is_finite())
                .collect();
            let ks = reference.null_variance.filter(|_| !vals.is_empty()).map(|s2| {
                let scaled: Vec<f64> = vals.iter().map(|v| v * nf.sqrt()).collect();
                let sd = s2.sqrt();
                ks_distance(&scaled, |x| normal_cdf(x / sd))
            });
            SizeSummary {
                n,
                reps: rows.len(),
                finite: vals.len(),
                mean: finite_opt(mean(&vals)),
                variance: var,
                scaled_variance: var.map(|v| v * nf),
                scaled_variance_se: var.and_then(|_| finite_opt(variance_se(&vals) * nf)),
                ks_to_null_normal: ks,
                rejection_rate: rate,
                rejection_se: rate.map(|p| binomial_se(p, decisions.len())),
                median_abs_error: (!errors.is_empty()).then(|| median(&errors)),
                reference,
            }
        })
        .collect()
}

fn references(cfg: &ExperimentConfig) -> Result<BTreeMap<usize, Reference>, ExperimentError> {
    let mut out = BTreeMap::new();
    let constants_stream = RngStream::new(cfg.master_seed, CONSTANTS_STREAM);
    let calibration_stream = RngStream::new(cfg.master_seed, CALIBRATION_STREAM);
    for &n in &cfg.n_grid {
        let mut r = Reference::default();
        match &cfg.generator {
            Some(GeneratorSpec::NullUniform { .. }) => r.population_xi = Some(0.0),
            Some(GeneratorSpec::HolderFixed { rho, m, m_prime, .. }) => {
                let p = HolderFamilyParams::fixed(*rho, *m, *m_prime).map_err(|e| invalid(e.to_string()))?;
                r.population_xi = Some(holder_population_xi(&p));
            }
            Some(GeneratorSpec::HolderShrinking { s, l, delta0 }) => {
                // The coefficient depends on (m, ρ) only, not on the signs.
                let p = holder_params_for_n(n, *s, *l, *delta0, RngStream::root(0)).map_err(|e| invalid(e.to_string()))?;
                r.population_xi = Some(holder_population_xi(&p));
            }
            _ => {}
        }
        if cfg.study == Study::CltVariance {
            if let (StatisticSpec::Xi { variant }, Some(GeneratorSpec::NullUniform { p, q })) = (&cfg.statistic, &cfg.generator) {
                let mut dims = vec![*q, p + q, *p];
                dims.retain(|&d| d > 1);
                let mut c = VarianceConstants::compute(&dims, cfg.constants_samples, constants_stream);
                let one = VarianceConstants::exact_one_dimensional();
                c.kappa.extend(one.kappa);
                c.o.extend(one.o);
                let v = match variant {
                    XiStatistic::XiHash => sigma_sq_hash(*q, &c),
                    _ => sigma_sq_xi(*p, *q, &c),
                };
                r.null_variance = Some(v.map_err(|e| invalid(e.to_string()))?);
            }
        }
        if let StatisticSpec::BinTest {
            s,
            zeta,
            calibration_reps,
        } = &cfg.statistic
        {
            r.bins = Some(bin_count(n, *s));
            r.zeta = Some(match zeta {
                Some(z) => *z,
                None => {
                    let sampler = |st: RngStream| sample_null_uniform(n, 1, 1, st);
                    calibrate_zeta(sampler, n, *s, *calibration_reps, cfg.alpha, calibration_stream.derive(n as u64))
                        .map_err(|e| invalid(e.to_string()))?
                        .zeta
                }
            });
        }
        out.insert(n, r);
    }
    Ok(out)
}

fn run_replicate(
    cfg: &ExperimentConfig,
    refs: &BTreeMap<usize, Reference>,
    kernel: Option<&MarkovKernel>,
    replicate: usize,
    n: usize,
) -> Result<Record, ExperimentError> {
    let stream = RngStream::new(cfg.master_seed, replicate as u64).derive(n as u64);
    let fail = |message: String| ExperimentError::Runtime { replicate, n, message };
    let mut record = Record {
        replicate,
        n,
        value: f64::NAN,
        p_value: None,
        reject: None,
        target: None,
    };
    if let StatisticSpec::Constants { n_samples } = cfg.statistic {
        record.value = o_constant(n, n_samples, stream).estimate;
        return Ok(record);
    }
    let gen = cfg.generator.as_ref().expect("validated");
    let (data, target) = sample_generator(gen, n, stream).map_err(|e| fail(e.to_string()))?;
    // The binning statistic is not an estimate of the coefficient.
    if !matches!(cfg.statistic, StatisticSpec::BinTest { .. }) {
        record.target = target;
    }
    let tie = TieBreak::new(cfg.tie_break, stream.derive_named("tie"));
    match &cfg.statistic {
        StatisticSpec::Xi { variant } => {
            let r = match variant {
                XiStatistic::Xi => xi_n(&data, tie),
                XiStatistic::XiHash => xi_hash(&data, tie),
                XiStatistic::XiHat => xi_hat(&data, tie),
            };
            record.value = r.map_err(|e| fail(e.to_string()))?.value;
        }
        StatisticSpec::Crt { statistic } => {
            let kernel = kernel.expect("validated");
            let o = run_xi_crt(&data, kernel, *statistic, tie, cfg.b, cfg.alpha, stream.derive_named("crt"))
                .map_err(|e| fail(e.to_string()))?;
            record.value = o.observed_stat;
            record.p_value = Some(o.p_value);
            record.reject = Some(o.reject);
        }
        StatisticSpec::BinTest { s, .. } => {
            let reference = &refs[&n];
            let params = BinTestParams {
                d: reference.bins.expect("set for bin tests"),
                s: *s,
                zeta: reference.zeta.expect("set for bin tests"),
            };
            let o = run_bin_test(&data, &params, stream.derive_named("test")).map_err(|e| fail(e.to_string()))?;
            record.value = o.normalized_stat(params.d);
            record.reject = Some(o.reject);
        }
        StatisticSpec::Constants { .. } => unreachable!(),
    }
    Ok(record)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = suffixed(path, ".tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

const HASH_PREFIX: &str = "# config_hash=";

pub fn records_to_csv(records: &[Record], config_hash: &str) -> Result<Vec<u8>, ExperimentError> {
    let mut out = format!("{HASH_PREFIX}{config_hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in records {
            w.serialize(r).map_err(|e| ExperimentError::IoFailure(e.to_string()))?;
        }
        w.flush().map_err(|e| ExperimentError::IoFailure(e.to_string()))?;
    }
    Ok(out)
}

/// Reads a records file, returning its config hash and rows.
pub fn read_records(path: &Path) -> Result<(String, Vec<Record>), ExperimentError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| io_err(path, e))?;
    let hash = first
        .trim_end()
        .strip_prefix(HASH_PREFIX)
        .ok_or_else(|| io_err(path, "missing config hash line"))?
        .to_string();
    let records = csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<Result<Vec<Record>, _>>()
        .map_err(|e| io_err(path, e))?;
    Ok((hash, records))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    run_experiment_with(cfg, RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    let records_path = cfg.records_path();
    let mut done: BTreeMap<(usize, usize), Record> = BTreeMap::new();
    if opts.resume && records_path.exists() {
        let (old_hash, old) = read_records(&records_path)?;
        if old_hash != hash {
            return Err(invalid(format!(
                "{} was produced by a different config (hash {old_hash})",
                records_path.display()
            )));
        }
        for r in old.into_iter().filter(|r| r.replicate < cfg.reps && cfg.n_grid.contains(&r.n)) {
            done.insert((r.replicate, r.n), r);
        }
    }
    let refs = references(cfg)?;
    let kernel = match (&cfg.statistic, &cfg.generator) {
        (StatisticSpec::Crt { .. }, Some(g)) => Some(kernel_for(g)?),
        _ => None,
    };
    let todo: Vec<(usize, usize)> = (0..cfg.reps)
        .flat_map(|r| cfg.n_grid.iter().map(move |&n| (r, n)))
        .filter(|key| !done.contains_key(key))
        .collect();
    for chunk in todo.chunks(CHECKPOINT_REPS * cfg.n_grid.len()) {
        let fresh = chunk
            .par_iter()
            .map(|&(r, n)| run_replicate(cfg, &refs, kernel.as_ref(), r, n))
            .collect::<Result<Vec<Record>, _>>()?;
        done.extend(fresh.into_iter().map(|r| ((r.replicate, r.n), r)));
        let rows: Vec<Record> = done.values().cloned().collect();
        write_atomic(&records_path, &records_to_csv(&rows, &hash)?)?;
    }
    let records: Vec<Record> = done.into_values().collect();
    if todo.is_empty() {
        write_atomic(&records_path, &records_to_csv(&records, &hash)?)?;
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        study: cfg.study,
        config_hash: hash,
        master_seed: cfg.master_seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        records: records.len(),
        elapsed_secs: start.elapsed().as_secs_f64(),
        per_n: summarize(&records, &refs, &cfg.n_grid),
    };
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| ExperimentError::IoFailure(e.to_string()))?;
    write_atomic(&cfg.summary_path(), &json)?;
    Ok(ExperimentResult { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clt_config(dir: &Path, reps: usize) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "version": 1,
                "study": "clt_variance",
                "generator": {{"kind": "null_uniform", "p": 0, "q": 1}},
                "statistic": {{"kind": "xi", "variant": "xi_hash"}},
                "n_grid": [100, 200],
                "reps": {reps},
                "master_seed": 7,
                "output": "{}"
            }}"#,
            dir.join("clt").display()
        ))
        .unwrap()
    }

    #[test]
    fn zero_reps_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = clt_config(dir.path(), 5);
        cfg.reps = 0;
        assert!(matches!(run_experiment(&cfg), Err(ExperimentError::ConfigInvalid(_))));
    }

    #[test]
    fn unknown_keys_and_mismatched_studies_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let good = serde_json::to_value(clt_config(dir.path(), 5)).unwrap();
        let mut extra = good.clone();
        extra["colour"] = "blue".into();
        assert!(ExperimentConfig::from_json(&extra.to_string()).is_err());
        let mut wrong = good.clone();
        wrong["statistic"] = serde_json::json!({"kind": "crt", "statistic": "xi"});
        assert!(ExperimentConfig::from_json(&wrong.to_string()).is_err());
        let mut bad_gen = good;
        bad_gen["generator"] = serde_json::json!({"kind": "null_uniform", "p": 0, "q": 1, "r": 2});
        assert!(ExperimentConfig::from_json(&bad_gen.to_string()).is_err());
    }

    #[test]
    fn identical_runs_write_identical_records() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_experiment(&clt_config(a.path(), 20)).unwrap();
        let rb = run_experiment(&clt_config(b.path(), 20)).unwrap();
        assert_eq!(ra.records.len(), 40);
        let fa = fs::read(clt_config(a.path(), 20).records_path()).unwrap();
        let fb = fs::read(clt_config(b.path(), 20).records_path()).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ra.summary.per_n, rb.summary.per_n);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_experiment(&clt_config(a.path(), 10)).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let rb = pool.install(|| run_experiment(&clt_config(b.path(), 10))).unwrap();
        assert_eq!(ra.records, rb.records);
    }

    #[test]
    fn resume_completes_a_partial_run() {
        let dir = tempfile::tempdir().unwrap();
        let full = run_experiment(&clt_config(dir.path(), 12)).unwrap();
        let path = clt_config(dir.path(), 12).records_path();
        let partial: Vec<Record> = full.records.iter().filter(|r| r.replicate < 5).cloned().collect();
        fs::write(&path, records_to_csv(&partial, &clt_config(dir.path(), 12).hash()).unwrap()).unwrap();
        let resumed = run_experiment_with(&clt_config(dir.path(), 12), RunOptions { resume: true }).unwrap();
        assert_eq!(resumed.records, full.records);
        // A different config must not silently reuse the records.
        let mut other = clt_config(dir.path(), 12);
        other.master_seed = 8;
        assert!(matches!(
            run_experiment_with(&other, RunOptions { resume: true }),
            Err(ExperimentError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn summary_is_recomputable_from_the_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = clt_config(dir.path(), 30);
        let res = run_experiment(&cfg).unwrap();
        let (hash, records) = read_records(&cfg.records_path()).unwrap();
        assert_eq!(hash, res.summary.config_hash);
        assert_eq!(records, res.records);
        let summary: Summary = serde_json::from_slice(&fs::read(cfg.summary_path()).unwrap()).unwrap();
        let refs: BTreeMap<usize, Reference> = summary.per_n.iter().map(|s| (s.n, s.reference.clone())).collect();
        let again = summarize(&records, &refs, &cfg.n_grid);
        for (a, b) in again.iter().zip(&summary.per_n) {
            let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
                (x, y) => x == y,
            };
            assert!(close(a.scaled_variance, b.scaled_variance));
            assert!(close(a.mean, b.mean));
            assert!(close(a.ks_to_null_normal, b.ks_to_null_normal));
            assert_eq!(a.reps, b.reps);
        }
        assert!((summary.per_n[0].reference.null_variance.unwrap() - 16.0 / 15.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_values_roundtrip_through_csv() {
        let rows = vec![Record {
            replicate: 0,
            n: 10,
            value: f64::NEG_INFINITY,
            p_value: None,
            reject: Some(false),
            target: Some(0.1 + 0.2),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        fs::write(&path, records_to_csv(&rows, "abc").unwrap()).unwrap();
        assert_eq!(read_records(&path).unwrap(), ("abc".to_string(), rows));
    }

    #[test]
    fn rotation_sequence_scales_delta() {
        let base = RotationParams::standard(1, 1, vec![vec![0.0]], vec![1.0], 0.0);
        let kind = LocalAlternative::RotationQmd {
            base: base.clone(),
            delta0: 2.0,
        };
        match local_alternative_sequence(&kind, 400, RngStream::root(0)).unwrap() {
            AlternativeParams::Rotation(r) => assert!((r.delta - 0.1).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        // Δ₀ = 0 leaves Z untouched by Y whatever b is.
        let null = LocalAlternative::RotationQmd { base, delta0: 0.0 };
        let AlternativeParams::Rotation(r) = local_alternative_sequence(&null, 50, RngStream::root(0)).unwrap() else {
            panic!()
        };
        let a = sample_rotation(50, &r, RngStream::root(3)).unwrap();
        let b = sample_rotation(50, &RotationParams { b_vec: vec![5.0], ..r }, RngStream::root(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn holder_sequence_reports_population_xi() {
        let kind = LocalAlternative::HolderShrinking {
            s: 1.0,
            l: 70.0,
            delta0: 1e-5,
        };
        let AlternativeParams::Holder(p) = local_alternative_sequence(&kind, 2000, RngStream::root(1)).unwrap() else {
            panic!()
        };
        assert!(p.is_bona_fide());
        let tiny = LocalAlternative::HolderShrinking {
            s: 1.0,
            l: 70.0,
            delta0: 1.0,
        };
        assert!(matches!(
            local_alternative_sequence(&tiny, 10, RngStream::root(1)),
            Err(GeneratorError::NotBonaFide { .. })
        ));
    }
}
