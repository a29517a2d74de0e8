use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use codep::asymptotics::{sigma_sq_hash, sigma_sq_xi, ConstantsCache};
use codep::binning_test::{calibrate_zeta, run_bin_test, BinTestParams};
use codep::crt::{kernel_gaussian, kernel_uniform01, run_xi_crt, XiStatistic};
use codep::estimators::{xi_hash, xi_hat, xi_n};
use codep::experiments::{run_experiment_with, sample_generator, ExperimentConfig, ExperimentError, GeneratorSpec, RunOptions};
use codep::generators::sample_null_uniform;
use codep::{Dataset, RngStream, TieBreak, TieBreakPolicy};
use serde_json::json;

#[derive(Parser)]
#[command(name = "codep", version, about = "Nearest-neighbor conditional dependence: estimators, tests and studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tie {
    RandomUniform,
    LowestIndex,
}

impl From<Tie> for TieBreakPolicy {
    fn from(t: Tie) -> Self {
        match t {
            Tie::RandomUniform => TieBreakPolicy::RandomUniform,
            Tie::LowestIndex => TieBreakPolicy::LowestIndex,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a study described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        resume: bool,
        /// Override the config's output base path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Estimate a coefficient on a CSV dataset (columns x1..xp, y, z1..zq).
    Xi {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "xi")]
        statistic: XiStatistic,
        #[arg(long, value_enum, default_value = "random-uniform")]
        tie: Tie,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Conditional randomization test on a CSV dataset.
    Crt {
        #[arg(long)]
        data: PathBuf,
        /// Law of Y given X: `uniform01` or `gaussian:<sd>` (mean zero).
        #[arg(long, default_value = "uniform01")]
        kernel: String,
        #[arg(long, default_value = "xi")]
        statistic: XiStatistic,
        #[arg(long = "b", default_value_t = 99)]
        b: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "random-uniform")]
        tie: Tie,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw a dataset from a generator spec (JSON) and write it as CSV.
    Gen {
        /// e.g. `{"kind": "null_uniform", "p": 1, "q": 1}`
        #[arg(long)]
        spec: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print κ_d, o_d and the null variances for the given dimensions.
    Constants {
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON cache of previously computed constants.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Binning test on a CSV dataset with p = q = 1 on the unit cube.
    Bintest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        /// Threshold; calibrated on null uniform data when omitted.
        #[arg(long)]
        zeta: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        calibration_reps: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::ConfigInvalid(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    Dataset::load_csv(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config: path,
            threads,
            resume,
            output,
        } => {
            let mut cfg = ExperimentConfig::load(&path)?;
            if let Some(o) = output {
                cfg.output = o;
            }
            let run = || run_experiment_with(&cfg, RunOptions { resume });
            let res = match threads {
                Some(t) => rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(config)?
                    .install(run)?,
                None => run()?,
            };
            eprintln!(
                "{} records -> {}, {}",
                res.records.len(),
                cfg.records_path().display(),
                cfg.summary_path().display()
            );
            print(serde_json::to_value(&res.summary).map_err(runtime)?);
        }
        Command::Xi {
            data,
            statistic,
            tie,
            seed,
        } => {
            let d = load(&data)?;
            let tie = TieBreak::new(tie.into(), RngStream::root(seed));
            let r = match statistic {
                XiStatistic::Xi => xi_n(&d, tie),
                XiStatistic::XiHash => xi_hash(&d, tie),
                XiStatistic::XiHat => xi_hat(&d, tie),
            }
            .map_err(runtime)?;
            print(json!({
                "statistic": r.variant.name(),
                "value": r.value,
                "numerator": r.numerator,
                "denominator": r.denominator,
                "n": d.n(),
                "tie_events": r.tie_events(),
            }));
        }
        Command::Crt {
            data,
            kernel,
            statistic,
            b,
            alpha,
            tie,
            seed,
        } => {
            let d = load(&data)?;
            let k = match kernel.split_once(':') {
                None if kernel == "uniform01" => kernel_uniform01(),
                Some(("gaussian", sd)) => kernel_gaussian(|_| 0.0, sd.parse().map_err(config)?).map_err(config)?,
                _ => return Err(Failure::Config(format!("unknown kernel `{kernel}`"))),
            };
            let root = RngStream::root(seed);
            let tie = TieBreak::new(tie.into(), root.derive_named("tie"));
            let o = run_xi_crt(&d, &k, statistic, tie, b, alpha, root.derive_named("crt")).map_err(runtime)?;
            print(json!({
                "p_value": o.p_value,
                "reject": o.reject,
                "observed_stat": o.observed_stat,
                "b": o.b,
                "alpha": o.alpha,
                "kernel": k.description(),
            }));
        }
        Command::Gen { spec, n, seed, out } => {
            let spec: GeneratorSpec = serde_json::from_str(&spec).map_err(config)?;
            let (d, target) = sample_generator(&spec, n, RngStream::root(seed)).map_err(config)?;
            d.save_csv(&out).map_err(runtime)?;
            print(json!({ "n": d.n(), "p": d.p(), "q": d.q(), "population_xi": target, "out": out }));
        }
        Command::Constants {
            dims,
            samples,
            seed,
            cache,
        } => {
            let mut c = match &cache {
                Some(p) => ConstantsCache::load(p).map_err(config)?,
                None => ConstantsCache::default(),
            };
            let mut all: Vec<usize> = dims.iter().flat_map(|&d| [d, d + 1]).collect();
            all.sort_unstable();
            all.dedup();
            let vc = c.variance_constants(&all, samples, seed);
            if let Some(p) = &cache {
                c.save(p).map_err(runtime)?;
            }
            let rows: Vec<_> = dims
                .iter()
                .map(|&d| {
                    json!({
                        "d": d,
                        "kappa": vc.kappa[&d],
                        "o": vc.o[&d].estimate,
                        "o_se": vc.o[&d].standard_error,
                        "sigma_sq_hash_q": sigma_sq_hash(d, &vc).ok(),
                        "sigma_sq_xi_p_1": sigma_sq_xi(d, 1, &vc).ok(),
                    })
                })
                .collect();
            print(json!(rows));
        }
        Command::Bintest {
            data,
            s,
            zeta,
            calibration_reps,
            alpha,
            seed,
        } => {
            let d = load(&data)?;
            let root = RngStream::root(seed);
            let n = d.n();
            let zeta = match zeta {
                Some(z) => z,
                None => {
                    let sampler = |st: RngStream| sample_null_uniform(n, 1, 1, st);
                    calibrate_zeta(sampler, n, s, calibration_reps, alpha, root.derive_named("calibrate"))
                        .map_err(config)?
                        .zeta
                }
            };
            let params = BinTestParams::for_n(n, s, zeta);
            let o = run_bin_test(&d, &params, root.derive_named("test")).map_err(runtime)?;
            print(json!({
                "d": params.d,
                "zeta": zeta,
                "t_stat": o.t_stat,
                "threshold": o.threshold,
                "reject": o.reject,
                "accepted_by_poisson": o.accepted_by_poisson,
                "subsample_size": o.subsample_size,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
