//! The `mmdot` command line front end.
//!
//! Every command reads local files and flags only and writes its result
//! atomically, along with a `<out>.manifest.json` recording the resolved
//! parameters, the seed, the library version, FNV-1a digests of the inputs
//! and the wall-clock runtime. Result payloads never contain timings, so
//! reruns with the same flags are byte-identical.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when `solve`
//! ran out of iterations (results are still written).

mod commands;
mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use io::{file_digest, RunManifest};

use crate::experiments::SolverMethod;
use crate::solvers::{FwVariant, SolverConfig};
use crate::transport_map::BetaDerivation;

#[derive(Debug, Parser)]
#[command(name = "mmdot", version, about = "MMD-regularized kernel mean embedding optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for the plan coefficients between two point sets.
    Solve(SolveArgs),
    /// Apply a transport map to points.
    Map(MapArgs),
    /// Exact discrete OT with uniform marginals.
    Emd(EmdArgs),
    /// Compare the learned map with the closed-form Gaussian map.
    EvalGaussian(EvalGaussianArgs),
    /// Fit the decay of the objective error with the sample size.
    SampleComplexity(SampleComplexityArgs),
    /// Transport labeled source data and classify target data by 1-NN.
    DomainAdapt(DomainAdaptArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KernelArg {
    Gaussian,
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MethodArg {
    Fw,
    Admm,
}

impl From<MethodArg> for SolverMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fw => SolverMethod::Fw,
            MethodArg::Admm => SolverMethod::Admm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum VariantArg {
    Vanilla,
    AwayStep,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BetaArg {
    Nnls,
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MapMethodArg {
    Closed,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum MapCostArg {
    Sqeuclidean,
    Euclidean,
}

/// Regularization weights and iteration budgets shared by all solving commands.
#[derive(Debug, Clone, Args, Serialize)]
struct SolverArgs {
    #[arg(long, default_value_t = 10.0)]
    lambda1: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 10.0)]
    nu1: f64,
    #[arg(long, default_value_t = 10.0)]
    nu2: f64,
    /// ADMM penalty.
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    /// Frank-Wolfe iterations, or ADMM outer iterations.
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(long, default_value_t = 200)]
    max_inner_iters: usize,
    /// Duality-gap stop for Frank-Wolfe; primal-residual stop for ADMM.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_enum, default_value_t = VariantArg::Pairwise)]
    fw_variant: VariantArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn config(&self, method: MethodArg) -> SolverConfig {
        let base = SolverConfig::default();
        SolverConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            nu1: self.nu1,
            nu2: self.nu2,
            rho_admm: self.rho,
            max_outer_iters: self.max_iters,
            max_inner_iters: self.max_inner_iters,
            tol_gap: match (method, self.tol) {
                (MethodArg::Fw, Some(t)) => t,
                _ => base.tol_gap,
            },
            tol_residual: match (method, self.tol) {
                (MethodArg::Admm, Some(t)) => t,
                _ => base.tol_residual,
            },
            fw_variant: match self.fw_variant {
                VariantArg::Vanilla => FwVariant::Vanilla,
                VariantArg::AwayStep => FwVariant::AwayStep,
                VariantArg::Pairwise => FwVariant::Pairwise,
            },
            seed: self.seed,
        }
    }
}

/// How `beta` is recovered from a Frank-Wolfe plan.
#[derive(Debug, Clone, Args, Serialize)]
struct BetaArgs {
    #[arg(long, value_enum, default_value_t = BetaArg::Nnls)]
    beta: BetaArg,
    #[arg(long, default_value_t = 500)]
    beta_iters: usize,
    /// Gram jitter for `--beta clamped`.
    #[arg(long, default_value_t = 1e-6)]
    jitter: f64,
}

impl BetaArgs {
    fn derivation(&self) -> BetaDerivation {
        match self.beta {
            BetaArg::Nnls => BetaDerivation::Nnls { iters: self.beta_iters },
            BetaArg::Clamped => BetaDerivation::ClampedSolve { jitter: self.jitter },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct SolveArgs {
    /// Source points CSV. Optional with `--kernel delta` and a cost file.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    kernel: KernelArg,
    #[arg(long)]
    sigma: Option<f64>,
    /// `sqeuclidean` or a cost matrix CSV.
    #[arg(long, default_value = "sqeuclidean")]
    cost: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Fw)]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    beta: BetaArgs,
    /// Also write a transport map model JSON.
    #[arg(long)]
    emit_model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct MapArgs {
    /// Model JSON written by `solve --emit-model`.
    #[arg(long, conflicts_with = "plan")]
    model: Option<PathBuf>,
    /// Plan JSON written by `solve`; needs `--source` and `--target`.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, requires = "plan")]
    source: Option<PathBuf>,
    #[arg(long, requires = "plan")]
    target: Option<PathBuf>,
    /// Ground cost for a model assembled from `--plan`.
    #[arg(long, value_enum, default_value_t = MapCostArg::Sqeuclidean)]
    cost: MapCostArg,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long)]
    points: PathBuf,
    #[arg(long, value_enum, default_value_t = MapMethodArg::Closed)]
    method: MapMethodArg,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long)]
    step_scale: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EmdArgs {
    /// A cost matrix CSV, or `sqeuclidean` with `--source` and `--target`.
    #[arg(long, default_value = "sqeuclidean")]
    cost: String,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EvalGaussianArgs {
    #[arg(long)]
    dim: usize,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    /// Comma-separated kernel bandwidths.
    #[arg(long, value_delimiter = ',', required = true)]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Fresh source points for the out-of-sample error.
    #[arg(long, default_value_t = 200)]
    oos: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Fw)]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    beta: BetaArgs,
    /// Also write the per-run records as CSV.
    #[arg(long)]
    records_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SampleComplexityArgs {
    /// Comma-separated dimensions.
    #[arg(long, value_delimiter = ',', required = true)]
    dim: Vec<usize>,
    /// Comma-separated, strictly increasing sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    #[arg(long)]
    sigma: f64,
    #[arg(long, default_value_t = 8)]
    ref_multiplier: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Fw)]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DomainAdaptArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target_train: PathBuf,
    #[arg(long)]
    target_test: PathBuf,
    #[arg(long)]
    oos_source: Option<PathBuf>,
    #[arg(long)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Fw)]
    method: MethodArg,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long)]
    out: PathBuf,
}

/// A failed command: the message goes to stderr and the exit code is 1.
#[derive(Debug)]
pub struct Failure(pub String);

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure(e.to_string())
    }
}

enum Outcome {
    Done,
    NotConverged,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a),
        Command::Map(a) => commands::map(a),
        Command::Emd(a) => commands::emd(a),
        Command::EvalGaussian(a) => commands::eval_gaussian(a),
        Command::SampleComplexity(a) => commands::sample_complexity(a),
        Command::DomainAdapt(a) => commands::domain_adapt(a),
    };
    match result {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::NotConverged) => {
            eprintln!("warning: solver did not converge within the iteration budget; results were written");
            2
        }
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
