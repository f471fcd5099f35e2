//! Experiment harnesses: Gaussian ground-truth evaluation, the
//! sample-complexity slope study and domain adaptation with 1-NN.
//!
//! Every harness is a deterministic function of its inputs and seed.
//! Independent cells may run in parallel; records are sorted by
//! `(d, m, seed, sigma)` before aggregation.

mod complexity;
mod dataset;
mod domain;
mod gaussian;

pub use complexity::{run_sample_complexity_study, SampleComplexityOptions};
pub use dataset::LabeledDataset;
pub use domain::{nearest_neighbor_labels, run_domain_adaptation, DomainAdaptationOptions};
pub use gaussian::{
    emd_barycentric_map, gaussian_ground_truth_map, gaussian_transport_matrix, make_gaussian_pair, run_gaussian_experiment,
    sample_gaussian, GaussianExperimentOptions, GaussianPair,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embeddings::CostMatrix;
use crate::kernels::GramMatrix;
use crate::solvers::{solve_admm, solve_simplified, PlanCoefficients, SolveTrace, SolverConfig};
use crate::{Error, Result};

/// Which optimizer produces the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    /// Frank-Wolfe on the simplified program; `beta` is derived from `alpha`.
    #[default]
    Fw,
    /// ADMM on the consensus form; its `beta` is used directly.
    Admm,
}

impl SolverMethod {
    pub fn solve(self, c: &CostMatrix, g1: &GramMatrix, g2: &GramMatrix, cfg: &SolverConfig) -> Result<(PlanCoefficients, SolveTrace)> {
        match self {
            SolverMethod::Fw => solve_simplified(c, g1, g2, cfg),
            SolverMethod::Admm => solve_admm(c, g1, g2, cfg),
        }
    }
}

/// One `(seed, m, d, sigma)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub m: usize,
    pub d: usize,
    pub sigma: f64,
    pub mse_in_sample: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_oos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emd_mse: Option<f64>,
    /// Wall-clock time of the cell. The CLI moves it to the run manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters_used: Option<usize>,
    /// Condition numbers of the source and target grams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_condition: Option<[f64; 2]>,
    /// Set when the cell failed; such records are left out of aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub(crate) fn new(seed: u64, m: usize, d: usize, sigma: f64) -> Self {
        Self {
            seed,
            m,
            d,
            sigma,
            mse_in_sample: None,
            mse_oos: None,
            emd_mse: None,
            runtime_seconds: None,
            objective: None,
            converged: None,
            iters_used: None,
            gram_condition: None,
            error: None,
        }
    }

    fn sort_key(&self) -> (usize, usize, u64, f64) {
        (self.d, self.m, self.seed, self.sigma)
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

/// Aggregate over the successful records of one `(d, m, sigma)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub d: usize,
    pub m: usize,
    pub sigma: f64,
    pub runs: usize,
    pub failed: usize,
    pub mse_in_sample: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mse_oos: Option<Summary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emd_mse: Option<Summary>,
}

/// Objective errors against a large-sample reference, with their log-log fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeStudy {
    pub d: usize,
    pub m_values: Vec<usize>,
    /// `|g(m) - g(m_ref)|` per entry of `m_values`.
    pub errors: Vec<f64>,
    pub objectives: Vec<f64>,
    pub reference_m: usize,
    pub reference_objective: f64,
    pub fitted_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAdaptationResult {
    pub sigma: f64,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub accuracy_in_sample: f64,
    /// Absent when no out-of-sample source set was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_oos: Option<f64>,
    pub converged: bool,
    pub fallback_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub solver: SolverMethod,
    pub config: SolverConfig,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<CellAggregate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slopes: Vec<SlopeStudy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_adaptation: Option<DomainAdaptationResult>,
}

impl ExperimentReport {
    pub(crate) fn from_records(experiment: &str, solver: SolverMethod, config: SolverConfig, mut records: Vec<RunRecord>) -> Self {
        records.sort_by(|a, b| a.sort_key().partial_cmp(&b.sort_key()).expect("finite sigma"));
        let aggregates = aggregate(&records);
        Self {
            experiment: experiment.into(),
            solver,
            config,
            records,
            aggregates,
            slopes: Vec::new(),
            domain_adaptation: None,
        }
    }

    /// Removes wall-clock fields, returning them in record order.
    pub fn take_runtimes(&mut self) -> Vec<Option<f64>> {
        self.records.iter_mut().map(|r| r.runtime_seconds.take()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InternalConsistency(format!("report serialization: {e}")))
    }

    /// Flat per-record export.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["seed", "m", "d", "sigma", "mse_in_sample", "mse_oos", "emd_mse", "objective", "converged", "error"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.seed.to_string(),
                r.m.to_string(),
                r.d.to_string(),
                r.sigma.to_string(),
                opt(r.mse_in_sample),
                opt(r.mse_oos),
                opt(r.emd_mse),
                opt(r.objective),
                r.converged.map(|c| c.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Dataset(format!("writing records: {e}")))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Dataset(format!("writing records: {e}"))
}

/// Aggregates successful records per `(d, m, sigma)`; `records` must be sorted.
pub fn aggregate(records: &[RunRecord]) -> Vec<CellAggregate> {
    let mut cells: Vec<CellAggregate> = Vec::new();
    let mut keys: Vec<(usize, usize, f64)> = records.iter().map(|r| (r.d, r.m, r.sigma)).collect();
    keys.sort_by(|a, b| a.partial_cmp(b).expect("finite sigma"));
    keys.dedup();
    for (d, m, sigma) in keys {
        let cell: Vec<&RunRecord> = records.iter().filter(|r| r.d == d && r.m == m && r.sigma == sigma).collect();
        let ok: Vec<&&RunRecord> = cell.iter().filter(|r| r.error.is_none()).collect();
        let collect = |f: fn(&RunRecord) -> Option<f64>| Summary::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        cells.push(CellAggregate {
            d,
            m,
            sigma,
            runs: cell.len(),
            failed: cell.len() - ok.len(),
            mse_in_sample: collect(|r| r.mse_in_sample),
            mse_oos: collect(|r| r.mse_oos),
            emd_mse: collect(|r| r.emd_mse),
        });
    }
    cells
}

/// SplitMix64 finalizer over the base seed and a path of indices.
pub(crate) fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidConfig("a slope needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::NumericalFailure {
            message: "log-log fit needs positive values".into(),
            trace: None,
        });
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

/// Mean squared Euclidean error between matched rows.
pub(crate) fn mean_squared_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let total: f64 = a.iter().zip(b).map(|(x, y)| crate::samples::squared_distance(x, y)).sum();
    total / a.len() as f64
}
