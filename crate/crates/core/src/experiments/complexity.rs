use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, log_log_slope, ExperimentReport, RunRecord, SlopeStudy, SolverMethod};
use super::gaussian::{make_gaussian_pair, sample_gaussian};
use crate::embeddings::CostMatrix;
use crate::kernels::{gram_with, KernelSpec};
use crate::solvers::{penalized_objective, SolverConfig};
use crate::{Error, Execution, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleComplexityOptions {
    pub dims: Vec<usize>,
    /// Strictly increasing.
    pub m_values: Vec<usize>,
    pub sigma: f64,
    pub cfg: SolverConfig,
    pub seed: u64,
    /// The reference solve uses `ref_multiplier * max(m_values)` samples.
    pub ref_multiplier: usize,
    /// Independent draws per sample size; their errors are averaged.
    pub repeats: usize,
    pub solver: SolverMethod,
    pub exec: Execution,
}

impl Default for SampleComplexityOptions {
    fn default() -> Self {
        Self {
            dims: vec![5, 20],
            m_values: vec![25, 50, 100, 200],
            sigma: 1.0,
            cfg: SolverConfig::default(),
            seed: 0,
            ref_multiplier: 8,
            repeats: 1,
            solver: SolverMethod::Fw,
            exec: Execution::default(),
        }
    }
}

impl SampleComplexityOptions {
    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        KernelSpec::gaussian(self.sigma)?;
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if self.m_values.len() < 2 || self.m_values[0] == 0 || self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("m values must be positive, strictly increasing and at least two".into()));
        }
        if self.ref_multiplier < 8 {
            return Err(Error::InvalidConfig(format!("ref_multiplier must be at least 8, got {}", self.ref_multiplier)));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be positive".into()));
        }
        Ok(())
    }

    fn reference_m(&self) -> usize {
        self.ref_multiplier * self.m_values.last().copied().unwrap_or(0)
    }
}

/// Minimized objective on `m` source and `m` target draws.
fn objective_at(opts: &SampleComplexityOptions, d: usize, m: usize, repeat: usize) -> RunRecord {
    let start = Instant::now();
    let mut rec = RunRecord::new(opts.seed.wrapping_add(repeat as u64), m, d, opts.sigma);
    let run = || -> Result<(f64, bool, usize)> {
        let pair = make_gaussian_pair(d, opts.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[d as u64, m as u64, repeat as u64]));
        let xs = sample_gaussian(&pair.mean1, &pair.cov1, m, &mut rng)?;
        let ys = sample_gaussian(&pair.mean2, &pair.cov2, m, &mut rng)?;
        let kernel = KernelSpec::gaussian(opts.sigma)?;
        let g1 = gram_with(&kernel, &xs, &xs, Execution::Sequential)?;
        let g2 = gram_with(&kernel, &ys, &ys, Execution::Sequential)?;
        let c = CostMatrix::squared_euclidean(&xs, &ys)?;
        let (plan, trace) = opts.solver.solve(&c, &g1, &g2, &opts.cfg)?;
        let f = penalized_objective(&plan.alpha, &c, &g1, &g2, &opts.cfg)?;
        Ok((f, trace.converged, trace.iters_used))
    };
    match run() {
        Ok((f, conv, iters)) => {
            rec.objective = Some(f);
            rec.converged = Some(conv);
            rec.iters_used = Some(iters);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.runtime_seconds = Some(start.elapsed().as_secs_f64());
    rec
}

/// Fits the log-log slope of `|g(m) - g(m_ref)|` against `m` per dimension,
/// where `g` is the minimized penalized objective. All dimensions share the
/// pair seed, the kernel and the solver settings.
pub fn run_sample_complexity_study(opts: &SampleComplexityOptions) -> Result<ExperimentReport> {
    opts.validate()?;
    let m_ref = opts.reference_m();
    // The reference solves are the most expensive cells, so they go first.
    let mut cells: Vec<(usize, usize, usize)> = opts.dims.iter().map(|&d| (d, m_ref, 0)).collect();
    for &d in &opts.dims {
        for &m in &opts.m_values {
            for r in 0..opts.repeats {
                cells.push((d, m, r));
            }
        }
    }
    let records = opts.exec.map_indexed(cells.len(), |k| {
        let (d, m, r) = cells[k];
        objective_at(opts, d, m, r)
    });

    let mut slopes = Vec::with_capacity(opts.dims.len());
    for &d in &opts.dims {
        let find = |m: usize, r: usize| -> Result<f64> {
            let rec = records
                .iter()
                .zip(&cells)
                .find(|(_, &(cd, cm, cr))| cd == d && cm == m && cr == r)
                .map(|(rec, _)| rec)
                .expect("cell exists");
            match (&rec.error, rec.objective) {
                (None, Some(f)) => Ok(f),
                (err, _) => Err(Error::NumericalFailure {
                    message: format!("solve at d={d}, m={m} failed: {}", err.clone().unwrap_or_default()),
                    trace: None,
                }),
            }
        };
        let reference = find(m_ref, 0)?;
        let mut objectives = Vec::with_capacity(opts.m_values.len());
        let mut errors = Vec::with_capacity(opts.m_values.len());
        for &m in &opts.m_values {
            let fs = (0..opts.repeats).map(|r| find(m, r)).collect::<Result<Vec<f64>>>()?;
            let k = fs.len() as f64;
            objectives.push(fs.iter().sum::<f64>() / k);
            errors.push(fs.iter().map(|f| (f - reference).abs()).sum::<f64>() / k);
        }
        let ms: Vec<f64> = opts.m_values.iter().map(|&m| m as f64).collect();
        let fitted_slope = log_log_slope(&ms, &errors)?;
        slopes.push(SlopeStudy {
            d,
            m_values: opts.m_values.clone(),
            errors,
            objectives,
            reference_m: m_ref,
            reference_objective: reference,
            fitted_slope,
        });
    }
    let mut report = ExperimentReport::from_records("sample_complexity", opts.solver, opts.cfg.clone(), records);
    report.aggregates.clear();
    report.slopes = slopes;
    Ok(report)
}
