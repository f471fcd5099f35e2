use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{derive_seed, mean_squared_error, ExperimentReport, RunRecord, SolverMethod};
use crate::embeddings::CostMatrix;
use crate::kernels::{gram_with, KernelSpec};
use crate::linalg::{sym_inv_sqrt, sym_sqrt};
use crate::solvers::{solve_emd_exact, SolverConfig, EMD_MAX_CELLS};
use crate::transport_map::{map_points, BetaDerivation, MapCost, MapMethod, TransportMapModel};
use crate::{Error, Execution, Result, SampleSet};

/// Eigenvalues of `cov1` at or below this are treated as zero when
/// inverting its square root.
const COV_FLOOR: f64 = 1e-12;

/// Two Gaussians with unit-trace covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPair {
    pub mean1: DVector<f64>,
    pub mean2: DVector<f64>,
    pub cov1: DMatrix<f64>,
    pub cov2: DMatrix<f64>,
}

impl GaussianPair {
    pub fn dim(&self) -> usize {
        self.mean1.len()
    }
}

fn unit_trace_covariance(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let v = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>());
    let s = &v * v.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let tr = s.trace();
    s / tr
}

/// Zero means and covariances `V V^T / |V|_F^2` with `V` uniform on `[0, 1)`.
pub fn make_gaussian_pair(d: usize, seed: u64) -> Result<GaussianPair> {
    if d == 0 {
        return Err(Error::InvalidConfig("dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov1 = unit_trace_covariance(&mut rng, d);
    let cov2 = unit_trace_covariance(&mut rng, d);
    Ok(GaussianPair { mean1: DVector::zeros(d), mean2: DVector::zeros(d), cov1, cov2 })
}

/// `A = S1^{-1/2} (S1^{1/2} S2 S1^{1/2})^{1/2} S1^{-1/2}`, the linear part of
/// the optimal map between the pair.
pub fn gaussian_transport_matrix(pair: &GaussianPair) -> DMatrix<f64> {
    let root1 = sym_sqrt(&pair.cov1);
    let inv_root1 = sym_inv_sqrt(&pair.cov1, COV_FLOOR);
    let middle = sym_sqrt(&(&root1 * &pair.cov2 * &root1));
    let a = &inv_root1 * middle * &inv_root1;
    (&a + a.transpose()) * 0.5
}

/// `T(x) = m2 + A (x - m1)`.
pub fn gaussian_ground_truth_map(pair: &GaussianPair, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != pair.dim() {
        return Err(Error::InputShape(format!("point has dimension {} but the pair has {}", x.len(), pair.dim())));
    }
    Ok(apply_affine(&gaussian_transport_matrix(pair), pair, x))
}

fn apply_affine(a: &DMatrix<f64>, pair: &GaussianPair, x: &[f64]) -> Vec<f64> {
    let centered = DVector::from_column_slice(x) - &pair.mean1;
    (&pair.mean2 + a * centered).as_slice().to_vec()
}

/// Draws `count` points from `N(mean, cov)` through the eigen factor
/// `Q diag(sqrt(max(l, 0)))`.
pub fn sample_gaussian<R: Rng>(mean: &DVector<f64>, cov: &DMatrix<f64>, count: usize, rng: &mut R) -> Result<SampleSet> {
    let d = mean.len();
    if cov.shape() != (d, d) {
        return Err(Error::InputShape(format!("covariance is {}x{} for a mean of length {d}", cov.nrows(), cov.ncols())));
    }
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        data.extend((mean + &factor * z).iter());
    }
    SampleSet::from_flat(data, count, d)
}

/// Discrete barycentric projection `x_i -> sum_j pi_ij y_j / sum_j pi_ij`.
pub fn emd_barycentric_map(plan: &DMatrix<f64>, targets: &SampleSet) -> Vec<Vec<f64>> {
    (0..plan.nrows())
        .map(|i| {
            let mass: f64 = plan.row(i).sum();
            let mut y = vec![0.0; targets.dim()];
            for (j, t) in targets.rows().enumerate() {
                let w = plan[(i, j)] / mass;
                if w != 0.0 {
                    for (a, b) in y.iter_mut().zip(t) {
                        *a += w * b;
                    }
                }
            }
            y
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianExperimentOptions {
    pub d: usize,
    pub m_values: Vec<usize>,
    /// Every bandwidth is evaluated on the same samples.
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    pub cfg: SolverConfig,
    pub oos_count: usize,
    /// Repeat `r` uses the pair drawn with seed `seed + r`.
    pub seed: u64,
    pub solver: SolverMethod,
    /// Used when the solver returns no `beta`.
    pub beta: BetaDerivation,
    pub exec: Execution,
}

impl Default for GaussianExperimentOptions {
    fn default() -> Self {
        Self {
            d: 2,
            m_values: vec![20, 50, 100],
            sigmas: vec![1.0],
            repeats: 5,
            cfg: SolverConfig::default(),
            oos_count: 200,
            seed: 0,
            solver: SolverMethod::Fw,
            beta: BetaDerivation::default(),
            exec: Execution::default(),
        }
    }
}

impl GaussianExperimentOptions {
    fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        if self.d == 0 || self.repeats == 0 || self.m_values.is_empty() || self.sigmas.is_empty() {
            return Err(Error::InvalidConfig("dimension, repeats, m values and sigmas must be non-empty".into()));
        }
        if self.m_values.contains(&0) {
            return Err(Error::InvalidConfig("sample sizes must be positive".into()));
        }
        for &s in &self.sigmas {
            KernelSpec::gaussian(s)?;
        }
        Ok(())
    }
}

/// Evaluates the proposed map and the EMD baseline against the closed-form
/// Gaussian map. The target sample size equals the source sample size.
pub fn run_gaussian_experiment(opts: &GaussianExperimentOptions) -> Result<ExperimentReport> {
    opts.validate()?;
    let cells: Vec<(usize, usize)> = (0..opts.repeats).flat_map(|r| opts.m_values.iter().map(move |&m| (r, m))).collect();
    let records = opts.exec.map_indexed(cells.len(), |k| {
        let (r, m) = cells[k];
        gaussian_cell(opts, opts.seed.wrapping_add(r as u64), m)
    });
    Ok(ExperimentReport::from_records("gaussian", opts.solver, opts.cfg.clone(), records.into_iter().flatten().collect()))
}

fn gaussian_cell(opts: &GaussianExperimentOptions, seed: u64, m: usize) -> Vec<RunRecord> {
    let start = Instant::now();
    let d = opts.d;
    let fail = |msg: String| {
        opts.sigmas
            .iter()
            .map(|&s| RunRecord { error: Some(msg.clone()), ..RunRecord::new(seed, m, d, s) })
            .collect::<Vec<_>>()
    };
    let pair = match make_gaussian_pair(d, seed) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let a = gaussian_transport_matrix(&pair);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m as u64]));
    let draws = sample_gaussian(&pair.mean1, &pair.cov1, m, &mut rng).and_then(|xs| {
        let ys = sample_gaussian(&pair.mean2, &pair.cov2, m, &mut rng)?;
        let oos = sample_gaussian(&pair.mean1, &pair.cov1, opts.oos_count, &mut rng)?;
        let c = CostMatrix::squared_euclidean(&xs, &ys)?;
        Ok((xs, ys, oos, c))
    });
    let (xs, ys, oos, c) = match draws {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let truth: Vec<Vec<f64>> = xs.rows().map(|x| apply_affine(&a, &pair, x)).collect();
    let truth_oos: Vec<Vec<f64>> = oos.rows().map(|x| apply_affine(&a, &pair, x)).collect();

    let emd_mse = if m * m <= EMD_MAX_CELLS {
        solve_emd_exact(&c).ok().map(|s| mean_squared_error(&emd_barycentric_map(&s.coupling, &ys), &truth))
    } else {
        None
    };
    let shared = start.elapsed().as_secs_f64();

    opts.sigmas
        .iter()
        .map(|&sigma| {
            let t0 = Instant::now();
            let mut rec = RunRecord::new(seed, m, d, sigma);
            rec.emd_mse = emd_mse;
            if let Err(e) = proposed_map(opts, sigma, &xs, &ys, &oos, &c, &truth, &truth_oos, &mut rec) {
                rec.error = Some(e.to_string());
            }
            rec.runtime_seconds = Some(shared + t0.elapsed().as_secs_f64());
            rec
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn proposed_map(
    opts: &GaussianExperimentOptions,
    sigma: f64,
    xs: &SampleSet,
    ys: &SampleSet,
    oos: &SampleSet,
    c: &CostMatrix,
    truth: &[Vec<f64>],
    truth_oos: &[Vec<f64>],
    rec: &mut RunRecord,
) -> Result<()> {
    let kernel = KernelSpec::gaussian(sigma)?;
    let g1 = gram_with(&kernel, xs, xs, Execution::Sequential)?;
    let g2 = gram_with(&kernel, ys, ys, Execution::Sequential)?;
    rec.gram_condition = g1.condition_number().zip(g2.condition_number()).map(|(a, b)| [a, b]);
    let (plan, trace) = opts.solver.solve(c, &g1, &g2, &opts.cfg)?;
    rec.objective = trace.final_objective();
    rec.converged = Some(trace.converged);
    rec.iters_used = Some(trace.iters_used);
    let model = TransportMapModel::from_plan(&plan, &g1, xs.clone(), ys.clone(), kernel, MapCost::SquaredEuclidean, opts.beta)?;
    let mapped: Vec<Vec<f64>> = map_points(&model, xs, &MapMethod::ClosedForm, Execution::Sequential)?
        .into_iter()
        .map(|p| p.point)
        .collect();
    rec.mse_in_sample = Some(mean_squared_error(&mapped, truth));
    if !oos.is_empty() {
        let mapped_oos: Vec<Vec<f64>> = map_points(&model, oos, &MapMethod::ClosedForm, Execution::Sequential)?
            .into_iter()
            .map(|p| p.point)
            .collect();
        rec.mse_oos = Some(mean_squared_error(&mapped_oos, truth_oos));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_diff;
    use proptest::prelude::*;

    #[test]
    fn pair_is_unit_trace_and_symmetric() {
        for d in [1, 2, 7, 30] {
            let p = make_gaussian_pair(d, 3).unwrap();
            for cov in [&p.cov1, &p.cov2] {
                assert!((cov.trace() - 1.0).abs() <= 1e-10);
                assert!(frobenius_diff(cov, &cov.transpose()) <= 1e-12);
                assert!(SymmetricEigen::new(cov.clone()).eigenvalues.min() >= -1e-10);
            }
            assert!(p.mean1.iter().chain(p.mean2.iter()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_dimensional_pair_is_unit() {
        let p = make_gaussian_pair(1, 9).unwrap();
        assert!((p.cov1[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((p.cov2[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_pair() {
        assert_eq!(make_gaussian_pair(5, 42).unwrap(), make_gaussian_pair(5, 42).unwrap());
        assert_ne!(make_gaussian_pair(5, 42).unwrap(), make_gaussian_pair(5, 43).unwrap());
    }

    #[test]
    fn equal_covariances_give_shifted_identity() {
        let mut p = make_gaussian_pair(3, 1).unwrap();
        p.cov2 = p.cov1.clone();
        p.mean1 = DVector::from_column_slice(&[1.0, 0.0, -1.0]);
        p.mean2 = DVector::from_column_slice(&[0.5, 0.5, 0.5]);
        let a = gaussian_transport_matrix(&p);
        assert!(frobenius_diff(&a, &DMatrix::identity(3, 3)) < 1e-6);
        let y = gaussian_ground_truth_map(&p, &[2.0, 1.0, 0.0]).unwrap();
        for (v, e) in y.iter().zip([1.5, 1.5, 1.5]) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_ratio() {
        let p = GaussianPair {
            mean1: DVector::zeros(1),
            mean2: DVector::zeros(1),
            cov1: DMatrix::from_element(1, 1, 4.0),
            cov2: DMatrix::from_element(1, 1, 9.0),
        };
        assert!((gaussian_transport_matrix(&p)[(0, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn push_forward_identity() {
        let p = make_gaussian_pair(2, 17).unwrap();
        let a = gaussian_transport_matrix(&p);
        assert!(frobenius_diff(&(&a * &p.cov1 * a.transpose()), &p.cov2) <= 1e-8);
    }

    #[test]
    fn empirical_covariance_matches() {
        let p = make_gaussian_pair(4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_gaussian(&p.mean1, &p.cov1, 100_000, &mut rng).unwrap();
        let x = s.to_matrix();
        let emp = x.transpose() * &x / s.len() as f64;
        assert!(frobenius_diff(&emp, &p.cov1) <= 0.05 * p.cov1.norm());
    }

    #[test]
    fn emd_map_of_a_permutation_returns_the_match() {
        let ys = SampleSet::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let plan = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
        assert_eq!(emd_barycentric_map(&plan, &ys), vec![vec![10.0], vec![0.0]]);
    }

    #[test]
    fn one_dimensional_smoke() {
        let opts = GaussianExperimentOptions {
            d: 1,
            m_values: vec![50],
            repeats: 1,
            oos_count: 20,
            ..GaussianExperimentOptions::default()
        };
        let report = run_gaussian_experiment(&opts).unwrap();
        let rec = &report.records[0];
        assert!(rec.error.is_none(), "{:?}", rec.error);
        assert!(rec.mse_in_sample.unwrap() <= 0.5, "{:?}", rec.mse_in_sample);
        assert!(rec.emd_mse.is_some() && rec.mse_oos.is_some());
    }

    #[test]
    fn deterministic_across_execution() {
        let base = GaussianExperimentOptions {
            d: 3,
            m_values: vec![8, 12],
            sigmas: vec![1.0, 2.0],
            repeats: 2,
            oos_count: 5,
            ..GaussianExperimentOptions::default()
        };
        let mut a = run_gaussian_experiment(&GaussianExperimentOptions { exec: Execution::Sequential, ..base.clone() }).unwrap();
        let mut b = run_gaussian_experiment(&GaussianExperimentOptions { exec: Execution::Parallel, ..base }).unwrap();
        a.take_runtimes();
        b.take_runtimes();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn push_forward_on_random_pairs(d in 1usize..12, seed in any::<u64>()) {
            let p = make_gaussian_pair(d, seed).unwrap();
            let a = gaussian_transport_matrix(&p);
            prop_assert!(frobenius_diff(&(&a * &p.cov1 * a.transpose()), &p.cov2) <= 1e-8);
        }
    }
}
