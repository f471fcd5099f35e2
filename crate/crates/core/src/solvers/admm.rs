//! ADMM for the consensus form
//!
//! ```text
//! min  <C, alpha> + penalties(alpha)
//! s.t. alpha = G1 beta^T / m,  alpha = gamma G2 / n,
//!      alpha on the simplex, beta >= 0, gamma >= 0
//! ```
//!
//! with scaled duals `D1`, `D2`. The `alpha` step reuses the Frank-Wolfe
//! engine; the `beta` and `gamma` steps are nonnegative least squares solved
//! by projected gradient with step `1/L`.

use nalgebra::DMatrix;

use super::{check_problem, marginal_metric, penalized_objective, project_round_off, PlanCoefficients, SimplexQuadratic, SolveTrace, SolverConfig};
use crate::embeddings::CostMatrix;
use crate::kernels::GramMatrix;
use crate::linalg::{frobenius_diff, largest_eigenvalue};
use crate::{Error, Result};

/// `(|alpha - G1 beta^T / m|_F, |alpha - gamma G2 / n|_F)`.
pub fn consensus_residuals(plan: &PlanCoefficients, g1: &GramMatrix, g2: &GramMatrix) -> Option<(f64, f64)> {
    let beta = plan.beta.as_ref()?;
    let gamma = plan.gamma.as_ref()?;
    let (m, n) = plan.alpha.shape();
    let via_beta = g1.entries() * beta.transpose() / m as f64;
    let via_gamma = gamma * g2.entries() / n as f64;
    Some((frobenius_diff(&plan.alpha, &via_beta), frobenius_diff(&plan.alpha, &via_gamma)))
}

/// Projected gradient for `min_{X >= 0} |R - G X / s|_F^2` (left multiply).
fn nnls_left(g: &DMatrix<f64>, scale: f64, lmax: f64, target: &DMatrix<f64>, x: &mut DMatrix<f64>, iters: usize) {
    if lmax <= 0.0 {
        return;
    }
    // step 1/L with L = 2 lmax^2 / s^2 on the gradient -(2/s) G (R - G X / s)
    let step = scale / (lmax * lmax);
    for _ in 0..iters {
        let resid = target - g * &*x / scale;
        let update = g * resid * step;
        let mut moved = 0.0f64;
        for (xv, u) in x.iter_mut().zip(update.iter()) {
            let next = (*xv + u).max(0.0);
            moved = moved.max((next - *xv).abs());
            *xv = next;
        }
        if moved == 0.0 {
            break;
        }
    }
}

/// Projected gradient for `min_{X >= 0} |R - X G / s|_F^2` (right multiply).
fn nnls_right(g: &DMatrix<f64>, scale: f64, lmax: f64, target: &DMatrix<f64>, x: &mut DMatrix<f64>, iters: usize) {
    if lmax <= 0.0 {
        return;
    }
    let step = scale / (lmax * lmax);
    for _ in 0..iters {
        let resid = target - &*x * g / scale;
        let update = resid * g * step;
        let mut moved = 0.0f64;
        for (xv, u) in x.iter_mut().zip(update.iter()) {
            let next = (*xv + u).max(0.0);
            moved = moved.max((next - *xv).abs());
            *xv = next;
        }
        if moved == 0.0 {
            break;
        }
    }
}

/// Solves the consensus form by ADMM with fixed penalty `rho_admm`.
///
/// Running out of outer iterations is not an error: the trace reports
/// `converged = false`.
pub fn solve_admm(c: &CostMatrix, g1: &GramMatrix, g2: &GramMatrix, cfg: &SolverConfig) -> Result<(PlanCoefficients, SolveTrace)> {
    check_problem(c, g1, g2, cfg)?;
    let (m, n) = (c.nrows(), c.ncols());
    let (mf, nf) = (m as f64, n as f64);
    let rho = cfg.rho_admm;
    let row_metric = marginal_metric(g1, cfg.lambda1, cfg.nu1);
    let col_metric = marginal_metric(g2, cfg.lambda2, cfg.nu2);
    let l1 = largest_eigenvalue(g1.entries());
    let l2 = largest_eigenvalue(g2.entries());
    let g1m = g1.entries();
    let g2m = g2.entries();

    let mut alpha = DMatrix::from_element(m, n, 1.0 / (m * n) as f64);
    // beta is stored transposed (m x n) so both consensus maps act on m x n.
    let mut beta_t = DMatrix::<f64>::zeros(m, n);
    let mut gamma = DMatrix::<f64>::zeros(m, n);
    let mut d1 = DMatrix::<f64>::zeros(m, n);
    let mut d2 = DMatrix::<f64>::zeros(m, n);
    let mut trace = SolveTrace::default();

    for k in 0..cfg.max_outer_iters {
        // alpha: rho |alpha + (D1 + D2 + C/rho - gamma G2/n - G1 beta^T/m)/2|^2 + penalties,
        // i.e. linear term C + rho (D1 + D2 - gamma G2/n - G1 beta^T/m) plus rho |alpha|^2.
        let via_beta = g1m * &beta_t / mf;
        let via_gamma = &gamma * g2m / nf;
        let linear = c.entries() + (&d1 + &d2 - &via_gamma - &via_beta) * rho;
        let sub = SimplexQuadratic { linear: &linear, prox: rho, row_metric: &row_metric, col_metric: &col_metric };
        let (next, _) = sub.minimize(alpha, cfg.max_inner_iters, cfg.tol_gap, cfg.fw_variant).map_err(|e| match e {
            Error::NumericalFailure { message, .. } => Error::NumericalFailure {
                message: format!("alpha step {k}: {message}"),
                trace: Some(Box::new(trace.clone())),
            },
            other => other,
        })?;
        alpha = next;

        let target_beta = &alpha + &d1;
        nnls_left(g1m, mf, l1, &target_beta, &mut beta_t, cfg.max_inner_iters);
        let target_gamma = &alpha + &d2;
        nnls_right(g2m, nf, l2, &target_gamma, &mut gamma, cfg.max_inner_iters);

        let gap_beta = &alpha - g1m * &beta_t / mf;
        let gap_gamma = &alpha - &gamma * g2m / nf;
        d1 += &gap_beta;
        d2 += &gap_gamma;

        let res = gap_beta.norm().max(gap_gamma.norm());
        let objective = penalized_objective(&alpha, c, g1, g2, cfg)?;
        if !objective.is_finite() || !res.is_finite() {
            return Err(Error::NumericalFailure {
                message: format!("non-finite iterate at ADMM step {k}"),
                trace: Some(Box::new(trace)),
            });
        }
        trace.push(objective, res);
        if res <= cfg.tol_residual {
            trace.converged = true;
            break;
        }
    }

    project_round_off(&mut alpha)?;
    Ok((
        PlanCoefficients { alpha, beta: Some(beta_t.transpose()), gamma: Some(gamma) },
        trace,
    ))
}
