//! Solvers for the coefficient-space transport program.
//!
//! * [`solve_simplified`] minimizes the penalized objective over the joint
//!   simplex with Frank-Wolfe.
//! * [`solve_admm`] solves the consensus form, where the plan coefficients
//!   `alpha` must also equal `G1 beta^T / m` and `gamma G2 / n` with
//!   nonnegative `beta`, `gamma`.
//! * [`solve_emd_exact`] is the exact discrete OT baseline.
//!
//! The ball-constrained program is only available through its penalized
//! form: the weights `lambda1, lambda2` penalize the marginal residuals in the
//! gram metrics and `nu1, nu2` in the element-wise squared gram metrics.

mod admm;
mod emd;
mod frank_wolfe;

pub use admm::{consensus_residuals, solve_admm};
pub use emd::{solve_emd_exact, EmdSolution, EMD_MAX_CELLS};
pub use frank_wolfe::solve_simplified;
pub(crate) use frank_wolfe::SimplexQuadratic;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embeddings::{marginal_residuals, CostMatrix};
use crate::kernels::GramMatrix;
use crate::{Error, Result};

/// Coefficients of the plan embedding and the two conditional embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanCoefficients {
    /// `m x n`, on the joint simplex.
    pub alpha: DMatrix<f64>,
    /// `n x m`, nonnegative.
    pub beta: Option<DMatrix<f64>>,
    /// `m x n`, nonnegative.
    pub gamma: Option<DMatrix<f64>>,
}

/// Frank-Wolfe step rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwVariant {
    /// Classic steps towards the minimizing vertex only.
    Vanilla,
    /// Adds steps away from the worst vertex in the support.
    AwayStep,
    /// Moves mass directly from the worst support vertex to the minimizing
    /// vertex, then tries a marginal-preserving 2x2 exchange through it.
    #[default]
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub nu1: f64,
    pub nu2: f64,
    /// ADMM penalty.
    pub rho_admm: f64,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    /// Frank-Wolfe duality gap at which to stop.
    pub tol_gap: f64,
    /// ADMM primal residual at which to stop.
    pub tol_residual: f64,
    #[serde(default)]
    pub fw_variant: FwVariant,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 10.0,
            nu1: 10.0,
            nu2: 10.0,
            rho_admm: 100.0,
            max_outer_iters: 5_000,
            max_inner_iters: 200,
            tol_gap: 1e-6,
            tol_residual: 1e-4,
            fw_variant: FwVariant::Pairwise,
            seed: 0,
        }
    }
}

impl SolverConfig {
    /// All four regularization weights set to `w`.
    pub fn with_weights(w: f64) -> Self {
        Self { lambda1: w, lambda2: w, nu1: w, nu2: w, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("nu1", self.nu1),
            ("nu2", self.nu2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative and finite, got {v}")));
            }
        }
        for (name, v) in [
            ("rho_admm", self.rho_admm),
            ("tol_gap", self.tol_gap),
            ("tol_residual", self.tol_residual),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(Error::InvalidConfig("iteration budgets must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration diagnostics of a solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub objective_per_iter: Vec<f64>,
    /// Duality gap for Frank-Wolfe, max primal residual for ADMM.
    pub gap_or_residual_per_iter: Vec<f64>,
    pub iters_used: usize,
    pub converged: bool,
}

impl SolveTrace {
    pub(crate) fn push(&mut self, objective: f64, gap: f64) {
        self.objective_per_iter.push(objective);
        self.gap_or_residual_per_iter.push(gap);
        self.iters_used += 1;
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_per_iter.last().copied()
    }

    pub fn final_gap_or_residual(&self) -> Option<f64> {
        self.gap_or_residual_per_iter.last().copied()
    }
}

/// `tr(alpha C^T)`.
pub fn transport_cost(alpha: &DMatrix<f64>, c: &CostMatrix) -> f64 {
    alpha.dot(c.entries())
}

/// The penalized objective: transport cost plus the four weighted marginal
/// residual norms.
pub fn penalized_objective(alpha: &DMatrix<f64>, c: &CostMatrix, g1: &GramMatrix, g2: &GramMatrix, cfg: &SolverConfig) -> Result<f64> {
    if alpha.shape() != c.entries().shape() {
        return Err(Error::InputShape("coupling and cost shapes differ".into()));
    }
    let r = marginal_residuals(alpha, g1, g2)?;
    Ok(transport_cost(alpha, c)
        + cfg.lambda1 * r.r1_g
        + cfg.lambda2 * r.r2_g
        + cfg.nu1 * r.r1_gg
        + cfg.nu2 * r.r2_gg)
}

pub(crate) fn check_problem(c: &CostMatrix, g1: &GramMatrix, g2: &GramMatrix, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    let (m, n) = (c.nrows(), c.ncols());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("cost matrix is empty"));
    }
    if g1.nrows() != m || g1.ncols() != m || g2.nrows() != n || g2.ncols() != n {
        return Err(Error::InputShape(format!(
            "cost is {m}x{n} but grams are {}x{} and {}x{}",
            g1.nrows(),
            g1.ncols(),
            g2.nrows(),
            g2.ncols()
        )));
    }
    Ok(())
}

/// `lambda G + nu G ⊙ G`
pub(crate) fn marginal_metric(g: &GramMatrix, lambda: f64, nu: f64) -> DMatrix<f64> {
    g.entries() * lambda + g.hadamard_square() * nu
}

/// Clamps round-off negatives and rescales onto the simplex.
pub(crate) fn project_round_off(alpha: &mut DMatrix<f64>) -> Result<()> {
    if let Some(v) = alpha.iter().copied().find(|&v| v < -1e-12 || !v.is_finite()) {
        return Err(Error::InternalConsistency(format!("coupling entry {v} left the simplex")));
    }
    alpha.apply(|v| *v = v.max(0.0));
    let s = alpha.sum();
    if !(s > 0.0) {
        return Err(Error::InternalConsistency("coupling has no mass".into()));
    }
    *alpha /= s;
    Ok(())
}
