//! Frank-Wolfe over the joint simplex `{alpha >= 0, sum(alpha) = 1}`.
//!
//! The objectives handled here are
//!
//! ```text
//! f(alpha) = <L, alpha> + prox |alpha|_F^2 + r1^T M1 r1 + r2^T M2 r2
//! r1 = alpha 1 - 1/m,  r2 = alpha^T 1 - 1/n
//! ```
//!
//! with PSD `M1`, `M2`. Restricted to a line `alpha + t d` this is a scalar
//! quadratic, so every step uses the exact minimizer clipped to the feasible
//! step range.

use nalgebra::{DMatrix, DVector};

use super::{check_problem, marginal_metric, project_round_off, FwVariant, PlanCoefficients, SolveTrace, SolverConfig};
use crate::embeddings::{residual_vectors, CostMatrix};
use crate::kernels::GramMatrix;
use crate::{Error, Result};

pub(crate) struct SimplexQuadratic<'a> {
    pub linear: &'a DMatrix<f64>,
    pub prox: f64,
    pub row_metric: &'a DMatrix<f64>,
    pub col_metric: &'a DMatrix<f64>,
}

const REFRESH: usize = 32;

/// Largest `(m + n) m n` for which each pairwise step is followed by a
/// Bellman-Ford cycle search; larger problems use the 2x2 exchange.
const CYCLE_BUDGET: usize = 20_000;

#[derive(Clone, Copy, PartialEq)]
enum StepKind {
    Toward,
    Away,
    Pairwise,
}

/// A line-search step; `d1`, `d2` are the changes of `r1`, `r2` per unit
/// step and `md1`, `md2` their images under the metrics.
struct Step {
    kind: StepKind,
    d1: DVector<f64>,
    md1: DVector<f64>,
    d2: DVector<f64>,
    md2: DVector<f64>,
    t_max: f64,
    t: f64,
    decrease: f64,
}

impl Step {
    #[allow(clippy::too_many_arguments)]
    fn new(kind: StepKind, d1: DVector<f64>, md1: DVector<f64>, d2: DVector<f64>, md2: DVector<f64>, prox_curv: f64, slope: f64, t_max: f64) -> Self {
        let curvature = prox_curv + d1.dot(&md1) + d2.dot(&md2);
        let t = if curvature <= 0.0 { t_max } else { (-slope / (2.0 * curvature)).clamp(0.0, t_max) };
        let decrease = -(slope * t + curvature * t * t);
        Self { kind, d1, md1, d2, md2, t_max, t, decrease }
    }
}

/// `<grad, alpha>`, `<L, alpha>` and `|alpha|_F^2`.
struct ScanSums {
    inner: f64,
    linear: f64,
    sq: f64,
}

#[derive(Clone, Copy)]
struct Vertex {
    i: usize,
    j: usize,
    grad: f64,
}

impl SimplexQuadratic<'_> {
    /// Runs at most `max_iters` iterations from `alpha` (which must lie on the
    /// simplex). Each recorded iterate contributes one trace entry.
    pub fn minimize(
        &self,
        mut alpha: DMatrix<f64>,
        max_iters: usize,
        tol_gap: f64,
        variant: FwVariant,
    ) -> Result<(DMatrix<f64>, SolveTrace)> {
        let (m, n) = alpha.shape();
        let row_ones = self.row_metric.column_sum();
        let col_ones = self.col_metric.column_sum();
        let mut trace = SolveTrace::default();

        let (mut r1, mut r2) = (DVector::zeros(m), DVector::zeros(n));
        let (mut mr1, mut mr2) = (DVector::zeros(m), DVector::zeros(n));
        for k in 0..max_iters {
            // Residuals are updated per step and recomputed now and then to
            // shed round-off.
            if k % REFRESH == 0 {
                (r1, r2) = residual_vectors(&alpha);
                mr1 = self.row_metric * &r1;
                mr2 = self.col_metric * &r2;
            }
            let (fw, away, scan) = self.scan(&alpha, &mr1, &mr2);
            let (inner, sq) = (scan.inner, scan.sq);
            let objective = scan.linear + self.prox * sq + r1.dot(&mr1) + r2.dot(&mr2);
            let fw_gap = (inner - fw.grad).max(0.0);
            if !objective.is_finite() || !fw_gap.is_finite() {
                return Err(Error::NumericalFailure {
                    message: format!("non-finite objective {objective} at iteration {k}"),
                    trace: Some(Box::new(trace)),
                });
            }
            trace.push(objective, fw_gap);
            if fw_gap <= tol_gap {
                trace.converged = true;
                break;
            }
            if k + 1 == max_iters {
                break;
            }

            let away_gap = away.grad - inner;
            let a_v = alpha[(away.i, away.j)];
            let toward = {
                let mut d1 = -r1.add_scalar(1.0 / m as f64);
                d1[fw.i] += 1.0;
                let md1 = self.row_metric.column(fw.i) - &mr1 - &row_ones / m as f64;
                let mut d2 = -r2.add_scalar(1.0 / n as f64);
                d2[fw.j] += 1.0;
                let md2 = self.col_metric.column(fw.j) - &mr2 - &col_ones / n as f64;
                let d_sq = sq - 2.0 * alpha[(fw.i, fw.j)] + 1.0;
                Step::new(StepKind::Toward, d1, md1, d2, md2, self.prox * d_sq.max(0.0), -fw_gap, 1.0)
            };
            let away_step = || {
                let mut d1 = r1.add_scalar(1.0 / m as f64);
                d1[away.i] -= 1.0;
                let md1 = &mr1 + &row_ones / m as f64 - self.row_metric.column(away.i);
                let mut d2 = r2.add_scalar(1.0 / n as f64);
                d2[away.j] -= 1.0;
                let md2 = &mr2 + &col_ones / n as f64 - self.col_metric.column(away.j);
                let d_sq = sq - 2.0 * a_v + 1.0;
                Step::new(StepKind::Away, d1, md1, d2, md2, self.prox * d_sq.max(0.0), -away_gap, a_v / (1.0 - a_v))
            };
            let mut pair_away = (away.i, away.j);
            let step = match variant {
                FwVariant::Vanilla => toward,
                FwVariant::AwayStep if away_gap > fw_gap && a_v < 1.0 => away_step(),
                FwVariant::AwayStep => toward,
                FwVariant::Pairwise => {
                    // Mass moves from the worst support vertex to the best
                    // one, unless a plain step decreases the objective more.
                    let away = self.best_partner(&alpha, &fw, &mr1, &mr2);
                    let a_v = alpha[(away.i, away.j)];
                    let mut d1 = DVector::zeros(m);
                    d1[fw.i] += 1.0;
                    d1[away.i] -= 1.0;
                    let md1 = self.row_metric.column(fw.i) - self.row_metric.column(away.i);
                    let mut d2 = DVector::zeros(n);
                    d2[fw.j] += 1.0;
                    d2[away.j] -= 1.0;
                    let md2 = self.col_metric.column(fw.j) - self.col_metric.column(away.j);
                    let pair = Step::new(StepKind::Pairwise, d1, md1, d2, md2, 2.0 * self.prox, fw.grad - away.grad, a_v);
                    pair_away = (away.i, away.j);
                    if pair.decrease >= toward.decrease {
                        pair
                    } else {
                        toward
                    }
                }
            };

            let t = step.t;
            r1.axpy(t, &step.d1, 1.0);
            mr1.axpy(t, &step.md1, 1.0);
            r2.axpy(t, &step.d2, 1.0);
            mr2.axpy(t, &step.md2, 1.0);
            match step.kind {
                StepKind::Toward => {
                    alpha *= 1.0 - t;
                    alpha[(fw.i, fw.j)] += t;
                }
                StepKind::Away => {
                    alpha *= 1.0 + t;
                    if t >= step.t_max {
                        alpha[(away.i, away.j)] = 0.0;
                    } else {
                        alpha[(away.i, away.j)] -= t;
                    }
                }
                StepKind::Pairwise => {
                    alpha[(fw.i, fw.j)] += t;
                    if t >= step.t_max {
                        alpha[pair_away] = 0.0;
                    } else {
                        alpha[pair_away] -= t;
                    }
                    if (m + n) * m * n <= CYCLE_BUDGET {
                        self.cancel_cycle(&mut alpha);
                    } else {
                        self.swap_through(&mut alpha, fw.i, fw.j);
                    }
                }
            }
        }
        Ok((alpha, trace))
    }

    /// Support cell whose pairwise exchange with `fw` decreases the
    /// objective most.
    fn best_partner(&self, alpha: &DMatrix<f64>, fw: &Vertex, mr1: &DVector<f64>, mr2: &DVector<f64>) -> Vertex {
        let (m, n) = alpha.shape();
        let (r, c) = (self.row_metric, self.col_metric);
        let a = alpha.as_slice();
        let l = self.linear.as_slice();
        // Row and column parts of the exchange curvature.
        let row_curv: Vec<f64> = (0..m).map(|i| r[(fw.i, fw.i)] + r[(i, i)] - 2.0 * r[(fw.i, i)]).collect();
        let mut best = (f64::NEG_INFINITY, *fw);
        for j in 0..n {
            let col_curv = c[(fw.j, fw.j)] + c[(j, j)] - 2.0 * c[(fw.j, j)] + 2.0 * self.prox;
            let cj = 2.0 * mr2[j] - fw.grad;
            for i in 0..m {
                let idx = j * m + i;
                let av = a[idx];
                if av <= 0.0 {
                    continue;
                }
                // slope = fw.grad - g
                let neg_slope = l[idx] + 2.0 * self.prox * av + 2.0 * mr1[i] + cj;
                if neg_slope <= 0.0 || (i == fw.i && j == fw.j) {
                    continue;
                }
                let curv = row_curv[i] + col_curv;
                let t = if curv <= 0.0 { av } else { (neg_slope / (2.0 * curv)).min(av) };
                let dec = neg_slope * t - curv * t * t;
                if dec > best.0 {
                    best = (dec, Vertex { i, j, grad: neg_slope + fw.grad });
                }
            }
        }
        best.1
    }

    /// Finds one negative cycle of the residual transport graph by
    /// Bellman-Ford and moves mass around it. Marginals are unchanged.
    fn cancel_cycle(&self, alpha: &mut DMatrix<f64>) -> bool {
        let (m, n) = alpha.shape();
        let nodes = m + n;
        let l = self.linear;
        let w = |i: usize, j: usize, a: &DMatrix<f64>| l[(i, j)] + 2.0 * self.prox * a[(i, j)];
        let scale = l.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        let eps = 1e-12 * scale;
        let mut dist = vec![0.0f64; nodes];
        // pred[v] = (u, i, j): reached v from u through cell (i, j).
        let mut pred: Vec<Option<(usize, usize, usize)>> = vec![None; nodes];
        let mut last = None;
        for _ in 0..nodes {
            last = None;
            for i in 0..m {
                for j in 0..n {
                    let c = w(i, j, alpha);
                    if dist[i] + c < dist[m + j] - eps {
                        dist[m + j] = dist[i] + c;
                        pred[m + j] = Some((i, i, j));
                        last = Some(m + j);
                    }
                    if alpha[(i, j)] > 0.0 && dist[m + j] - c < dist[i] - eps {
                        dist[i] = dist[m + j] - c;
                        pred[i] = Some((m + j, i, j));
                        last = Some(i);
                    }
                }
            }
            if last.is_none() {
                return false;
            }
        }
        let Some(mut v) = last else { return false };
        for _ in 0..nodes {
            v = pred[v].expect("relaxed node has a predecessor").0;
        }
        // Walk the cycle once; row-to-column edges increase their cell.
        let mut cycle = Vec::new();
        let start = v;
        loop {
            let (u, i, j) = pred[v].expect("cycle node has a predecessor");
            cycle.push((i, j, u < m));
            v = u;
            if v == start {
                break;
            }
        }
        let slope: f64 = cycle.iter().map(|&(i, j, up)| if up { w(i, j, alpha) } else { -w(i, j, alpha) }).sum();
        if slope >= -eps {
            return false;
        }
        let t_max = cycle.iter().filter(|c| !c.2).map(|&(i, j, _)| alpha[(i, j)]).fold(f64::INFINITY, f64::min);
        let t = if self.prox > 0.0 { (-slope / (2.0 * self.prox * cycle.len() as f64)).min(t_max) } else { t_max };
        for &(i, j, up) in &cycle {
            if up {
                alpha[(i, j)] += t;
            } else {
                alpha[(i, j)] = if t >= alpha[(i, j)] { 0.0 } else { alpha[(i, j)] - t };
            }
        }
        true
    }

    /// Best marginal-preserving exchange `+(i,j) -(i,q) -(p,j) +(p,q)`
    /// through cell `(i, j)`. The penalties cancel along it, so only the
    /// linear and prox terms move.
    fn swap_through(&self, alpha: &mut DMatrix<f64>, i: usize, j: usize) {
        let (m, n) = alpha.shape();
        let l = self.linear;
        let mut best = (0.0, 0, 0);
        for q in (0..n).filter(|&q| q != j && alpha[(i, q)] > 0.0) {
            for p in (0..m).filter(|&p| p != i && alpha[(p, j)] > 0.0) {
                let slope = l[(i, j)] - l[(i, q)] - l[(p, j)] + l[(p, q)]
                    + 2.0 * self.prox * (alpha[(i, j)] - alpha[(i, q)] - alpha[(p, j)] + alpha[(p, q)]);
                if slope < best.0 {
                    best = (slope, p, q);
                }
            }
        }
        let (slope, p, q) = best;
        if slope >= 0.0 {
            return;
        }
        let t_max = alpha[(i, q)].min(alpha[(p, j)]);
        let t = if self.prox > 0.0 { (-slope / (8.0 * self.prox)).min(t_max) } else { t_max };
        alpha[(i, j)] += t;
        alpha[(p, q)] += t;
        alpha[(i, q)] = if t >= alpha[(i, q)] { 0.0 } else { alpha[(i, q)] - t };
        alpha[(p, j)] = if t >= alpha[(p, j)] { 0.0 } else { alpha[(p, j)] - t };
    }

    /// Minimal-gradient vertex, maximal-gradient vertex in the support, and
    /// the sums needing a full pass. Ties go to the lexicographically
    /// smallest `(i, j)`.
    fn scan(&self, alpha: &DMatrix<f64>, mr1: &DVector<f64>, mr2: &DVector<f64>) -> (Vertex, Vertex, ScanSums) {
        let (m, n) = alpha.shape();
        let a = alpha.as_slice();
        let l = self.linear.as_slice();
        let mut best = Vertex { i: 0, j: 0, grad: f64::INFINITY };
        let mut worst = Vertex { i: 0, j: 0, grad: f64::NEG_INFINITY };
        let mut sums = ScanSums { inner: 0.0, linear: 0.0, sq: 0.0 };
        for j in 0..n {
            let cj = 2.0 * mr2[j];
            for i in 0..m {
                let idx = j * m + i;
                let g = l[idx] + 2.0 * self.prox * a[idx] + 2.0 * mr1[i] + cj;
                if g < best.grad || (g == best.grad && i < best.i) {
                    best = Vertex { i, j, grad: g };
                }
                if a[idx] > 0.0 {
                    sums.inner += g * a[idx];
                    sums.linear += l[idx] * a[idx];
                    sums.sq += a[idx] * a[idx];
                    if g > worst.grad || (g == worst.grad && i < worst.i) {
                        worst = Vertex { i, j, grad: g };
                    }
                }
            }
        }
        (best, worst, sums)
    }
}

/// Minimizes the penalized objective over the joint simplex, starting from
/// the uniform coupling. `beta` and `gamma` are left empty.
pub fn solve_simplified(c: &CostMatrix, g1: &GramMatrix, g2: &GramMatrix, cfg: &SolverConfig) -> Result<(PlanCoefficients, SolveTrace)> {
    check_problem(c, g1, g2, cfg)?;
    let (m, n) = (c.nrows(), c.ncols());
    let row_metric = marginal_metric(g1, cfg.lambda1, cfg.nu1);
    let col_metric = marginal_metric(g2, cfg.lambda2, cfg.nu2);
    let problem = SimplexQuadratic {
        linear: c.entries(),
        prox: 0.0,
        row_metric: &row_metric,
        col_metric: &col_metric,
    };
    let start = DMatrix::from_element(m, n, 1.0 / (m * n) as f64);
    let (mut alpha, trace) = problem.minimize(start, cfg.max_outer_iters, cfg.tol_gap, cfg.fw_variant)?;
    project_round_off(&mut alpha)?;
    Ok((PlanCoefficients { alpha, beta: None, gamma: None }, trace))
}
