//! Exact discrete OT with uniform marginals by the transportation simplex.
//!
//! Supplies and demands are scaled to integers (each row supplies `n`, each
//! column demands `m`), so every basic solution has integral flows and the
//! pivoting is exact. The coupling is `flow / (m n)`.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::embeddings::CostMatrix;
use crate::{Error, Result};

/// Largest `m * n` accepted by [`solve_emd_exact`].
pub const EMD_MAX_CELLS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EmdSolution {
    pub coupling: DMatrix<f64>,
    pub objective: f64,
    pub pivots: usize,
}

struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<i64>,
}

impl Basis {
    /// North-west corner rule; degenerate ties advance the row so the basis
    /// always holds `m + n - 1` cells.
    fn north_west(m: usize, n: usize) -> Self {
        let mut supply = vec![n as i64; m];
        let mut demand = vec![m as i64; n];
        let (mut i, mut j) = (0, 0);
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        loop {
            let x = supply[i].min(demand[j]);
            cells.push((i, j));
            flow.push(x);
            supply[i] -= x;
            demand[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if supply[i] == 0 && i < m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { m, n, cells, flow }
    }

    /// Tree adjacency: node `i` for rows, `m + j` for columns.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, c: &DMatrix<f64>, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![f64::NAN; self.m];
        let mut v = vec![f64::NAN; self.n];
        u[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &(next, k) in &adj[node] {
                let (i, j) = self.cells[k];
                if node < self.m {
                    if v[j].is_nan() {
                        v[j] = c[(i, j)] - u[i];
                        queue.push_back(next);
                    }
                } else if u[i].is_nan() {
                    u[i] = c[(i, j)] - v[j];
                    queue.push_back(next);
                }
            }
        }
        (u, v)
    }

    /// Basis cell indices on the tree path from row `i` to column `j`.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.m + self.n;
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut queue = VecDeque::from([i]);
        let goal = self.m + j;
        while let Some(node) = queue.pop_front() {
            if node == goal {
                break;
            }
            for &(next, k) in &adj[node] {
                if !seen[next] {
                    seen[next] = true;
                    prev[next] = Some((node, k));
                    queue.push_back(next);
                }
            }
        }
        let mut edges = Vec::new();
        let mut node = goal;
        while let Some((p, k)) = prev[node] {
            edges.push(k);
            node = p;
        }
        edges.reverse();
        edges
    }
}

/// Solves `min <pi, C>` over couplings with uniform marginals `1/m`, `1/n`.
pub fn solve_emd_exact(c: &CostMatrix) -> Result<EmdSolution> {
    let (m, n) = (c.nrows(), c.ncols());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("cost matrix is empty"));
    }
    if m * n > EMD_MAX_CELLS {
        return Err(Error::TooLarge { m, n, cap: EMD_MAX_CELLS });
    }
    let cost = c.entries();
    let eps = 1e-12 * cost.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut basis = Basis::north_west(m, n);
    let max_pivots = 10 * m * n;
    let mut pivots = 0;

    loop {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(cost, &adj);
        let mut in_basis = vec![false; m * n];
        for &(i, j) in &basis.cells {
            in_basis[i * n + j] = true;
        }
        // Most negative reduced cost; the row-major scan with strict
        // comparison keeps the smallest (i, j) among ties.
        let mut entering = None;
        let mut best = -eps;
        for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let r = cost[(i, j)] - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        if pivots == max_pivots {
            return Err(Error::SolverStall { pivots });
        }
        pivots += 1;

        // Cycle: entering cell (+), then path edges alternate -, +, ...
        let path = basis.path(&adj, ei, ej);
        let minus: Vec<usize> = path.iter().copied().step_by(2).collect();
        let theta = minus.iter().map(|&k| basis.flow[k]).min().unwrap_or(0);
        let leaving = minus
            .iter()
            .copied()
            .filter(|&k| basis.flow[k] == theta)
            .min_by_key(|&k| basis.cells[k])
            .expect("cycle has a minus cell");
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flow[k] -= theta;
            } else {
                basis.flow[k] += theta;
            }
        }
        basis.cells[leaving] = (ei, ej);
        basis.flow[leaving] = theta;
    }

    let total = (m * n) as f64;
    let mut coupling = DMatrix::zeros(m, n);
    let mut objective = 0.0;
    for (&(i, j), &f) in basis.cells.iter().zip(&basis.flow) {
        let p = f as f64 / total;
        coupling[(i, j)] = p;
        objective += p * cost[(i, j)];
    }
    Ok(EmdSolution { coupling, objective, pivots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(m: usize, n: usize, v: &[f64]) -> CostMatrix {
        CostMatrix::user_supplied(DMatrix::from_row_slice(m, n, v)).unwrap()
    }

    #[test]
    fn diagonal_matching() {
        let s = solve_emd_exact(&cost(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(s.coupling, DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
        assert_eq!(s.objective, 0.0);
    }

    #[test]
    fn singleton() {
        let s = solve_emd_exact(&cost(1, 1, &[3.25])).unwrap();
        assert_eq!(s.coupling[(0, 0)], 1.0);
        assert_eq!(s.objective, 3.25);
    }

    #[test]
    fn two_by_three() {
        // Vertex enumeration by hand: row 0 takes col 0 fully (1/3) and 1/6 of col 1,
        // row 1 the rest; objective (1/3)*1 + (1/6)*2 + (1/6)*2 + (1/3)*1 = 4/3.
        let s = solve_emd_exact(&cost(2, 3, &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0])).unwrap();
        assert!((s.objective - 4.0 / 3.0).abs() < 1e-12);
        for i in 0..2 {
            assert!((s.coupling.row(i).sum() - 0.5).abs() < 1e-15);
        }
        for j in 0..3 {
            assert!((s.coupling.column(j).sum() - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rectangular_tall() {
        let s = solve_emd_exact(&cost(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        assert!((s.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn size_cap() {
        let c = CostMatrix::user_supplied(DMatrix::zeros(101, 100)).unwrap();
        assert!(matches!(solve_emd_exact(&c), Err(Error::TooLarge { .. })));
    }
}
