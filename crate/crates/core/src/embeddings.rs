//! Empirical kernel mean embedding quantities expressed through gram matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::kernels::{gram, GramMatrix, KernelSpec};
use crate::linalg::cholesky_with_jitter;
use crate::samples::squared_distance;
use crate::{Error, Result, SampleSet};

/// Negative MMD^2 round-off above this magnitude is reported as an error.
const MMD_NEGATIVE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    SquaredEuclidean,
    UserSupplied,
}

/// Ground cost evaluated at every (source, target) sample pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: DMatrix<f64>,
    kind: CostKind,
}

impl CostMatrix {
    pub fn squared_euclidean(xs: &SampleSet, ys: &SampleSet) -> Result<Self> {
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::EmptyInput("cost matrix needs non-empty sample sets"));
        }
        if xs.dim() != ys.dim() {
            return Err(Error::InputShape(format!(
                "source dimension {} differs from target dimension {}",
                xs.dim(),
                ys.dim()
            )));
        }
        let entries = DMatrix::from_fn(xs.len(), ys.len(), |i, j| squared_distance(xs.row(i), ys.row(j)));
        Ok(Self { entries, kind: CostKind::SquaredEuclidean })
    }

    pub fn user_supplied(entries: DMatrix<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("cost matrix is empty"));
        }
        if let Some((k, v)) = entries.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (i, j) = (k % entries.nrows(), k / entries.nrows());
            return Err(Error::InputShape(format!("cost entry ({i}, {j}) is not finite: {v}")));
        }
        Ok(Self { entries, kind: CostKind::UserSupplied })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Squared MMD between the empirical embeddings of `a` and `b`.
pub fn mmd_squared(spec: &KernelSpec, a: &SampleSet, b: &SampleSet) -> Result<f64> {
    let kaa = gram(spec, a, a)?;
    let kbb = gram(spec, b, b)?;
    let kab = gram(spec, a, b)?;
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let v = kaa.entries().sum() / (na * na) + kbb.entries().sum() / (nb * nb)
        - 2.0 * kab.entries().sum() / (na * nb);
    if v >= 0.0 {
        Ok(v)
    } else if v > -MMD_NEGATIVE_TOL {
        Ok(0.0)
    } else {
        Err(Error::InternalConsistency(format!("squared MMD evaluated to {v}")))
    }
}

/// Mahalanobis residuals of the marginals of a coupling against the uniform
/// empirical marginals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalResiduals {
    /// `|alpha 1 - 1/m|^2` in the `G1` metric.
    pub r1_g: f64,
    /// `|alpha^T 1 - 1/n|^2` in the `G2` metric.
    pub r2_g: f64,
    /// Same as `r1_g` with `G1 ⊙ G1`.
    pub r1_gg: f64,
    /// Same as `r2_g` with `G2 ⊙ G2`.
    pub r2_gg: f64,
}

/// Row and column residual vectors `alpha 1 - 1/m` and `alpha^T 1 - 1/n`.
pub(crate) fn residual_vectors(alpha: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let (m, n) = alpha.shape();
    let mut r1 = DVector::from_element(m, -1.0 / m as f64);
    let mut r2 = DVector::from_element(n, -1.0 / n as f64);
    for j in 0..n {
        for i in 0..m {
            let a = alpha[(i, j)];
            r1[i] += a;
            r2[j] += a;
        }
    }
    (r1, r2)
}

pub fn marginal_residuals(alpha: &DMatrix<f64>, g1: &GramMatrix, g2: &GramMatrix) -> Result<MarginalResiduals> {
    let (m, n) = alpha.shape();
    if g1.nrows() != m || g1.ncols() != m || g2.nrows() != n || g2.ncols() != n {
        return Err(Error::InputShape(format!(
            "coupling is {m}x{n} but grams are {}x{} and {}x{}",
            g1.nrows(),
            g1.ncols(),
            g2.nrows(),
            g2.ncols()
        )));
    }
    let (r1, r2) = residual_vectors(alpha);
    let quad = |r: &DVector<f64>, g: &DMatrix<f64>| (g * r).dot(r);
    Ok(MarginalResiduals {
        r1_g: quad(&r1, g1.entries()),
        r2_g: quad(&r2, g2.entries()),
        r1_gg: quad(&r1, &g1.hadamard_square()),
        r2_gg: quad(&r2, &g2.hadamard_square()),
    })
}

/// Coefficients of the projection of the cost onto the span of
/// `phi1(x_i) ⊗ phi2(y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEmbeddingCoefficients {
    pub rho: DMatrix<f64>,
    pub jitter_used: f64,
}

/// Solves `G1 rho G2 = C` through Cholesky factorizations of the jittered
/// grams. The same jitter is applied to both grams.
pub fn cost_embedding(g1: &GramMatrix, g2: &GramMatrix, c: &CostMatrix, jitter: f64) -> Result<CostEmbeddingCoefficients> {
    let (m, n) = (c.nrows(), c.ncols());
    if g1.nrows() != m || g1.ncols() != m || g2.nrows() != n || g2.ncols() != n {
        return Err(Error::InputShape(format!(
            "cost is {m}x{n} but grams are {}x{} and {}x{}",
            g1.nrows(),
            g1.ncols(),
            g2.nrows(),
            g2.ncols()
        )));
    }
    let (chol1, j1) = cholesky_with_jitter(g1.entries(), jitter)?;
    let (chol2, j2) = cholesky_with_jitter(g2.entries(), j1)?;
    let jitter_used = j1.max(j2);
    let (chol1, chol2) = if j2 > j1 {
        (cholesky_with_jitter(g1.entries(), j2)?.0, chol2)
    } else {
        (chol1, chol2)
    };
    // rho = G1^-1 C G2^-1, with G2 symmetric: (G2^-1 (G1^-1 C)^T)^T
    let left = chol1.solve(c.entries());
    let rho = chol2.solve(&left.transpose()).transpose();
    Ok(CostEmbeddingCoefficients { rho, jitter_used })
}
