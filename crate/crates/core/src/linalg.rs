use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

pub(crate) const JITTER_CAP: f64 = 1e-2;
const JITTER_FLOOR: f64 = 1e-12;

/// Cholesky factor of `a + jitter * I`, escalating jitter by 10x from the
/// requested value (from 1e-12 when zero was requested) until the
/// factorization succeeds. Fails once jitter would exceed `JITTER_CAP`.
pub(crate) fn cholesky_with_jitter(a: &DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::InvalidConfig(format!("jitter must be nonnegative, got {jitter}")));
    }
    let mut j = jitter;
    loop {
        if j > JITTER_CAP {
            return Err(Error::IllConditionedGram { max_jitter: JITTER_CAP });
        }
        let mut shifted = a.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(shifted) {
            // nalgebra accepts tiny positive pivots; reject factors whose
            // diagonal collapsed to round-off to keep later solves finite.
            let l = c.l_dirty();
            let min_pivot = (0..l.nrows()).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot.is_finite() && min_pivot > 1e-150 {
                return Ok((c, j));
            }
        }
        j = if j == 0.0 { JITTER_FLOOR } else { j * 10.0 };
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
/// all-ones vector.
pub(crate) fn largest_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-14 * next.abs() {
            return next.max(norm);
        }
        lambda = next;
    }
    lambda
}

/// Accelerated projected gradient for `min_{X >= 0} |R - G X / s|_F^2`
/// with symmetric PSD `G`, started from zero.
pub(crate) fn nnls_accelerated(g: &DMatrix<f64>, scale: f64, target: &DMatrix<f64>, iters: usize) -> DMatrix<f64> {
    let mut x = DMatrix::zeros(g.ncols(), target.ncols());
    let lmax = largest_eigenvalue(g);
    if lmax <= 0.0 {
        return x;
    }
    let step = scale / (lmax * lmax);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let resid = target - g * &y / scale;
        let next = (&y + g * resid * step).map(|v| v.max(0.0));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        if next == x {
            break;
        }
        x = next;
        t = t_next;
    }
    x
}

/// `f(A)` for symmetric `A` via eigendecomposition, with `f` applied to each
/// eigenvalue.
pub(crate) fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(f);
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&vals) * v.transpose()
}

/// Principal square root, negative eigenvalues clamped to zero.
pub(crate) fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, |l| l.max(0.0).sqrt())
}

/// Inverse square root with pseudo-inverse semantics for eigenvalues at or
/// below `floor`.
pub(crate) fn sym_inv_sqrt(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    sym_apply(a, |l| if l > floor { 1.0 / l.sqrt() } else { 0.0 })
}

/// Frobenius norm of `a - b`.
pub(crate) fn frobenius_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_eigen() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let expect = a.clone().symmetric_eigenvalues().max();
        assert!((largest_eigenvalue(&a) - expect).abs() < 1e-10);
    }

    #[test]
    fn jitter_escalates_on_singular() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let (_, j) = cholesky_with_jitter(&a, 0.0).unwrap();
        assert!(j > 0.0 && j <= JITTER_CAP);
    }

    #[test]
    fn jitter_cap_exceeded() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky_with_jitter(&a, 0.0), Err(Error::IllConditionedGram { .. })));
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sym_sqrt(&a);
        assert!(frobenius_diff(&(&r * &r), &a) < 1e-12);
        let ir = sym_inv_sqrt(&a, 1e-12);
        assert!(frobenius_diff(&(&ir * &a * &ir), &DMatrix::identity(2, 2)) < 1e-12);
    }
}
