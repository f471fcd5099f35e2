//! Normalized kernels and gram matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::samples::squared_distance;
use crate::{Error, Execution, Result, SampleSet};

/// Kernel defining the feature maps of one marginal.
///
/// Both kernels satisfy `k(x, x) = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel", into = "RawKernel")]
pub enum KernelSpec {
    /// `exp(-|x - z|^2 / (2 sigma^2))`
    Gaussian { sigma: f64 },
    /// 1 when the points are exactly equal, 0 otherwise.
    KroneckerDelta,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gaussian bandwidth must be positive and finite, got {sigma}"
            )));
        }
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn sigma(&self) -> Option<f64> {
        match *self {
            KernelSpec::Gaussian { sigma } => Some(sigma),
            KernelSpec::KroneckerDelta => None,
        }
    }

    /// Evaluates the kernel on two slices of equal length without checking.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], z: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { sigma } => {
                (-squared_distance(x, z) / (2.0 * sigma * sigma)).exp()
            }
            KernelSpec::KroneckerDelta => {
                if x == z {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawKernel {
    kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum KernelKind {
    Gaussian,
    KroneckerDelta,
}

impl TryFrom<RawKernel> for KernelSpec {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        match (raw.kind, raw.sigma) {
            (KernelKind::Gaussian, Some(s)) => KernelSpec::gaussian(s),
            (KernelKind::Gaussian, None) => {
                Err(Error::InvalidConfig("gaussian kernel requires sigma".into()))
            }
            (KernelKind::KroneckerDelta, None) => Ok(KernelSpec::KroneckerDelta),
            (KernelKind::KroneckerDelta, Some(_)) => Err(Error::InvalidConfig(
                "kronecker_delta kernel takes no sigma".into(),
            )),
        }
    }
}

impl From<KernelSpec> for RawKernel {
    fn from(k: KernelSpec) -> Self {
        match k {
            KernelSpec::Gaussian { sigma } => RawKernel { kind: KernelKind::Gaussian, sigma: Some(sigma) },
            KernelSpec::KroneckerDelta => RawKernel { kind: KernelKind::KroneckerDelta, sigma: None },
        }
    }
}

/// Evaluates `k(x, z)`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != z.len() {
        return Err(Error::InputShape(format!(
            "kernel arguments have dimensions {} and {}",
            x.len(),
            z.len()
        )));
    }
    Ok(spec.eval_unchecked(x, z))
}

/// Pairwise kernel evaluations between two sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    symmetric: bool,
}

impl GramMatrix {
    /// Wraps an explicit matrix. `symmetric` is set when the matrix is square
    /// and equal to its transpose.
    pub fn from_matrix(entries: DMatrix<f64>) -> Self {
        let symmetric = entries.is_square() && entries == entries.transpose();
        Self { entries, symmetric }
    }

    pub fn identity(n: usize) -> Self {
        Self { entries: DMatrix::identity(n, n), symmetric: true }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// Element-wise square `G ⊙ G`.
    pub fn hadamard_square(&self) -> DMatrix<f64> {
        self.entries.component_mul(&self.entries)
    }

    /// Ratio of extreme eigenvalues, for symmetric grams.
    pub fn condition_number(&self) -> Option<f64> {
        if !self.symmetric {
            return None;
        }
        let eig = self.entries.clone().symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min();
        Some(if min <= 0.0 { f64::INFINITY } else { max / min })
    }
}

/// Builds the gram matrix `k(a_i, b_j)` using the default execution mode.
pub fn gram(spec: &KernelSpec, a: &SampleSet, b: &SampleSet) -> Result<GramMatrix> {
    gram_with(spec, a, b, Execution::default())
}

/// Builds the gram matrix with an explicit execution mode. Rows are computed
/// independently, so the result does not depend on `exec`.
pub fn gram_with(spec: &KernelSpec, a: &SampleSet, b: &SampleSet, exec: Execution) -> Result<GramMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("gram matrix needs non-empty sample sets"));
    }
    if a.dim() != b.dim() {
        return Err(Error::InputShape(format!(
            "sample sets have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let rows = exec.map_indexed(a.len(), |i| {
        let x = a.row(i);
        b.rows().map(|z| spec.eval_unchecked(x, z)).collect::<Vec<_>>()
    });
    let entries = DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j]);
    let symmetric = std::ptr::eq(a, b) || a == b;
    Ok(GramMatrix { entries, symmetric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(rows: &[&[f64]]) -> SampleSet {
        SampleSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn eval_examples() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(eval_kernel(&g, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let v = eval_kernel(&g, &[0.0], &[2.0]).unwrap();
        assert!((v - (-2.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.135335).abs() < 1e-6);
        assert_eq!(
            eval_kernel(&KernelSpec::KroneckerDelta, &[1.0, 2.0], &[1.0, 3.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn eval_dimension_mismatch() {
        let g = KernelSpec::gaussian(1.0).unwrap();
        assert!(matches!(eval_kernel(&g, &[0.0], &[0.0, 1.0]), Err(Error::InputShape(_))));
    }

    #[test]
    fn bad_sigma_rejected() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(-1.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn gram_examples() {
        let a = pts(&[&[0.0, 1.0], &[2.0, 3.0], &[4.0, 5.0]]);
        let g = gram(&KernelSpec::KroneckerDelta, &a, &a).unwrap();
        assert_eq!(g.entries(), &DMatrix::identity(3, 3));
        assert!(g.is_symmetric());

        let k = KernelSpec::gaussian(1.0).unwrap();
        let z = pts(&[&[0.0]]);
        assert_eq!(gram(&k, &z, &z).unwrap().entries()[(0, 0)], 1.0);

        let two = pts(&[&[0.0], &[2.0]]);
        let g = gram(&k, &two, &two).unwrap();
        let e = (-2.0f64).exp();
        assert_eq!(g.entries(), &DMatrix::from_row_slice(2, 2, &[1.0, e, e, 1.0]));
    }

    #[test]
    fn gram_rejects_empty_and_mixed_dims() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let empty = SampleSet::from_rows(&[]).unwrap();
        let a = pts(&[&[0.0]]);
        assert!(matches!(gram(&k, &empty, &a), Err(Error::EmptyInput(_))));
        let b = pts(&[&[0.0, 1.0]]);
        assert!(matches!(gram(&k, &a, &b), Err(Error::InputShape(_))));
    }

    #[test]
    fn cross_gram_not_symmetric() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let a = pts(&[&[0.0], &[1.0]]);
        let b = pts(&[&[0.5], &[1.0]]);
        assert!(!gram(&k, &a, &b).unwrap().is_symmetric());
    }

    #[test]
    fn execution_modes_bit_identical() {
        let k = KernelSpec::gaussian(0.7).unwrap();
        let a = SampleSet::from_flat((0..120).map(|i| (i as f64 * 0.37).sin()).collect(), 40, 3).unwrap();
        let s = gram_with(&k, &a, &a, Execution::Sequential).unwrap();
        let p = gram_with(&k, &a, &a, Execution::Parallel).unwrap();
        assert_eq!(s, p);
    }

    #[test]
    fn kernel_json_shape() {
        let k = KernelSpec::gaussian(2.5).unwrap();
        assert_eq!(serde_json::to_string(&k).unwrap(), r#"{"kind":"gaussian","sigma":2.5}"#);
        let d: KernelSpec = serde_json::from_str(r#"{"kind":"kronecker_delta"}"#).unwrap();
        assert_eq!(d, KernelSpec::KroneckerDelta);
        assert!(serde_json::from_str::<KernelSpec>(r#"{"kind":"gaussian","sigma":-1}"#).is_err());
    }

    fn sample_set() -> impl Strategy<Value = SampleSet> {
        (1usize..=20, 1usize..=10).prop_flat_map(|(n, d)| {
            prop::collection::vec(-3.0f64..3.0, n * d)
                .prop_map(move |v| SampleSet::from_flat(v, n, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn gram_symmetric_normalized_psd(a in sample_set(), sigma in 0.2f64..5.0) {
            let k = KernelSpec::gaussian(sigma).unwrap();
            let g = gram(&k, &a, &a).unwrap();
            let e = g.entries();
            for i in 0..a.len() {
                prop_assert_eq!(e[(i, i)], 1.0);
                for j in 0..a.len() {
                    prop_assert_eq!(e[(i, j)].to_bits(), e[(j, i)].to_bits());
                    prop_assert!((0.0..=1.0).contains(&e[(i, j)]));
                }
            }
            let eig = e.clone().symmetric_eigenvalues();
            prop_assert!(eig.min() >= -1e-8 * eig.max());
        }

        #[test]
        fn delta_gram_on_distinct_points_is_identity(n in 1usize..15, d in 1usize..4) {
            let a = SampleSet::from_flat((0..n * d).map(|i| i as f64).collect(), n, d).unwrap();
            let g = gram(&KernelSpec::KroneckerDelta, &a, &a).unwrap();
            prop_assert_eq!(g.entries(), &DMatrix::identity(n, n));
        }
    }
}
