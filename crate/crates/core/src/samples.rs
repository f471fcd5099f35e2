use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A set of points of one shared dimension, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SampleSet {
    data: Vec<f64>,
    len: usize,
    dim: usize,
}

impl SampleSet {
    /// Builds a set from explicit rows. All rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InputShape(format!(
                    "row {i} has dimension {} but row 0 has {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { data, len: rows.len(), dim })
    }

    /// Builds a set from row-major data.
    pub fn from_flat(data: Vec<f64>, len: usize, dim: usize) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::InputShape(format!(
                "{} values cannot form {len} points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, len, dim })
    }

    /// Each row of the matrix becomes one point.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (len, dim) = m.shape();
        let mut data = Vec::with_capacity(len * dim);
        for i in 0..len {
            data.extend(m.row(i).iter());
        }
        Self { data, len, dim }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.len).map(move |i| self.row(i))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len, self.dim, &self.data)
    }

    /// Keeps the points at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { data, len: idx.len(), dim: self.dim }
    }
}

impl TryFrom<Vec<Vec<f64>>> for SampleSet {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<SampleSet> for Vec<Vec<f64>> {
    fn from(s: SampleSet) -> Self {
        s.to_rows()
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ragged_rows_rejected() {
        let err = SampleSet::from_rows(&[vec![1.0, 2.0], vec![3.0]]).unwrap_err();
        assert!(matches!(err, Error::InputShape(_)));
    }

    #[test]
    fn matrix_round_trip() {
        let s = SampleSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let m = s.to_matrix();
        assert_eq!(m[(2, 1)], 6.0);
        assert_eq!(SampleSet::from_matrix(&m), s);
    }
}
