//! Statistical optimal transport by learning the kernel mean embedding of the
//! transport plan.
//!
//! The estimator works entirely through gram matrices over the source and
//! target samples. A coupling coefficient matrix `alpha` is found by solving a
//! convex program over the joint simplex whose marginals are pulled towards
//! the empirical marginal embeddings with MMD penalties. From the solved
//! coefficients a barycentric transport map is built that can be evaluated at
//! points that were never part of the training samples.
//!
//! Layout:
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernels`] | Gaussian / Kronecker-delta kernels and gram matrices |
//! | [`embeddings`] | MMD, marginal residual norms, cost projection |
//! | [`solvers`] | Frank-Wolfe, ADMM and exact transportation simplex |
//! | [`transport_map`] | barycentric map (closed form and projected SGD) |
//! | [`experiments`] | Gaussian, sample-complexity and domain-adaptation harnesses |
//! | [`cli`] | the `mmdot` command line front end |
//!
//! ```
//! use mmdot::kernels::{gram, KernelSpec};
//! use mmdot::embeddings::CostMatrix;
//! use mmdot::solvers::{solve_simplified, SolverConfig};
//! use mmdot::SampleSet;
//!
//! let xs = SampleSet::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
//! let ys = SampleSet::from_rows(&[vec![0.5], vec![1.5]]).unwrap();
//! let k = KernelSpec::gaussian(1.0).unwrap();
//! let g1 = gram(&k, &xs, &xs).unwrap();
//! let g2 = gram(&k, &ys, &ys).unwrap();
//! let cost = CostMatrix::squared_euclidean(&xs, &ys).unwrap();
//! let (plan, trace) = solve_simplified(&cost, &g1, &g2, &SolverConfig::default()).unwrap();
//! assert!((plan.alpha.sum() - 1.0).abs() < 1e-10);
//! assert!(trace.iters_used > 0);
//! ```

pub mod cli;
pub mod embeddings;
pub mod experiments;
pub mod kernels;
pub(crate) mod linalg;
mod samples;
pub mod solvers;
pub mod transport_map;

pub use samples::SampleSet;

use solvers::SolveTrace;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape error: {0}")]
    InputShape(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("gram matrix is ill-conditioned: no factorization succeeded up to jitter {max_jitter:e}")]
    IllConditionedGram { max_jitter: f64 },

    #[error("numerical failure: {message}")]
    NumericalFailure {
        message: String,
        trace: Option<Box<SolveTrace>>,
    },

    #[error("transportation simplex stalled after {pivots} pivots")]
    SolverStall { pivots: usize },

    #[error("problem too large for the exact solver: {m}x{n} exceeds {cap} cells")]
    TooLarge { m: usize, n: usize, cap: usize },

    #[error("invalid transport map model: {0}")]
    InvalidModel(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("internal consistency error: {0}")]
    InternalConsistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// How data-parallel loops are executed.
///
/// Without the `parallel` feature both variants run sequentially. Every
/// parallel loop in the crate writes independent outputs, so results are
/// bit-identical across variants and thread counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Map `f` over `0..len`, collecting results in index order.
    pub(crate) fn map_indexed<T, F>(self, len: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..len).into_par_iter().map(f).collect()
            }
            _ => (0..len).map(f).collect(),
        }
    }
}
