//! Barycentric-projection transport map built from solved coefficients.
//!
//! For a source point `x` the conditional embedding of the target given `x`
//! assigns target sample `y_j` the weight
//!
//! ```text
//! w_j(x) = sum_i beta[j][i] k1(x_i, x)
//! ```
//!
//! and the map returns `argmin_y sum_j w_j c(y, y_j)`. With squared Euclidean
//! cost this is the weighted mean of the targets; other costs go through
//! projected SGD. `x` does not need to be one of the source samples.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernels::{GramMatrix, KernelSpec};
use crate::linalg::{cholesky_with_jitter, nnls_accelerated};
use crate::samples::squared_distance;
use crate::solvers::PlanCoefficients;
use crate::{Error, Execution, Result, SampleSet};

const WEIGHT_NEGATIVE_TOL: f64 = 1e-12;
const WEIGHT_MASS_FLOOR: f64 = 1e-12;

/// Ground cost on the target domain used by the map.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapCost {
    /// `|y - z|^2`
    #[default]
    #[serde(rename = "sqeuclidean")]
    SquaredEuclidean,
    /// `|y - z|`
    Euclidean,
    /// `|y - z|^p` for `p >= 1`.
    MetricPower { p: f64 },
}

/// A cost with a subgradient in its first argument, for SGD mapping.
pub trait GroundCost: Sync {
    fn cost(&self, y: &[f64], z: &[f64]) -> f64;
    /// Writes a subgradient of `cost(., z)` at `y` into `out`.
    fn subgradient(&self, y: &[f64], z: &[f64], out: &mut [f64]);
    /// Exponent `p` of the cost seen as a metric power; used to scale the default step.
    fn power(&self) -> f64 {
        1.0
    }
}

impl GroundCost for MapCost {
    fn cost(&self, y: &[f64], z: &[f64]) -> f64 {
        let d2 = squared_distance(y, z);
        match *self {
            MapCost::SquaredEuclidean => d2,
            MapCost::Euclidean => d2.sqrt(),
            MapCost::MetricPower { p } => d2.sqrt().powf(p),
        }
    }

    fn subgradient(&self, y: &[f64], z: &[f64], out: &mut [f64]) {
        let scale = match *self {
            MapCost::SquaredEuclidean => 2.0,
            MapCost::Euclidean | MapCost::MetricPower { .. } => {
                let d = squared_distance(y, z).sqrt();
                let p = if let MapCost::MetricPower { p } = *self { p } else { 1.0 };
                if d == 0.0 {
                    0.0
                } else {
                    p * d.powf(p - 2.0)
                }
            }
        };
        for ((o, a), b) in out.iter_mut().zip(y).zip(z) {
            *o = scale * (a - b);
        }
    }

    fn power(&self) -> f64 {
        match *self {
            MapCost::SquaredEuclidean => 2.0,
            MapCost::Euclidean => 1.0,
            MapCost::MetricPower { p } => p,
        }
    }
}

/// Frozen model used to map source-domain points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct TransportMapModel {
    beta_star: DMatrix<f64>,
    source_points: SampleSet,
    target_points: SampleSet,
    kernel1: KernelSpec,
    cost_kind: MapCost,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    beta_star: Vec<Vec<f64>>,
    source_points: SampleSet,
    target_points: SampleSet,
    kernel: KernelSpec,
    cost_kind: MapCost,
}

impl TryFrom<ModelDoc> for TransportMapModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let rows = doc.beta_star.len();
        let cols = doc.beta_star.first().map_or(0, Vec::len);
        if doc.beta_star.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidModel("beta_star rows have different lengths".into()));
        }
        let flat: Vec<f64> = doc.beta_star.into_iter().flatten().collect();
        let beta = DMatrix::from_row_slice(rows, cols, &flat);
        TransportMapModel::new(beta, doc.source_points, doc.target_points, doc.kernel, doc.cost_kind)
    }
}

impl From<TransportMapModel> for ModelDoc {
    fn from(m: TransportMapModel) -> Self {
        let beta_star = (0..m.beta_star.nrows())
            .map(|j| m.beta_star.row(j).iter().copied().collect())
            .collect();
        ModelDoc {
            beta_star,
            source_points: m.source_points,
            target_points: m.target_points,
            kernel: m.kernel1,
            cost_kind: m.cost_kind,
        }
    }
}

/// Normalized conditional weights over the target samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MapWeights {
    pub weights: Vec<f64>,
    pub normalized: bool,
    /// Set when every raw weight was negligible and uniform weights were used.
    pub fallback_used: bool,
}

impl TransportMapModel {
    /// `beta_star` is `n x m` for `m` source and `n` target points.
    pub fn new(
        beta_star: DMatrix<f64>,
        source_points: SampleSet,
        target_points: SampleSet,
        kernel1: KernelSpec,
        cost_kind: MapCost,
    ) -> Result<Self> {
        let (n, m) = beta_star.shape();
        if source_points.is_empty() || target_points.is_empty() {
            return Err(Error::InvalidModel("source and target points must be non-empty".into()));
        }
        if m != source_points.len() || n != target_points.len() {
            return Err(Error::InvalidModel(format!(
                "beta_star is {n}x{m} but there are {} source and {} target points",
                source_points.len(),
                target_points.len()
            )));
        }
        if let Some(v) = beta_star.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidModel(format!("beta_star has entry {v}")));
        }
        if let MapCost::MetricPower { p } = cost_kind {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(Error::InvalidModel(format!("metric power must be >= 1, got {p}")));
            }
        }
        Ok(Self { beta_star, source_points, target_points, kernel1, cost_kind })
    }

    /// Builds a model from solved coefficients. An ADMM `beta` is used as is;
    /// otherwise it is derived from the consensus relation
    /// `alpha = G1 beta^T / m` as chosen by `derivation`.
    pub fn from_plan(
        plan: &PlanCoefficients,
        g1: &GramMatrix,
        source_points: SampleSet,
        target_points: SampleSet,
        kernel1: KernelSpec,
        cost_kind: MapCost,
        derivation: BetaDerivation,
    ) -> Result<Self> {
        let beta = match (&plan.beta, derivation) {
            (Some(b), _) => b.map(|v| v.max(0.0)),
            (None, BetaDerivation::Nnls { iters }) => derive_beta_nnls(&plan.alpha, g1, iters)?,
            (None, BetaDerivation::ClampedSolve { jitter }) => derive_beta(&plan.alpha, g1, jitter)?,
        };
        Self::new(beta, source_points, target_points, kernel1, cost_kind)
    }

    pub fn beta_star(&self) -> &DMatrix<f64> {
        &self.beta_star
    }

    pub fn source_points(&self) -> &SampleSet {
        &self.source_points
    }

    pub fn target_points(&self) -> &SampleSet {
        &self.target_points
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel1
    }

    pub fn cost_kind(&self) -> MapCost {
        self.cost_kind
    }

    pub fn source_dim(&self) -> usize {
        self.source_points.dim()
    }

    pub fn target_dim(&self) -> usize {
        self.target_points.dim()
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.source_dim() {
            return Err(Error::InputShape(format!(
                "point has dimension {} but the model expects {}",
                x.len(),
                self.source_dim()
            )));
        }
        Ok(())
    }
}

/// How `beta` is recovered from a plan that has only `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaDerivation {
    /// Nonnegative least squares on `alpha = G1 beta^T / m`.
    Nnls { iters: usize },
    /// Unconstrained solve with jitter, then negatives clamped to zero.
    ClampedSolve { jitter: f64 },
}

impl Default for BetaDerivation {
    fn default() -> Self {
        BetaDerivation::Nnls { iters: 500 }
    }
}

/// `beta >= 0` minimizing `|alpha - G1 beta^T / m|_F`, by accelerated
/// projected gradient.
pub fn derive_beta_nnls(alpha: &DMatrix<f64>, g1: &GramMatrix, iters: usize) -> Result<DMatrix<f64>> {
    let m = alpha.nrows();
    if g1.nrows() != m || g1.ncols() != m {
        return Err(Error::InputShape(format!("alpha has {m} rows but the gram is {}x{}", g1.nrows(), g1.ncols())));
    }
    if iters == 0 {
        return Err(Error::InvalidConfig("nnls needs at least one iteration".into()));
    }
    Ok(nnls_accelerated(g1.entries(), m as f64, alpha, iters).transpose())
}

/// `beta = m alpha^T (G1 + jitter I)^-1`, clamped at zero.
pub fn derive_beta(alpha: &DMatrix<f64>, g1: &GramMatrix, jitter: f64) -> Result<DMatrix<f64>> {
    let m = alpha.nrows();
    if g1.nrows() != m || g1.ncols() != m {
        return Err(Error::InputShape(format!("alpha has {m} rows but the gram is {}x{}", g1.nrows(), g1.ncols())));
    }
    let (chol, _) = cholesky_with_jitter(g1.entries(), jitter)?;
    let beta_t = chol.solve(alpha) * m as f64;
    Ok(beta_t.transpose().map(|v| v.max(0.0)))
}

pub fn conditional_weights(model: &TransportMapModel, x: &[f64]) -> Result<MapWeights> {
    model.check_point(x)?;
    let k: Vec<f64> = model.source_points.rows().map(|xi| model.kernel1.eval_unchecked(xi, x)).collect();
    let n = model.target_points.len();
    let mut weights = Vec::with_capacity(n);
    for j in 0..n {
        let mut w = 0.0;
        for (i, ki) in k.iter().enumerate() {
            w += model.beta_star[(j, i)] * ki;
        }
        if w < -WEIGHT_NEGATIVE_TOL {
            return Err(Error::InvalidModel(format!("conditional weight {j} is {w}")));
        }
        weights.push(w.max(0.0));
    }
    let total: f64 = weights.iter().sum();
    if total > WEIGHT_MASS_FLOOR {
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(MapWeights { weights, normalized: true, fallback_used: false })
    } else {
        Ok(MapWeights { weights: vec![1.0 / n as f64; n], normalized: true, fallback_used: true })
    }
}

fn weighted_mean(targets: &SampleSet, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; targets.dim()];
    for (y, &w) in targets.rows().zip(weights) {
        for (o, v) in out.iter_mut().zip(y) {
            *o += w * v;
        }
    }
    out
}

/// Weighted target mean, valid for the squared Euclidean cost only.
pub fn map_point_closed_form(model: &TransportMapModel, x: &[f64]) -> Result<Vec<f64>> {
    map_point_closed_form_weighted(model, x).map(|(y, _)| y)
}

pub(crate) fn map_point_closed_form_weighted(model: &TransportMapModel, x: &[f64]) -> Result<(Vec<f64>, MapWeights)> {
    if model.cost_kind != MapCost::SquaredEuclidean {
        return Err(Error::InvalidModel("closed-form mapping requires the squared Euclidean cost".into()));
    }
    let w = conditional_weights(model, x)?;
    Ok((weighted_mean(&model.target_points, &w.weights), w))
}

/// `sum_j w_j c(y, y_j)`.
pub fn barycentric_objective(cost: &dyn GroundCost, targets: &SampleSet, weights: &[f64], y: &[f64]) -> f64 {
    targets.rows().zip(weights).map(|(z, w)| w * cost.cost(y, z)).sum()
}

/// Options for [`map_point_sgd`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdOptions {
    pub steps: usize,
    /// `c` in the step size `c / sqrt(t)`. Defaults to `R^(2-p) / p` for a
    /// cost of power `p` and domain radius `R`, which is `0.5` for the squared
    /// Euclidean cost.
    pub step_scale: Option<f64>,
    pub seed: u64,
    /// Radius of the feasible ball around the weighted target mean. Defaults
    /// to twice the largest distance of a target point from that mean.
    pub domain_radius: Option<f64>,
}

impl Default for SgdOptions {
    fn default() -> Self {
        Self { steps: 10_000, step_scale: None, seed: 0, domain_radius: None }
    }
}

/// Projected SGD on `y -> sum_j w_j c(y, y_j)` with the model's own cost.
pub fn map_point_sgd(model: &TransportMapModel, x: &[f64], opts: &SgdOptions) -> Result<Vec<f64>> {
    map_point_sgd_with_cost(model, x, &model.cost_kind, opts).map(|(y, _)| y)
}

/// Projected SGD with an arbitrary cost.
///
/// Target indices are drawn by inverse-CDF sampling of a randomly shifted
/// golden-ratio sequence: every draw picks `j` with probability `w_j`, while
/// the empirical frequencies track `w` far closer than independent draws.
/// The output is the running average of the iterates.
pub fn map_point_sgd_with_cost(
    model: &TransportMapModel,
    x: &[f64],
    cost: &dyn GroundCost,
    opts: &SgdOptions,
) -> Result<(Vec<f64>, MapWeights)> {
    if opts.steps == 0 {
        return Err(Error::InvalidConfig("SGD needs at least one step".into()));
    }
    let w = conditional_weights(model, x)?;
    let targets = &model.target_points;
    let center = weighted_mean(targets, &w.weights);
    let radius = match opts.domain_radius {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::InvalidConfig(format!("domain radius must be positive, got {r}"))),
        None => {
            let spread = targets.rows().map(|y| squared_distance(y, &center).sqrt()).fold(0.0, f64::max);
            if spread > 0.0 { 2.0 * spread } else { 1.0 }
        }
    };
    let p = cost.power();
    let c = opts.step_scale.unwrap_or_else(|| radius.powf(2.0 - p) / p);
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidConfig(format!("step scale must be positive, got {c}")));
    }

    let mut cdf = Vec::with_capacity(w.weights.len());
    let mut acc = 0.0;
    for &v in &w.weights {
        acc += v;
        cdf.push(acc);
    }
    let draw = |u: f64| cdf.partition_point(|&c| c <= u * acc).min(cdf.len() - 1);

    let start = w
        .weights
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > w.weights[best] { j } else { best });
    let mut y = targets.row(start).to_vec();
    let mut avg = vec![0.0; y.len()];
    let mut grad = vec![0.0; y.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut u: f64 = rng.random();
    const GOLDEN: f64 = 0.618_033_988_749_894_9;

    for t in 1..=opts.steps {
        let j = draw(u);
        u += GOLDEN;
        if u >= 1.0 {
            u -= 1.0;
        }
        cost.subgradient(&y, targets.row(j), &mut grad);
        let eta = c / (t as f64).sqrt();
        for (yv, g) in y.iter_mut().zip(&grad) {
            *yv -= eta * g;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure { message: format!("non-finite SGD iterate at step {t}"), trace: None });
        }
        let dist = squared_distance(&y, &center).sqrt();
        if dist > radius {
            let s = radius / dist;
            for (yv, cv) in y.iter_mut().zip(&center) {
                *yv = cv + (*yv - cv) * s;
            }
        }
        let inv = 1.0 / t as f64;
        for (a, v) in avg.iter_mut().zip(&y) {
            *a += (v - *a) * inv;
        }
    }
    Ok((avg, w))
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapMethod {
    ClosedForm,
    Sgd(SgdOptions),
}

/// One mapped point with the fallback flag of its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedPoint {
    pub point: Vec<f64>,
    pub fallback_used: bool,
}

/// Maps every point of `points`. SGD seeds are derived per point from the
/// base seed and the point index, so output is independent of `exec`.
pub fn map_points(model: &TransportMapModel, points: &SampleSet, method: &MapMethod, exec: Execution) -> Result<Vec<MappedPoint>> {
    if !points.is_empty() && points.dim() != model.source_dim() {
        return Err(Error::InputShape(format!(
            "points have dimension {} but the model expects {}",
            points.dim(),
            model.source_dim()
        )));
    }
    let results = exec.map_indexed(points.len(), |i| {
        let x = points.row(i);
        match method {
            MapMethod::ClosedForm => map_point_closed_form_weighted(model, x)
                .map(|(point, w)| MappedPoint { point, fallback_used: w.fallback_used }),
            MapMethod::Sgd(opts) => {
                let opts = SgdOptions { seed: point_seed(opts.seed, i), ..opts.clone() };
                map_point_sgd_with_cost(model, x, &model.cost_kind, &opts)
                    .map(|(point, w)| MappedPoint { point, fallback_used: w.fallback_used })
            }
        }
    });
    results.into_iter().collect()
}

fn point_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
