use std::collections::BTreeSet;
use std::time::Instant;

use super::{DomainAdaptationResult, ExperimentReport, LabeledDataset, RunRecord, SolverMethod};
use crate::embeddings::CostMatrix;
use crate::kernels::{gram_with, KernelSpec};
use crate::samples::squared_distance;
use crate::solvers::SolverConfig;
use crate::transport_map::{map_points, BetaDerivation, MapCost, MapMethod, TransportMapModel};
use crate::{Error, Execution, Result, SampleSet};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainAdaptationOptions {
    pub sigma: f64,
    pub cfg: SolverConfig,
    pub solver: SolverMethod,
    pub beta: BetaDerivation,
    pub exec: Execution,
}

impl Default for DomainAdaptationOptions {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            cfg: SolverConfig::default(),
            solver: SolverMethod::Fw,
            beta: BetaDerivation::default(),
            exec: Execution::default(),
        }
    }
}

/// 1-NN prediction with Euclidean distance; ties go to the smallest
/// training index.
pub fn nearest_neighbor_labels(train: &SampleSet, labels: &[i64], queries: &SampleSet, exec: Execution) -> Result<Vec<i64>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("1-NN training set is empty"));
    }
    if labels.len() != train.len() {
        return Err(Error::InputShape(format!("{} labels for {} training points", labels.len(), train.len())));
    }
    if !queries.is_empty() && queries.dim() != train.dim() {
        return Err(Error::InputShape(format!("queries have dimension {} but training points {}", queries.dim(), train.dim())));
    }
    Ok(exec.map_indexed(queries.len(), |q| {
        let x = queries.row(q);
        let mut best = (f64::INFINITY, 0);
        for (i, t) in train.rows().enumerate() {
            let d = squared_distance(x, t);
            if d < best.0 {
                best = (d, i);
            }
        }
        labels[best.1]
    }))
}

fn require_labels<'a>(d: &'a LabeledDataset, what: &str) -> Result<&'a [i64]> {
    d.labels.as_deref().ok_or_else(|| Error::Dataset(format!("{what} needs a label column")))
}

fn accuracy(pred: &[i64], truth: &[i64]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Transports labeled source points onto the target domain with the
/// closed-form map, then classifies `target_test` by 1-NN against them.
/// Labels of `target_train` are ignored.
pub fn run_domain_adaptation(
    source: &LabeledDataset,
    target_train: &LabeledDataset,
    target_test: &LabeledDataset,
    oos_source: Option<&LabeledDataset>,
    opts: &DomainAdaptationOptions,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    opts.cfg.validate()?;
    let kernel = KernelSpec::gaussian(opts.sigma)?;
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::EmptyInput("source and target training sets must be non-empty"));
    }
    if target_test.is_empty() {
        return Err(Error::EmptyInput("target test set is empty"));
    }
    let d = source.dim();
    let sets = [Some(target_train), Some(target_test), oos_source];
    if let Some(bad) = sets.iter().flatten().find(|s| s.dim() != d) {
        return Err(Error::InputShape(format!("feature dimensions differ: source has {d}, another set has {}", bad.dim())));
    }
    let src_labels = require_labels(source, "source set")?;
    let test_labels = require_labels(target_test, "target test set")?;
    let known: BTreeSet<i64> = src_labels.iter().copied().collect();
    let unknown: BTreeSet<i64> = test_labels.iter().copied().filter(|l| !known.contains(l)).collect();
    if !unknown.is_empty() {
        return Err(Error::Dataset(format!("test labels {unknown:?} do not occur in the source set")));
    }
    let oos_source = oos_source.filter(|s| !s.is_empty());
    let oos_labels = oos_source.map(|s| require_labels(s, "out-of-sample source set")).transpose()?;

    let xs = &source.features;
    let ys = &target_train.features;
    let g1 = gram_with(&kernel, xs, xs, opts.exec)?;
    let g2 = gram_with(&kernel, ys, ys, opts.exec)?;
    let c = CostMatrix::squared_euclidean(xs, ys)?;
    let (plan, trace) = opts.solver.solve(&c, &g1, &g2, &opts.cfg)?;
    let model = TransportMapModel::from_plan(&plan, &g1, xs.clone(), ys.clone(), kernel, MapCost::SquaredEuclidean, opts.beta)?;

    let transfer = |points: &SampleSet, labels: &[i64]| -> Result<(f64, usize)> {
        let mapped = map_points(&model, points, &MapMethod::ClosedForm, opts.exec)?;
        let fallbacks = mapped.iter().filter(|p| p.fallback_used).count();
        let rows: Vec<Vec<f64>> = mapped.into_iter().map(|p| p.point).collect();
        let train = SampleSet::from_rows(&rows)?;
        let pred = nearest_neighbor_labels(&train, labels, &target_test.features, opts.exec)?;
        Ok((accuracy(&pred, test_labels), fallbacks))
    };
    let (accuracy_in_sample, mut fallback_count) = transfer(xs, src_labels)?;
    let accuracy_oos = match (oos_source, oos_labels) {
        (Some(s), Some(l)) => {
            let (acc, fb) = transfer(&s.features, l)?;
            fallback_count += fb;
            Some(acc)
        }
        _ => None,
    };

    let mut rec = RunRecord::new(opts.cfg.seed, source.len(), d, opts.sigma);
    rec.objective = trace.final_objective();
    rec.converged = Some(trace.converged);
    rec.iters_used = Some(trace.iters_used);
    rec.gram_condition = g1.condition_number().zip(g2.condition_number()).map(|(a, b)| [a, b]);
    rec.runtime_seconds = Some(start.elapsed().as_secs_f64());
    let mut report = ExperimentReport::from_records("domain_adaptation", opts.solver, opts.cfg.clone(), vec![rec]);
    report.aggregates.clear();
    report.domain_adaptation = Some(DomainAdaptationResult {
        sigma: opts.sigma,
        n_source: source.len(),
        n_target_train: target_train.len(),
        n_target_test: target_test.len(),
        accuracy_in_sample,
        accuracy_oos,
        converged: trace.converged,
        fallback_count,
    });
    Ok(report)
}
