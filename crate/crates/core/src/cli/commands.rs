use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::io::{digests, manifest_path, matrix_rows, read_dataset, read_json, read_matrix, read_points, rows_matrix, write_atomic, write_json, RunManifest};
use super::{DomainAdaptArgs, EmdArgs, EvalGaussianArgs, Failure, KernelArg, MapArgs, MapCostArg, MapMethodArg, Outcome, SampleComplexityArgs, SolveArgs};
use crate::embeddings::CostMatrix;
use crate::experiments::{
    run_domain_adaptation, run_gaussian_experiment, run_sample_complexity_study, DomainAdaptationOptions, ExperimentReport,
    GaussianExperimentOptions, SampleComplexityOptions, SolverMethod,
};
use crate::kernels::{gram, GramMatrix, KernelSpec};
use crate::solvers::{solve_emd_exact, transport_cost, PlanCoefficients, SolverConfig};
use crate::transport_map::{map_points, MapCost, MapMethod, SgdOptions, TransportMapModel};
use crate::{Execution, SampleSet};

/// The document written by `solve`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct PlanDoc {
    pub method: SolverMethod,
    pub kernel: KernelSpec,
    pub alpha: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<Vec<f64>>>,
    pub objective: f64,
    pub transport_cost: f64,
    pub converged: bool,
    pub trace: TraceSummary,
    pub config: SolverConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct TraceSummary {
    pub iters_used: usize,
    pub final_objective: Option<f64>,
    pub final_gap_or_residual: Option<f64>,
}

impl PlanDoc {
    fn coefficients(&self) -> Result<PlanCoefficients, Failure> {
        let opt = |rows: &Option<Vec<Vec<f64>>>, what| rows.as_deref().map(|r| rows_matrix(r, what)).transpose();
        Ok(PlanCoefficients {
            alpha: rows_matrix(&self.alpha, "alpha")?,
            beta: opt(&self.beta, "beta")?,
            gamma: opt(&self.gamma, "gamma")?,
        })
    }
}

#[derive(Debug, Serialize)]
struct EmdDoc {
    coupling: Vec<Vec<f64>>,
    objective: f64,
    pivots: usize,
}

fn kernel_spec(kind: KernelArg, sigma: Option<f64>) -> Result<KernelSpec, Failure> {
    match (kind, sigma) {
        (KernelArg::Gaussian, Some(s)) => Ok(KernelSpec::gaussian(s)?),
        (KernelArg::Gaussian, None) => Err(Failure("--kernel gaussian needs --sigma".into())),
        (KernelArg::Delta, _) => Ok(KernelSpec::KroneckerDelta),
    }
}

fn finish_manifest<A: Serialize>(
    command: &str,
    args: &A,
    seed: u64,
    inputs: &[&Path],
    outputs: &[&Path],
    start: Instant,
    record_runtimes: Option<Vec<Option<f64>>>,
) -> Result<(), Failure> {
    let manifest = RunManifest {
        command: command.into(),
        parameters: serde_json::to_value(args).map_err(|e| Failure(format!("serializing parameters: {e}")))?,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        input_digests: digests(inputs)?,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        runtime_seconds: start.elapsed().as_secs_f64(),
        record_runtimes,
    };
    write_json(&manifest_path(outputs[0]), &manifest)
}

/// Cost from `sqeuclidean` and both point sets, or from a matrix file.
fn load_cost(spec: &str, source: Option<&SampleSet>, target: Option<&SampleSet>) -> Result<(CostMatrix, Option<&'static str>), Failure> {
    if spec == "sqeuclidean" {
        match (source, target) {
            (Some(s), Some(t)) => Ok((CostMatrix::squared_euclidean(s, t)?, None)),
            _ => Err(Failure("--cost sqeuclidean needs --source and --target".into())),
        }
    } else {
        let c = CostMatrix::user_supplied(read_matrix(Path::new(spec))?)?;
        Ok((c, Some("file")))
    }
}

pub(super) fn solve(a: &SolveArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let kernel = kernel_spec(a.kernel, a.sigma)?;
    let source = a.source.as_deref().map(read_points).transpose()?;
    let target = a.target.as_deref().map(read_points).transpose()?;
    let (cost, from_file) = load_cost(&a.cost, source.as_ref(), target.as_ref())?;
    let (m, n) = (cost.nrows(), cost.ncols());
    if m == 0 || n == 0 {
        return Err(Failure("the problem has no points".into()));
    }
    let (g1, g2) = match (&source, &target) {
        (Some(s), Some(t)) => {
            if s.len() != m || t.len() != n {
                return Err(Failure(format!("cost is {m}x{n} but there are {} source and {} target points", s.len(), t.len())));
            }
            (gram(&kernel, s, s)?, gram(&kernel, t, t)?)
        }
        (None, None) if kernel == KernelSpec::KroneckerDelta => (GramMatrix::identity(m), GramMatrix::identity(n)),
        _ => return Err(Failure("--source and --target are both required unless --kernel delta is used with a cost file".into())),
    };
    let cfg = a.solver.config(a.method);
    let method = SolverMethod::from(a.method);
    let (plan, trace) = method.solve(&cost, &g1, &g2, &cfg)?;
    let objective = crate::solvers::penalized_objective(&plan.alpha, &cost, &g1, &g2, &cfg)?;
    let doc = PlanDoc {
        method,
        kernel,
        alpha: matrix_rows(&plan.alpha),
        beta: plan.beta.as_ref().map(matrix_rows),
        gamma: plan.gamma.as_ref().map(matrix_rows),
        objective,
        transport_cost: transport_cost(&plan.alpha, &cost),
        converged: trace.converged,
        trace: TraceSummary {
            iters_used: trace.iters_used,
            final_objective: trace.final_objective(),
            final_gap_or_residual: trace.final_gap_or_residual(),
        },
        config: cfg,
    };
    write_json(&a.out, &doc)?;
    let mut outputs: Vec<&Path> = vec![&a.out];
    if let Some(model_path) = &a.emit_model {
        let (Some(s), Some(t)) = (source, target) else {
            return Err(Failure("--emit-model needs --source and --target".into()));
        };
        let model = TransportMapModel::from_plan(&plan, &g1, s, t, kernel, MapCost::SquaredEuclidean, a.beta.derivation())?;
        write_json(model_path, &model)?;
        outputs.push(model_path);
    }
    let mut inputs: Vec<&Path> = a.source.iter().chain(&a.target).map(|p| p.as_path()).collect();
    if from_file.is_some() {
        inputs.push(Path::new(&a.cost));
    }
    finish_manifest("solve", a, a.solver.seed, &inputs, &outputs, start, None)?;
    Ok(if trace.converged { Outcome::Done } else { Outcome::NotConverged })
}

pub(super) fn map(a: &MapArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let mut inputs: Vec<&Path> = Vec::new();
    let model: TransportMapModel = match (&a.model, &a.plan) {
        (Some(path), None) => {
            inputs.push(path);
            read_json(path)?
        }
        (None, Some(plan_path)) => {
            let (Some(src), Some(tgt)) = (&a.source, &a.target) else {
                return Err(Failure("--plan needs --source and --target".into()));
            };
            inputs.extend([plan_path.as_path(), src.as_path(), tgt.as_path()]);
            let doc: PlanDoc = read_json(plan_path)?;
            let plan = doc.coefficients()?;
            let xs = read_points(src)?;
            let ys = read_points(tgt)?;
            if plan.alpha.shape() != (xs.len(), ys.len()) {
                return Err(Failure(format!(
                    "plan is {}x{} but there are {} source and {} target points",
                    plan.alpha.nrows(),
                    plan.alpha.ncols(),
                    xs.len(),
                    ys.len()
                )));
            }
            let g1 = gram(&doc.kernel, &xs, &xs)?;
            let cost = match a.cost {
                MapCostArg::Sqeuclidean => MapCost::SquaredEuclidean,
                MapCostArg::Euclidean => MapCost::Euclidean,
            };
            TransportMapModel::from_plan(&plan, &g1, xs, ys, doc.kernel, cost, a.beta.derivation())?
        }
        _ => return Err(Failure("exactly one of --model or --plan is required".into())),
    };
    inputs.push(&a.points);
    let points = read_points(&a.points)?;
    let method = match a.method {
        MapMethodArg::Closed => MapMethod::ClosedForm,
        MapMethodArg::Sgd => MapMethod::Sgd(SgdOptions {
            steps: a.steps,
            step_scale: a.step_scale,
            seed: a.seed,
            domain_radius: a.radius,
        }),
    };
    let mapped = map_points(&model, &points, &method, Execution::default())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_fail = |e: csv::Error| Failure(format!("writing {}: {e}", a.out.display()));
    let mut header: Vec<String> = (0..model.target_dim()).map(|k| format!("y{k}")).collect();
    header.push("fallback".into());
    w.write_record(&header).map_err(csv_fail)?;
    for p in &mapped {
        let mut row: Vec<String> = p.point.iter().map(f64::to_string).collect();
        row.push(u8::from(p.fallback_used).to_string());
        w.write_record(&row).map_err(csv_fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure(format!("writing {}: {e}", a.out.display())))?;
    write_atomic(&a.out, &bytes)?;
    finish_manifest("map", a, a.seed, &inputs, &[&a.out], start, None)?;
    Ok(Outcome::Done)
}

pub(super) fn emd(a: &EmdArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let source = a.source.as_deref().map(read_points).transpose()?;
    let target = a.target.as_deref().map(read_points).transpose()?;
    let (cost, from_file) = load_cost(&a.cost, source.as_ref(), target.as_ref())?;
    let sol = solve_emd_exact(&cost)?;
    write_json(&a.out, &EmdDoc { coupling: matrix_rows(&sol.coupling), objective: sol.objective, pivots: sol.pivots })?;
    let mut inputs: Vec<&Path> = a.source.iter().chain(&a.target).map(|p| p.as_path()).collect();
    if from_file.is_some() {
        inputs.push(Path::new(&a.cost));
    }
    finish_manifest("emd", a, a.seed, &inputs, &[&a.out], start, None)?;
    Ok(Outcome::Done)
}

fn write_report(
    command: &str,
    args: &impl Serialize,
    seed: u64,
    mut report: ExperimentReport,
    inputs: &[&Path],
    out: &Path,
    records_csv: Option<&Path>,
    start: Instant,
) -> Result<Outcome, Failure> {
    let runtimes = report.take_runtimes();
    write_json(out, &report)?;
    let mut outputs = vec![out];
    if let Some(path) = records_csv {
        let mut buf = Vec::new();
        report.write_records_csv(&mut buf)?;
        write_atomic(path, &buf)?;
        outputs.push(path);
    }
    finish_manifest(command, args, seed, inputs, &outputs, start, Some(runtimes))?;
    Ok(Outcome::Done)
}

pub(super) fn eval_gaussian(a: &EvalGaussianArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let opts = GaussianExperimentOptions {
        d: a.dim,
        m_values: a.samples.clone(),
        sigmas: a.sigma.clone(),
        repeats: a.repeats,
        cfg: a.solver.config(a.method),
        oos_count: a.oos,
        seed: a.solver.seed,
        solver: a.method.into(),
        beta: a.beta.derivation(),
        exec: Execution::default(),
    };
    let report = run_gaussian_experiment(&opts)?;
    write_report("eval-gaussian", a, a.solver.seed, report, &[], &a.out, a.records_csv.as_deref(), start)
}

pub(super) fn sample_complexity(a: &SampleComplexityArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let opts = SampleComplexityOptions {
        dims: a.dim.clone(),
        m_values: a.samples.clone(),
        sigma: a.sigma,
        cfg: a.solver.config(a.method),
        seed: a.solver.seed,
        ref_multiplier: a.ref_multiplier,
        repeats: a.repeats,
        solver: a.method.into(),
        exec: Execution::default(),
    };
    let report = run_sample_complexity_study(&opts)?;
    write_report("sample-complexity", a, a.solver.seed, report, &[], &a.out, None, start)
}

pub(super) fn domain_adapt(a: &DomainAdaptArgs) -> Result<Outcome, Failure> {
    let start = Instant::now();
    let source = read_dataset(&a.source)?;
    let target_train = read_dataset(&a.target_train)?;
    let target_test = read_dataset(&a.target_test)?;
    let oos = a.oos_source.as_deref().map(read_dataset).transpose()?;
    let opts = DomainAdaptationOptions {
        sigma: a.sigma,
        cfg: a.solver.config(a.method),
        solver: a.method.into(),
        beta: a.beta.derivation(),
        exec: Execution::default(),
    };
    let report = run_domain_adaptation(&source, &target_train, &target_test, oos.as_ref(), &opts)?;
    let mut inputs: Vec<&Path> = vec![&a.source, &a.target_train, &a.target_test];
    inputs.extend(a.oos_source.as_deref());
    write_report("domain-adapt", a, a.solver.seed, report, &inputs, &a.out, None, start)
}
