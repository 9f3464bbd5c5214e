//! End-to-end region-of-attraction estimation: fit, fixed points, stability,
//! unitary eigenfunctions, saddle classifiers, evaluation and boundary grids.

use crate::basis::{BasisSpec, Family};
use crate::dynamics::{to_snapshots, TrajectoryDataset};
use crate::edmd::{
    empirical_error, fit, pq_sweep, ErrorReport, FitDiagnostics, FitOptions, KoopmanModel, Propagation, SweepOptions,
    SweepRow,
};
use crate::roa::{
    analyze_fixed_points, FixedPointSearch, RoaError, balanced_accuracy, boundary_grid, calibrate_decision_list, default_starts, find_fixed_points,
    label_endpoints, sample_states, select_unitary_candidates, BoundaryGrid, CalibrationOptions, DecisionList,
    FixedPointOptions, FixedPointReport, LabeledSet, Stability, UnitaryCandidate,
};
use serde::{Deserialize, Serialize};
use std::fmt;

pub const REPORT_FORMAT: &str = "koopman-roa-report";
pub const REPORT_VERSION: u32 = 1;

/// Dictionary choice: a fixed `(p, q)` or a sweep ranked by empirical error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BasisChoice {
    Fixed { family: Family, p: u32, q: f64 },
    Sweep { family: Family, ps: Vec<u32>, qs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub basis: BasisChoice,
    #[serde(skip)]
    pub fit: FitOptions,
    pub propagation: Propagation,
    pub fixed_points: FixedPointOptions,
    /// Margin added to the data box, as a fraction of its width, when
    /// accepting fixed points.
    pub bounds_margin: f64,
    pub start_count: usize,
    pub eps_hyp: f64,
    pub calibration: CalibrationOptions,
    /// Endpoint-to-fixed-point radius for basin labels, as a multiple of the
    /// merge radius.
    pub label_radius_factor: f64,
    pub trivial_sample: usize,
    /// Calibration uses the states at steps `0, stride, 2·stride, …` up to
    /// this many steps into each labeled training trajectory.
    pub calibration_horizon: usize,
    pub calibration_stride: usize,
    /// Boundary grid resolution per axis for planar systems; 0 disables grids.
    pub grid_resolution: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            basis: BasisChoice::Fixed {
                family: Family::Laguerre,
                p: 3,
                q: 1.1,
            },
            fit: FitOptions::default(),
            propagation: Propagation::default(),
            fixed_points: FixedPointOptions::default(),
            bounds_margin: 0.05,
            start_count: 64,
            eps_hyp: 1e-3,
            calibration: CalibrationOptions::default(),
            label_radius_factor: 10.0,
            trivial_sample: 5000,
            calibration_horizon: 0,
            calibration_stride: 1,
            grid_resolution: 200,
            seed: 0,
        }
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fit,
    Error,
    FixedPoints,
    Stability,
    Unitary,
    Classifier,
    Evaluation,
    Boundary,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Fit => "fit",
            Stage::Error => "error",
            Stage::FixedPoints => "fixed-points",
            Stage::Stability => "stability",
            Stage::Unitary => "unitary",
            Stage::Classifier => "classifier",
            Stage::Evaluation => "evaluation",
            Stage::Boundary => "boundary",
        };
        f.write_str(s)
    }
}

/// Basin labels compared against trajectory-derived truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Basin labels (fixed-point indices) indexing the confusion matrix.
    pub classes: Vec<usize>,
    /// `confusion[t][p]`: points of true class `classes[t]` labeled `classes[p]`.
    pub confusion: Vec<Vec<usize>>,
    pub evaluated: usize,
    pub correct: usize,
    pub unresolved: usize,
    pub cross_branch: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

impl Evaluation {
    pub fn misclassified_fraction(&self) -> f64 {
        1.0 - self.accuracy
    }
}

/// Compares predicted labels with truth; `None` truth entries are unresolved.
pub fn evaluate_labels(
    classes: &[usize],
    truth: &[Option<usize>],
    predicted: &[usize],
    cross_branch: &[bool],
) -> Evaluation {
    let k = classes.len();
    let pos = |l: usize| classes.iter().position(|&c| c == l);
    let mut confusion = vec![vec![0usize; k]; k];
    let (mut t_all, mut p_all) = (Vec::new(), Vec::new());
    let mut unresolved = 0;
    let mut crossed = 0;
    for ((t, &p), &cb) in truth.iter().zip(predicted).zip(cross_branch) {
        let Some(t) = *t else {
            unresolved += 1;
            continue;
        };
        if let (Some(ti), Some(pi)) = (pos(t), pos(p)) {
            confusion[ti][pi] += 1;
        }
        crossed += usize::from(cb);
        t_all.push(t);
        p_all.push(p);
    }
    let evaluated = t_all.len();
    let correct = t_all.iter().zip(&p_all).filter(|(a, b)| a == b).count();
    Evaluation {
        classes: classes.to_vec(),
        confusion,
        evaluated,
        correct,
        unresolved,
        cross_branch: crossed,
        accuracy: if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 },
        balanced_accuracy: balanced_accuracy(&t_all, &p_all),
    }
}

/// Everything the pipeline produced, including partial results on failure.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PipelineReport {
    pub format: String,
    pub version: u32,
    pub config: Option<PipelineConfig>,
    pub sweep: Vec<SweepRow>,
    pub basis: Option<BasisSpec>,
    pub fit: Option<FitDiagnostics>,
    pub error: Option<ErrorReport>,
    pub fixed_points: Vec<FixedPointReport>,
    pub best_rejected_residual: Option<f64>,
    pub candidates: Vec<UnitaryCandidate>,
    pub decision_list: Option<DecisionList>,
    pub training: Option<Evaluation>,
    pub test: Option<Evaluation>,
    pub grids: Vec<BoundaryGrid>,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub model: Option<KoopmanModel>,
}

impl PipelineReport {
    pub fn stable_points(&self) -> Vec<(usize, Vec<f64>)> {
        self.fixed_points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.stability == Some(Stability::AsymptoticallyStable))
            .map(|(i, p)| (i, p.location.clone()))
            .collect()
    }

    pub fn saddles(&self) -> Vec<&FixedPointReport> {
        self.fixed_points
            .iter()
            .filter(|p| p.stability == Some(Stability::Saddle(1)))
            .collect()
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        serde_json::to_string_pretty(self)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("pipeline stopped at stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    pub partial: Box<PipelineReport>,
}

struct Run {
    report: PipelineReport,
}

impl Run {
    fn fail<E: fmt::Display>(self, stage: Stage, e: E) -> PipelineError {
        PipelineError {
            stage,
            message: e.to_string(),
            partial: Box::new(self.report),
        }
    }
}

fn padded(bounds: &[(f64, f64)], margin: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let m = margin * (hi - lo);
            (lo - m, hi + m)
        })
        .collect()
}

fn new_report(config: &PipelineConfig) -> PipelineReport {
    PipelineReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: Some(config.clone()),
        ..Default::default()
    }
}

/// Runs every stage in order. Any stage failure returns the stage name and
/// the report built so far. Planar systems also get one boundary grid per
/// classifier.
pub fn run_pipeline(
    train: &TrajectoryDataset,
    test: &TrajectoryDataset,
    config: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    let mut run = Run {
        report: new_report(config),
    };
    if let Err(e) = train.validate().and_then(|_| test.validate()) {
        return Err(run.fail(Stage::Fit, e));
    }
    let pairs = to_snapshots(train);

    let spec = match &config.basis {
        BasisChoice::Fixed { family, p, q } => match BasisSpec::truncated(*family, pairs.n, *p, *q) {
            Ok(s) => s,
            Err(e) => return Err(run.fail(Stage::Fit, e)),
        },
        BasisChoice::Sweep { family, ps, qs } => {
            let opts = SweepOptions {
                fit: config.fit,
                propagation: config.propagation,
            };
            match pq_sweep(&pairs, test, ps, qs, *family, &opts) {
                Ok(rows) => {
                    let best = rows[0].clone();
                    run.report.sweep = rows;
                    match BasisSpec::truncated(*family, pairs.n, best.p, best.q) {
                        Ok(s) => s,
                        Err(e) => return Err(run.fail(Stage::Fit, e)),
                    }
                }
                Err(e) => return Err(run.fail(Stage::Fit, e)),
            }
        }
    };
    let model = match fit(&pairs, &spec, &config.fit) {
        Ok(m) => m,
        Err(e) => return Err(run.fail(Stage::Fit, e)),
    };
    run.report.basis = Some(model.spec.clone());
    run.report.fit = Some(model.diagnostics.clone());
    run.report.model = Some(model.clone());

    match empirical_error(&model, test, config.propagation) {
        Ok(r) => run.report.error = Some(r),
        Err(e) => return Err(run.fail(Stage::Error, e)),
    }
    analyze(run, &model, train, Some(test), config)
}

/// Runs the stages after fitting on an existing model: fixed points,
/// stability, unitary candidates, classifiers, evaluation and grids. Without
/// `test`, only the training trajectories are evaluated.
pub fn analyze_model(
    model: &KoopmanModel,
    train: &TrajectoryDataset,
    test: Option<&TrajectoryDataset>,
    config: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    let mut run = Run {
        report: new_report(config),
    };
    if let Err(e) = train.validate().and_then(|_| test.map_or(Ok(()), |t| t.validate())) {
        return Err(run.fail(Stage::FixedPoints, e));
    }
    if train.dim() != model.state_dim() {
        let msg = format!("data has dimension {}, model expects {}", train.dim(), model.state_dim());
        return Err(run.fail(Stage::FixedPoints, msg));
    }
    run.report.basis = Some(model.spec.clone());
    run.report.fit = Some(model.diagnostics.clone());
    run.report.model = Some(model.clone());
    analyze(run, model, train, test, config)
}

/// Fixed points and their stability, with starts drawn from `train`.
pub fn locate_fixed_points(
    model: &KoopmanModel,
    train: &TrajectoryDataset,
    config: &PipelineConfig,
) -> Result<FixedPointSearch, RoaError> {
    let mut search = search_fixed_points(model, train, config)?;
    analyze_fixed_points(model, &mut search.points, config.eps_hyp)?;
    Ok(search)
}

fn search_fixed_points(
    model: &KoopmanModel,
    train: &TrajectoryDataset,
    config: &PipelineConfig,
) -> Result<FixedPointSearch, RoaError> {
    let mut fp_opts = config.fixed_points.clone();
    if fp_opts.bounds.is_none() {
        fp_opts.bounds = Some(padded(&train.bounds(), config.bounds_margin));
    }
    let starts = default_starts(&to_snapshots(train), config.start_count, config.seed);
    find_fixed_points(model, &starts, &fp_opts)
}

fn analyze(
    mut run: Run,
    model: &KoopmanModel,
    train: &TrajectoryDataset,
    test: Option<&TrajectoryDataset>,
    config: &PipelineConfig,
) -> Result<PipelineReport, PipelineError> {
    let pairs = to_snapshots(train);
    let search = match search_fixed_points(model, train, config) {
        Ok(s) => s,
        Err(e) => return Err(run.fail(Stage::FixedPoints, e)),
    };
    run.report.best_rejected_residual = search.best_rejected;
    let mut points = search.points;
    if points.is_empty() {
        let best = search.best_rejected.map_or("none".to_string(), |j| format!("{j:.3e}"));
        return Err(run.fail(
            Stage::FixedPoints,
            format!("no fixed points found (best rejected residual {best})"),
        ));
    }
    if let Err(e) = analyze_fixed_points(model, &mut points, config.eps_hyp) {
        run.report.fixed_points = points;
        return Err(run.fail(Stage::Stability, e));
    }
    run.report.fixed_points = points;

    let stable = run.report.stable_points();
    let radius = config.label_radius_factor * config.fixed_points.merge_radius;
    let train_truth = label_endpoints(train, &stable, radius);
    let mut basins: Vec<usize> = train_truth.iter().flatten().copied().collect();
    basins.sort_unstable();
    basins.dedup();
    let saddles: Vec<FixedPointReport> = run.report.saddles().into_iter().cloned().collect();
    if saddles.is_empty() || basins.len() < 2 {
        run.report
            .notes
            .push("single basin of attraction: no boundary to estimate".into());
        return Ok(run.report);
    }

    let states = sample_states(&pairs, config.trivial_sample);
    let candidates = match select_unitary_candidates(model, &states, &config.calibration.unitary) {
        Ok(c) => c,
        Err(e) => return Err(run.fail(Stage::Unitary, e)),
    };
    run.report.candidates = candidates.clone();

    // Labels and unitary eigenfunctions are both constant along trajectories,
    // so early states of a labeled trajectory are labeled points as well.
    let stride = config.calibration_stride.max(1);
    let (cal_states, cal_labels): (Vec<Vec<f64>>, Vec<usize>) = train
        .trajectories
        .iter()
        .zip(&train_truth)
        .filter_map(|(t, l)| l.map(|l| (t, l)))
        .flat_map(|(t, l)| {
            let last = config.calibration_horizon.min(t.states.len() - 1);
            (0..=last).step_by(stride).map(move |k| (t.states[k].clone(), l))
        })
        .unzip();
    let labeled = match LabeledSet::new(model, cal_states, cal_labels) {
        Ok(l) => l,
        Err(e) => return Err(run.fail(Stage::Classifier, e)),
    };
    let list = match calibrate_decision_list(model, &candidates, &saddles, &labeled, &config.calibration) {
        Ok(l) => l,
        Err(e) => return Err(run.fail(Stage::Classifier, e)),
    };
    run.report.decision_list = Some(list.clone());

    let classes: Vec<usize> = stable.iter().map(|s| s.0).collect();
    let evaluate = |data: &TrajectoryDataset| -> Result<Evaluation, String> {
        let truth = label_endpoints(data, &stable, radius);
        let mut predicted = Vec::with_capacity(data.len());
        let mut cross = Vec::with_capacity(data.len());
        for t in &data.trajectories {
            let psi = model.lift(&t.states[0]).map_err(|e| e.to_string())?;
            let l = list.classify_psi(&psi);
            predicted.push(l.label);
            cross.push(l.cross_branch);
        }
        Ok(evaluate_labels(&classes, &truth, &predicted, &cross))
    };
    match evaluate(train) {
        Ok(a) => run.report.training = Some(a),
        Err(e) => return Err(run.fail(Stage::Evaluation, e)),
    }
    if let Some(test) = test {
        match evaluate(test) {
            Ok(b) => run.report.test = Some(b),
            Err(e) => return Err(run.fail(Stage::Evaluation, e)),
        }
    }

    if pairs.n == 2 && config.grid_resolution >= 2 {
        let b = train.bounds();
        for c in &list.classifiers {
            let res = (config.grid_resolution, config.grid_resolution);
            match boundary_grid(model, &c.unitary, &c.saddle, (0, 1), [b[0], b[1]], res, &c.saddle) {
                Ok(g) => {
                    if let Some(d) = &g.diagnostic {
                        run.report.notes.push(format!("empty boundary contour: {d}"));
                    }
                    run.report.grids.push(g);
                }
                Err(e) => return Err(run.fail(Stage::Boundary, e)),
            }
        }
    }
    Ok(run.report)
}
