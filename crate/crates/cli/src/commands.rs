//! Subcommand implementations. Each returns a `Failure` carrying its exit code.

use crate::{BoundaryArgs, ClassifyArgs, Failure, FitArgs, FixedPointArgs, PipelineArgs, SimulateArgs, Tolerances};
use koopman_roa::basis::{BasisSpec, Family};
use koopman_roa::dynamics::{
    default_t_final, generate, load_csv, sample_initial_conditions, save_csv, split, stage_seed, to_snapshots,
    Competition, DynamicsError, MassActionReactor, OdeModel, TrajectoryDataset,
};
use koopman_roa::edmd::{
    empirical_error, fit as fit_model, load_model, pq_sweep, save_model, EdmdError, FitOptions, KoopmanModel,
    Propagation, SweepOptions,
};
use koopman_roa::pipeline::{
    analyze_model, locate_fixed_points, run_pipeline, BasisChoice, Evaluation, PipelineConfig, PipelineError,
    PipelineReport, Stage,
};
use koopman_roa::roa::{
    analyze_fixed_points, boundary_grid, classify_points, find_fixed_points, label_endpoints, FixedPointReport, FixedPointSearch, UnitaryEigenfunction,
};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

const DEFAULT_SPLIT: f64 = 0.5;

// ------------------------------------------------------------------ parsing

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|e| Failure::Usage(format!("invalid {what} entry {v:?}: {e}")))
        })
        .collect()
}

/// `lo,hi` intervals joined by `x`, e.g. `0,2x0,2`.
fn parse_box(s: &str) -> Result<Vec<(f64, f64)>, Failure> {
    s.split('x')
        .map(|part| match parse_list::<f64>(part, "box")?.as_slice() {
            &[lo, hi] if lo <= hi => Ok((lo, hi)),
            _ => Err(Failure::Usage(format!("invalid box interval {part:?} (expected lo,hi with lo <= hi)"))),
        })
        .collect()
}

fn parse_array<const N: usize>(s: &str, what: &str) -> Result<[f64; N], Failure> {
    let v = parse_list::<f64>(s, what)?;
    v.as_slice()
        .try_into()
        .map_err(|_| Failure::Usage(format!("{what} needs {N} values, got {}", v.len())))
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("missing required option --{flag}")))
}

fn positive(v: Option<f64>, flag: &str) -> Result<Option<f64>, Failure> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(Failure::Usage(format!("--{flag} must be positive, got {x}"))),
        o => Ok(o),
    }
}

fn distinct(input: &Path, output: &Path) -> Result<(), Failure> {
    let same = input == output
        || matches!((input.canonicalize(), output.canonicalize()), (Ok(a), Ok(b)) if a == b);
    if same {
        return Err(Failure::Usage(format!("output {} would overwrite an input", output.display())));
    }
    Ok(())
}

// ------------------------------------------------------------------ loading

fn data_failure(e: DynamicsError) -> Failure {
    match e {
        DynamicsError::NonFinite => Failure::Numerical(e.to_string()),
        e => Failure::Usage(e.to_string()),
    }
}

fn load_data(path: &Path) -> Result<TrajectoryDataset, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("data file {} does not exist", path.display())));
    }
    let data = load_csv(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    data.validate().map_err(data_failure)?;
    Ok(data)
}

fn load(path: &Path) -> Result<KoopmanModel, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("model file {} does not exist", path.display())));
    }
    load_model(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn check_dim(model: &KoopmanModel, data: &TrajectoryDataset) -> Result<(), Failure> {
    if model.state_dim() != data.dim() {
        return Err(Failure::Usage(format!(
            "data has dimension {}, model expects {}",
            data.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

fn split_data(
    data: &TrajectoryDataset,
    fraction: Option<f64>,
    seed: u64,
) -> Result<(TrajectoryDataset, TrajectoryDataset), Failure> {
    split(data, fraction.unwrap_or(DEFAULT_SPLIT), stage_seed(seed, "split")).map_err(data_failure)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn edmd_failure(e: EdmdError) -> Failure {
    match e {
        EdmdError::EmptyTestSet | EdmdError::EmptySweep => Failure::Usage(e.to_string()),
        EdmdError::Basis(_) => Failure::Usage(e.to_string()),
        e => Failure::Numerical(e.to_string()),
    }
}

// ------------------------------------------------------------------ config

fn pipeline_config(tol: &Tolerances, seed: u64) -> Result<PipelineConfig, Failure> {
    let mut cfg = PipelineConfig {
        seed: stage_seed(seed, "starts"),
        ..Default::default()
    };
    if let Some(v) = positive(tol.tol_j, "tol-j")? {
        cfg.fixed_points.tol_j = v;
    }
    if let Some(v) = positive(tol.merge_radius, "merge-radius")? {
        cfg.fixed_points.merge_radius = v;
    }
    if let Some(v) = positive(tol.eps_hyp, "eps-hyp")? {
        cfg.eps_hyp = v;
    }
    if let Some(v) = positive(tol.eps_unit, "eps-unit")? {
        cfg.calibration.unitary.eps_unit = v;
    }
    Ok(cfg)
}

fn family(args: &FitArgs) -> Result<Family, Failure> {
    args.family
        .as_deref()
        .map_or(Ok(Family::Laguerre), |s| s.parse().map_err(|e| Failure::Usage(format!("{e}"))))
}

fn propagation(args: &FitArgs) -> Result<Propagation, Failure> {
    args.propagation
        .as_deref()
        .map_or(Ok(Propagation::default()), |s| s.parse().map_err(Failure::Usage))
}

fn fit_options(args: &FitArgs) -> Result<FitOptions, Failure> {
    let mut o = FitOptions::default();
    if let Some(r) = positive(args.rtol, "rtol")? {
        o.rtol = r;
    }
    Ok(o)
}

fn basis_choice(args: &FitArgs) -> Result<BasisChoice, Failure> {
    let family = family(args)?;
    let p = args.p.unwrap_or(3);
    let q = positive(args.q, "q")?.unwrap_or(1.1);
    if args.sweep_p.is_none() && args.sweep_q.is_none() {
        return Ok(BasisChoice::Fixed { family, p, q });
    }
    let ps = args
        .sweep_p
        .as_deref()
        .map_or(Ok(vec![p]), |s| parse_list::<u32>(s, "sweep-p"))?;
    let qs = args
        .sweep_q
        .as_deref()
        .map_or(Ok(vec![q]), |s| parse_list::<f64>(s, "sweep-q"))?;
    if qs.iter().any(|&v| !(v > 0.0)) {
        return Err(Failure::Usage("sweep-q entries must be positive".into()));
    }
    Ok(BasisChoice::Sweep { family, ps, qs })
}

// ---------------------------------------------------------------- simulate

/// Integrates a built-in model. Initial conditions use `stage_seed(seed, "simulate")`.
pub fn simulate(a: SimulateArgs) -> Result<(), Failure> {
    let out = require(a.out, "out")?;
    let name = a.model.as_deref().unwrap_or("competition");
    let model: Box<dyn OdeModel> = match name {
        "competition" => {
            let mut m = Competition::default();
            if let Some(r) = &a.r {
                m.r = parse_array::<6>(r, "r")?;
            }
            Box::new(m)
        }
        "mak" => {
            let mut m = MassActionReactor::default();
            if let Some(k) = &a.k {
                m.k = parse_array::<4>(k, "k")?;
            }
            if let Some(d) = a.d {
                m.dilution = d;
            }
            Box::new(m)
        }
        o => return Err(Failure::Usage(format!("unknown model {o:?} (expected competition or mak)"))),
    };
    let bounds = match &a.bounds {
        Some(b) => parse_box(b)?,
        None if name == "mak" => MassActionReactor::default().initial_box(),
        None => Competition::default().initial_box(),
    };
    if bounds.len() != model.dim() {
        return Err(Failure::Usage(format!(
            "box has {} intervals, model {name} has dimension {}",
            bounds.len(),
            model.dim()
        )));
    }
    let count = a.count.unwrap_or(200);
    if count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let dt = positive(a.dt, "dt")?.unwrap_or(0.1);
    let t_final = positive(a.t_final, "t-final")?.unwrap_or_else(|| default_t_final(name));
    let seed = a.seed.unwrap_or(0);
    let sim = generate(model.as_ref(), &bounds, count, dt, t_final, stage_seed(seed, "simulate")).map_err(|e| match e {
        DynamicsError::EmptyDataset => Failure::Numerical("every trajectory diverged or left the domain".into()),
        e => data_failure(e),
    })?;
    if sim.dataset.is_empty() {
        return Err(Failure::Numerical("every trajectory diverged or left the domain".into()));
    }
    save_csv(&sim.dataset, &out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    println!(
        "{} trajectories, {} samples, {} truncated -> {}",
        sim.dataset.len(),
        sim.dataset.sample_count(),
        sim.truncations.len(),
        out.display()
    );
    Ok(())
}

// --------------------------------------------------------------------- fit

pub fn fit(a: FitArgs) -> Result<(), Failure> {
    let data_path = require(a.data.clone(), "data")?;
    if let Some(out) = &a.out {
        distinct(&data_path, out)?;
    }
    let data = load_data(&data_path)?;
    let (train, test) = split_data(&data, a.split, a.seed.unwrap_or(0))?;
    let pairs = to_snapshots(&train);
    let opts = fit_options(&a)?;
    let prop = propagation(&a)?;
    let spec = match basis_choice(&a)? {
        BasisChoice::Fixed { family, p, q } => {
            BasisSpec::truncated(family, pairs.n, p, q).map_err(|e| Failure::Usage(e.to_string()))?
        }
        BasisChoice::Sweep { family, ps, qs } => {
            let rows = pq_sweep(&pairs, &test, &ps, &qs, family, &SweepOptions { fit: opts, propagation: prop })
                .map_err(edmd_failure)?;
            println!("{:>3} {:>6} {:>5} {:>12}  note", "p", "q", "d", "e");
            for r in &rows {
                println!(
                    "{:>3} {:>6} {:>5} {:>12.4e}  {}",
                    r.p,
                    r.q,
                    r.d,
                    r.e,
                    r.failure.as_deref().unwrap_or("")
                );
            }
            let best = &rows[0];
            BasisSpec::truncated(family, pairs.n, best.p, best.q).map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    let model = fit_model(&pairs, &spec, &opts).map_err(edmd_failure)?;
    let err = empirical_error(&model, &test, prop).map_err(edmd_failure)?;
    let d = &model.diagnostics;
    println!(
        "{} basis, d = {}, rank {}, solver {:?}, residual {:.3e}, empirical error {:.4e} on {} trajectories",
        model.spec.family.name(),
        model.dim(),
        d.rank,
        d.solver,
        d.residual,
        err.e,
        err.trajectories
    );
    for w in &d.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(out) = &a.out {
        save_model(&model, out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
        println!("model -> {}", out.display());
    }
    Ok(())
}

// ------------------------------------------------------------ fixed points

fn print_points(points: &[FixedPointReport]) {
    println!("{:>3}  {:<40} {:>10}  {:<24} class", "#", "location", "J", "|λ|");
    for (i, p) in points.iter().enumerate() {
        let loc = p.location.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ");
        let mags = p.magnitudes.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ");
        println!(
            "{i:>3}  {:<40} {:>10.2e}  {:<24} {}",
            format!("({loc})"),
            p.residual,
            format!("[{mags}]"),
            p.stability.map_or("-".into(), |s| s.short())
        );
    }
}

pub fn fixed_points(a: FixedPointArgs) -> Result<(), Failure> {
    let model_path = require(a.model, "model")?;
    let model = load(&model_path)?;
    let seed = a.seed.unwrap_or(0);
    let cfg = pipeline_config(&a.tol, seed)?;
    let numerical = |e: koopman_roa::roa::RoaError| Failure::Numerical(e.to_string());
    let search: FixedPointSearch = match &a.data {
        Some(path) => {
            let data = load_data(path)?;
            check_dim(&model, &data)?;
            locate_fixed_points(&model, &data, &cfg).map_err(numerical)?
        }
        None => {
            let bounds = model.diagnostics.data_bounds.clone();
            let padded: Vec<(f64, f64)> = bounds
                .iter()
                .map(|&(lo, hi)| (lo - cfg.bounds_margin * (hi - lo), hi + cfg.bounds_margin * (hi - lo)))
                .collect();
            let starts =
                sample_initial_conditions(&bounds, cfg.start_count, cfg.seed).map_err(data_failure)?;
            let mut opts = cfg.fixed_points.clone();
            opts.bounds = Some(padded);
            let mut s = find_fixed_points(&model, &starts, &opts).map_err(numerical)?;
            analyze_fixed_points(&model, &mut s.points, cfg.eps_hyp).map_err(numerical)?;
            s
        }
    };
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&search).map_err(|e| Failure::Numerical(e.to_string()))?;
        write_text(out, &json)?;
    }
    if search.points.is_empty() {
        let best = search.best_rejected.map_or("none".into(), |j| format!("{j:.3e}"));
        return Err(Failure::Empty(format!("no fixed points found (best rejected residual {best})")));
    }
    print_points(&search.points);
    Ok(())
}

// ---------------------------------------------------------------- classify

fn stage_failure(e: PipelineError) -> Failure {
    let msg = e.to_string();
    match e.stage {
        Stage::FixedPoints if msg.contains("no fixed points") => Failure::Empty(msg),
        Stage::Unitary | Stage::Classifier => Failure::Empty(msg),
        _ => Failure::Numerical(msg),
    }
}

fn read_points(path: &Path, n: usize) -> Result<Vec<Vec<f64>>, Failure> {
    let bad = |m: String| Failure::Usage(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let expected: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    if header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(bad(format!("header must be {}", expected.join(","))));
    }
    r.records()
        .enumerate()
        .map(|(row, rec)| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            rec.iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad(format!("row {}: invalid value {v:?}", row + 1)))
                })
                .collect()
        })
        .collect()
}

fn print_evaluation(title: &str, e: &Evaluation) {
    println!(
        "{title}: accuracy {:.3} ({} of {}), balanced {:.3}, unresolved {}, cross-branch {}",
        e.accuracy, e.correct, e.evaluated, e.balanced_accuracy, e.unresolved, e.cross_branch
    );
    let head = e.classes.iter().map(|c| format!("{c:>6}")).collect::<String>();
    println!("  truth\\pred{head}");
    for (c, row) in e.classes.iter().zip(&e.confusion) {
        println!("  {c:>10}{}", row.iter().map(|v| format!("{v:>6}")).collect::<String>());
    }
}

fn calibrated(
    model_path: Option<PathBuf>,
    data_path: Option<PathBuf>,
    fraction: Option<f64>,
    seed: u64,
    tol: &Tolerances,
) -> Result<(KoopmanModel, TrajectoryDataset, TrajectoryDataset, PipelineReport), Failure> {
    let model = load(&require(model_path, "model")?)?;
    let data = load_data(&require(data_path, "data")?)?;
    check_dim(&model, &data)?;
    let (train, test) = split_data(&data, fraction, seed)?;
    let cfg = pipeline_config(tol, seed)?;
    let report = analyze_model(&model, &train, Some(&test), &cfg).map_err(stage_failure)?;
    Ok((model, train, test, report))
}

fn write_labels(
    out: Option<&Path>,
    points: &[Vec<f64>],
    labels: &[koopman_roa::roa::PointLabel],
    truth: Option<&[Option<usize>]>,
) -> Result<(), Failure> {
    let n = points.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    header.extend(["label".into(), "score".into()]);
    if truth.is_some() {
        header.push("truth".into());
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Failure::Usage(e.to_string());
    w.write_record(&header).map_err(io)?;
    for (i, (x, l)) in points.iter().zip(labels).enumerate() {
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(l.label.to_string());
        row.push(l.score.to_string());
        if let Some(t) = truth {
            row.push(t[i].map_or(String::new(), |v| v.to_string()));
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::Usage(e.to_string()))
}

/// Labels are fixed-point indices; with `--out` absent the CSV goes to stdout
/// and the summary to stderr.
pub fn classify(a: ClassifyArgs) -> Result<(), Failure> {
    if let (Some(d), Some(o)) = (&a.data, &a.out) {
        distinct(d, o)?;
    }
    let seed = a.seed.unwrap_or(0);
    let (model, _, test, report) = calibrated(a.model, a.data, a.split, seed, &a.tol)?;
    let Some(list) = &report.decision_list else {
        let why = report.notes.first().cloned().unwrap_or_else(|| "no classifier".into());
        return Err(Failure::Empty(why));
    };
    let points = match &a.points {
        Some(p) => read_points(p, model.state_dim())?,
        None => test.trajectories.iter().map(|t| t.states[0].clone()).collect(),
    };
    let labels = classify_points(&model, list, &points).map_err(|e| Failure::Numerical(e.to_string()))?;
    let truth = a.points.is_none().then(|| {
        let radius = 10.0 * report.config.as_ref().map_or(1e-2, |c| c.fixed_points.merge_radius);
        label_endpoints(&test, &report.stable_points(), radius)
    });
    write_labels(a.out.as_deref(), &points, &labels, truth.as_deref())?;
    let summary = |s: String| {
        if a.out.is_some() {
            println!("{s}")
        } else {
            eprintln!("{s}")
        }
    };
    for (i, p) in report.stable_points() {
        let loc = p.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ");
        summary(format!("basin {i}: stable point ({loc})"));
    }
    summary(format!("{} points labeled", points.len()));
    if let Some(e) = &report.test {
        if a.out.is_some() {
            print_evaluation("held-out trajectories", e);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- boundary

pub fn boundary(a: BoundaryArgs) -> Result<(), Failure> {
    let out = require(a.out.clone(), "out")?;
    for input in [&a.model, &a.data].into_iter().flatten() {
        distinct(input, &out)?;
    }
    let seed = a.seed.unwrap_or(0);
    let axes = match a.axes.as_deref().map(|s| parse_list::<usize>(s, "axes")).transpose()? {
        None => (0, 1),
        Some(v) if v.len() == 2 => (v[0], v[1]),
        Some(_) => return Err(Failure::Usage("--axes needs two coordinates".into())),
    };
    let resolution = a.resolution.unwrap_or(200);
    if resolution < 2 {
        return Err(Failure::Usage("--resolution must be at least 2".into()));
    }
    let frozen_arg = a.frozen.as_deref().map(|s| parse_list::<f64>(s, "frozen")).transpose()?;

    let (model, data_bounds, unitary, level_point): (KoopmanModel, Vec<(f64, f64)>, UnitaryEigenfunction, Vec<f64>) =
        if a.trivial.unwrap_or(false) {
            let model = load(&require(a.model, "model")?)?;
            let data = load_data(&require(a.data, "data")?)?;
            check_dim(&model, &data)?;
            let u = UnitaryEigenfunction::constant();
            let b = data.bounds();
            let centre = frozen_arg
                .clone()
                .unwrap_or_else(|| b.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect());
            (model, b, u, centre)
        } else {
            let (model, train, _, report) = calibrated(a.model, a.data, a.split, seed, &a.tol)?;
            let Some(list) = &report.decision_list else {
                let why = report.notes.first().cloned().unwrap_or_else(|| "no classifier".into());
                return Err(Failure::Empty(why));
            };
            let stage = a.stage.unwrap_or(0);
            let Some(c) = list.classifiers.get(stage) else {
                return Err(Failure::Usage(format!(
                    "--stage {stage} out of range: the decision list has {} classifiers",
                    list.classifiers.len()
                )));
            };
            (model, train.bounds(), c.unitary.clone(), c.saddle.clone())
        };
    let n = model.state_dim();
    if axes.0 >= n || axes.1 >= n || axes.0 == axes.1 {
        return Err(Failure::Usage(format!("invalid axes {},{} for dimension {n}", axes.0, axes.1)));
    }
    let bounds = match a.bounds.as_deref().map(parse_box).transpose()? {
        None => [data_bounds[axes.0], data_bounds[axes.1]],
        Some(b) if b.len() == 2 => [b[0], b[1]],
        Some(_) => return Err(Failure::Usage("--bounds needs two intervals".into())),
    };
    let frozen = frozen_arg.unwrap_or_else(|| level_point.clone());
    if frozen.len() != n {
        return Err(Failure::Usage(format!("--frozen needs {n} values, got {}", frozen.len())));
    }
    let grid = boundary_grid(&model, &unitary, &level_point, axes, bounds, (resolution, resolution), &frozen)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let w = create(&out)?;
    grid.write_csv(w)
        .map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    if let Some(d) = &grid.diagnostic {
        return Err(Failure::Empty(format!("empty boundary contour: {d}")));
    }
    println!(
        "{}x{} grid, level {:.6}, {} contour branches -> {}",
        resolution,
        resolution,
        grid.level,
        grid.contours.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- pipeline

/// Writes `model.kpm`, `report.json`, `labels.csv` and `boundary_<i>.csv`
/// into the output directory. A failed run still writes its partial report.
pub fn pipeline(a: PipelineArgs) -> Result<(), Failure> {
    let dir = require(a.out_dir.clone(), "out-dir")?;
    let data = load_data(&require(a.fit.data.clone(), "data")?)?;
    let seed = a.fit.seed.unwrap_or(0);
    let (train, test) = split_data(&data, a.fit.split, seed)?;
    let mut cfg = pipeline_config(&a.tol, seed)?;
    cfg.basis = basis_choice(&a.fit)?;
    cfg.fit = fit_options(&a.fit)?;
    cfg.propagation = propagation(&a.fit)?;
    if let Some(r) = a.resolution {
        cfg.grid_resolution = r;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let write_report = |r: &PipelineReport| -> Result<(), Failure> {
        let json = r.to_json().map_err(|e| Failure::Numerical(e.to_string()))?;
        write_text(&dir.join("report.json"), &json)
    };
    let report = match run_pipeline(&train, &test, &cfg) {
        Ok(r) => r,
        Err(e) => {
            write_report(&e.partial)?;
            return Err(stage_failure(e));
        }
    };
    write_report(&report)?;
    let model = report.model.as_ref().expect("pipeline keeps its model");
    save_model(model, &dir.join("model.kpm")).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(list) = &report.decision_list {
        let points: Vec<Vec<f64>> = test.trajectories.iter().map(|t| t.states[0].clone()).collect();
        let labels = classify_points(model, list, &points).map_err(|e| Failure::Numerical(e.to_string()))?;
        let radius = cfg.label_radius_factor * cfg.fixed_points.merge_radius;
        let truth = label_endpoints(&test, &report.stable_points(), radius);
        write_labels(Some(&dir.join("labels.csv")), &points, &labels, Some(&truth))?;
    }
    for (i, g) in report.grids.iter().enumerate() {
        let path = dir.join(format!("boundary_{i}.csv"));
        g.write_csv(create(&path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    }

    if let (Some(b), Some(e)) = (&report.basis, &report.error) {
        println!("basis {} d = {}, empirical error {:.4e}", b.family.name(), b.len(), e.e);
    }
    print_points(&report.fixed_points);
    if let Some(e) = &report.test {
        print_evaluation("held-out trajectories", e);
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    println!("artifacts -> {}", dir.display());
    Ok(())
}
