//! Benchmark ODE systems, fixed-step integration and trajectory datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum DynamicsError {
    #[error("time step must be positive and finite (got {0})")]
    InvalidStep(f64),
    #[error("integration produced a non-finite state")]
    NonFinite,
    #[error("initial-condition box is empty")]
    EmptyBox,
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("split needs at least 2 trajectories (got {0})")]
    TooFewTrajectories(usize),
    #[error("train fraction must lie strictly between 0 and 1 (got {0})")]
    InvalidFraction(f64),
    #[error("state has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("trajectory {0} has fewer than 2 samples")]
    ShortTrajectory(u64),
    #[error("dataset contains no trajectories")]
    EmptyDataset,
    #[error("trajectory file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DynamicsError {
    fn from(e: csv::Error) -> Self {
        DynamicsError::Format(e.to_string())
    }
}

/// An autonomous vector field `ẋ = f(x)` with a recommended state box.
pub trait OdeModel: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    /// Writes `f(x)` into `out`.
    fn rhs(&self, x: &[f64], out: &mut [f64]);
    /// Per-coordinate interval box on which the right-hand side is finite
    /// and the data are expected to live.
    fn domain(&self) -> Vec<(f64, f64)>;
}

pub const COMPETITION_DEFAULT_R: [f64; 6] = [2.0, 1.0, 2.0, 1.0, 3.0, 3.0];
pub const MAK_DEFAULT_K: [f64; 4] = [7.0, 5.0, 0.3, 0.05];
pub const MAK_DEFAULT_DILUTION: f64 = 0.19;

/// Two-species competition model.
pub fn competition_rhs(x: &[f64], r: &[f64; 6]) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    [
        r[0] * x1 - r[1] * x1 * x1 - r[4] * x1 * x2,
        r[2] * x2 - r[3] * x2 * x2 - r[5] * x1 * x2,
    ]
}

/// Five-species mass-action reactor with substrate inflow at dilution rate `d`.
pub fn mak_rhs(x: &[f64], k: &[f64; 4], d: f64) -> [f64; 5] {
    let (s1, s2, s3, s4, s5) = (x[0], x[1], x[2], x[3], x[4]);
    let r1 = k[0] * s1 * s3 * s3;
    let r2 = k[1] * s2 * s4 * s4;
    [
        -r1 + d - d * s1,
        r1 - r2 - d * s2,
        r1 - k[2] * s3 - d * s3,
        r2 - k[3] * s4 - d * s4,
        k[2] * s3 + k[3] * s4 - d * s5,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Competition {
    pub r: [f64; 6],
}

impl Default for Competition {
    fn default() -> Self {
        Self {
            r: COMPETITION_DEFAULT_R,
        }
    }
}

impl Competition {
    /// Box the initial conditions are drawn from by default.
    pub fn initial_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 2.0); 2]
    }
}

impl OdeModel for Competition {
    fn name(&self) -> &str {
        "competition"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<f64> {
        self.r.to_vec()
    }
    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&competition_rhs(x, &self.r));
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 2.0); 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassActionReactor {
    pub k: [f64; 4],
    pub dilution: f64,
}

impl Default for MassActionReactor {
    fn default() -> Self {
        Self {
            k: MAK_DEFAULT_K,
            dilution: MAK_DEFAULT_DILUTION,
        }
    }
}

impl MassActionReactor {
    /// Box the initial conditions are drawn from by default. Narrower than
    /// the domain so that all three basins receive trajectories.
    pub fn initial_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 0.5); 5]
    }
}

impl OdeModel for MassActionReactor {
    fn name(&self) -> &str {
        "mak"
    }
    fn dim(&self) -> usize {
        5
    }
    fn params(&self) -> Vec<f64> {
        let mut p = self.k.to_vec();
        p.push(self.dilution);
        p
    }
    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&mak_rhs(x, &self.k, self.dilution));
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); 5]
    }
}

/// Linear system `ẋ = A x` (row-major `A`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOde {
    pub a: Vec<Vec<f64>>,
    pub domain: Vec<(f64, f64)>,
}

impl OdeModel for LinearOde {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn params(&self) -> Vec<f64> {
        self.a.iter().flatten().copied().collect()
    }
    fn rhs(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.a) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
    fn domain(&self) -> Vec<(f64, f64)> {
        self.domain.clone()
    }
}

/// One classical fourth-order Runge–Kutta step.
pub fn rk4_step(model: &dyn OdeModel, x: &[f64], dt: f64) -> Result<Vec<f64>, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let n = model.dim();
    if x.len() != n {
        return Err(DynamicsError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    model.rhs(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    model.rhs(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    model.rhs(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    model.rhs(&tmp, &mut k4);
    let out: Vec<f64> = (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(DynamicsError::NonFinite)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub dt: f64,
    pub trajectories: Vec<Trajectory>,
    /// Seed that generated the initial conditions, when known.
    pub seed: Option<u64>,
}

impl TrajectoryDataset {
    pub fn dim(&self) -> usize {
        self.trajectories
            .first()
            .and_then(|t| t.states.first())
            .map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.states.len()).sum()
    }

    /// Checks the dataset invariants: common dimension, ≥ 2 samples each.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.trajectories.is_empty() {
            return Err(DynamicsError::EmptyDataset);
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DynamicsError::InvalidStep(self.dt));
        }
        let n = self.dim();
        for t in &self.trajectories {
            if t.states.len() < 2 {
                return Err(DynamicsError::ShortTrajectory(t.id));
            }
            if let Some(s) = t.states.iter().find(|s| s.len() != n) {
                return Err(DynamicsError::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
        }
        Ok(())
    }

    /// Per-coordinate `(min, max)` over all samples.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim()];
        for s in self.trajectories.iter().flat_map(|t| &t.states) {
            for (bj, &v) in b.iter_mut().zip(s) {
                bj.0 = bj.0.min(v);
                bj.1 = bj.1.max(v);
            }
        }
        b
    }
}

/// Why a trajectory stopped before its requested length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationReason {
    LeftDomain,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truncation {
    pub id: u64,
    pub reason: TruncationReason,
    /// Samples retained (the trajectory is dropped when fewer than 2).
    pub kept: usize,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: TrajectoryDataset,
    pub truncations: Vec<Truncation>,
}

/// Simulation horizons used when none is given.
pub fn default_t_final(model_name: &str) -> f64 {
    match model_name {
        "mak" => 40.0,
        _ => 20.0,
    }
}

fn expanded_box(domain: &[(f64, f64)], factor: f64) -> Vec<(f64, f64)> {
    domain
        .iter()
        .map(|&(lo, hi)| {
            let c = 0.5 * (lo + hi);
            let h = 0.5 * (hi - lo) * factor;
            (c - h, c + h)
        })
        .collect()
}

/// Integrates one trajectory per initial condition. Trajectory ids follow the
/// order of `ics`. A trajectory stops early when it leaves the model domain
/// expanded by a factor of 2 or turns non-finite.
pub fn simulate(
    model: &dyn OdeModel,
    ics: &[Vec<f64>],
    dt: f64,
    steps: usize,
) -> Result<Simulation, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    if steps == 0 {
        return Err(DynamicsError::ZeroCount);
    }
    let n = model.dim();
    if let Some(x) = ics.iter().find(|x| x.len() != n) {
        return Err(DynamicsError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let limits = expanded_box(&model.domain(), 2.0);
    let inside = |x: &[f64]| {
        x.iter()
            .zip(&limits)
            .all(|(&v, &(lo, hi))| v.is_finite() && v >= lo && v <= hi)
    };
    let runs: Vec<(Trajectory, Option<Truncation>)> = ics
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let id = i as u64;
            let mut states = Vec::with_capacity(steps + 1);
            if !inside(x0) {
                let reason = if x0.iter().all(|v| v.is_finite()) {
                    TruncationReason::LeftDomain
                } else {
                    TruncationReason::NonFinite
                };
                return (Trajectory { id, states }, Some(Truncation { id, reason, kept: 0 }));
            }
            states.push(x0.clone());
            let mut cut = None;
            for _ in 0..steps {
                let last = states.last().expect("nonempty");
                match rk4_step(model, last, dt) {
                    Ok(next) if inside(&next) => states.push(next),
                    Ok(_) => {
                        cut = Some(TruncationReason::LeftDomain);
                        break;
                    }
                    Err(_) => {
                        cut = Some(TruncationReason::NonFinite);
                        break;
                    }
                }
            }
            let kept = states.len();
            (
                Trajectory { id, states },
                cut.map(|reason| Truncation { id, reason, kept }),
            )
        })
        .collect();
    let mut trajectories = Vec::with_capacity(runs.len());
    let mut truncations = Vec::new();
    for (traj, cut) in runs {
        if let Some(c) = cut {
            truncations.push(c);
        }
        if traj.states.len() >= 2 {
            trajectories.push(traj);
        }
    }
    Ok(Simulation {
        dataset: TrajectoryDataset {
            dt,
            trajectories,
            seed: None,
        },
        truncations,
    })
}

/// Uniform i.i.d. samples from an interval box, deterministic in `seed`.
pub fn sample_initial_conditions(
    bounds: &[(f64, f64)],
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, DynamicsError> {
    if count == 0 {
        return Err(DynamicsError::ZeroCount);
    }
    if bounds.is_empty()
        || bounds
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite()) || lo > hi)
    {
        return Err(DynamicsError::EmptyBox);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| {
                    let u: f64 = rng.random();
                    if lo == hi {
                        lo
                    } else {
                        (lo + u * (hi - lo)).min(hi)
                    }
                })
                .collect()
        })
        .collect())
}

/// Samples initial conditions and simulates them; the dataset records `seed`.
pub fn generate(
    model: &dyn OdeModel,
    bounds: &[(f64, f64)],
    count: usize,
    dt: f64,
    t_final: f64,
    seed: u64,
) -> Result<Simulation, DynamicsError> {
    let ics = sample_initial_conditions(bounds, count, seed)?;
    let steps = steps_for(t_final, dt)?;
    let mut sim = simulate(model, &ics, dt, steps)?;
    sim.dataset.seed = Some(seed);
    Ok(sim)
}

/// Number of steps of size `dt` covering `[0, t_final]`.
pub fn steps_for(t_final: f64, dt: f64) -> Result<usize, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(DynamicsError::InvalidStep(t_final));
    }
    Ok(((t_final / dt).round() as usize).max(1))
}

/// Consecutive-sample pairs `(xᵢ, yᵢ)`, stored row-wise (`n` values per pair).
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPairs {
    pub n: usize,
    pub dt: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl SnapshotPairs {
    pub fn from_columns(n: usize, dt: f64, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Self, DynamicsError> {
        if xs.len() != ys.len() {
            return Err(DynamicsError::DimensionMismatch {
                expected: xs.len(),
                got: ys.len(),
            });
        }
        let mut x = Vec::with_capacity(xs.len() * n);
        let mut y = Vec::with_capacity(ys.len() * n);
        for (a, b) in xs.iter().zip(ys) {
            for v in [a, b] {
                if v.len() != n {
                    return Err(DynamicsError::DimensionMismatch {
                        expected: n,
                        got: v.len(),
                    });
                }
            }
            x.extend_from_slice(a);
            y.extend_from_slice(b);
        }
        Ok(Self { n, dt, x, y })
    }

    pub fn len(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.x.len() / self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.y[i * self.n..(i + 1) * self.n]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.x.chunks_exact(self.n.max(1)).zip(self.y.chunks_exact(self.n.max(1)))
    }
}

/// All within-trajectory consecutive pairs, in trajectory then time order.
pub fn to_snapshots(dataset: &TrajectoryDataset) -> SnapshotPairs {
    let n = dataset.dim();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in &dataset.trajectories {
        for w in t.states.windows(2) {
            x.extend_from_slice(&w[0]);
            y.extend_from_slice(&w[1]);
        }
    }
    SnapshotPairs {
        n,
        dt: dataset.dt,
        x,
        y,
    }
}

/// Trajectory-level random partition into `(train, test)`.
pub fn split(
    dataset: &TrajectoryDataset,
    fraction: f64,
    seed: u64,
) -> Result<(TrajectoryDataset, TrajectoryDataset), DynamicsError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DynamicsError::InvalidFraction(fraction));
    }
    let m = dataset.trajectories.len();
    if m < 2 {
        return Err(DynamicsError::TooFewTrajectories(m));
    }
    let n_train = ((fraction * m as f64).round() as usize).clamp(1, m - 1);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; m];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let pick = |want: bool| TrajectoryDataset {
        dt: dataset.dt,
        trajectories: dataset
            .trajectories
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == want)
            .map(|(t, _)| t.clone())
            .collect(),
        seed: dataset.seed,
    };
    Ok((pick(true), pick(false)))
}

/// Derives an independent per-stage seed from a master seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Writes `traj_id,t,x1,...,xn` rows ordered by trajectory then time.
pub fn write_csv<W: Write>(dataset: &TrajectoryDataset, out: W) -> Result<(), DynamicsError> {
    let n = dataset.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=n).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    let mut trajs: Vec<&Trajectory> = dataset.trajectories.iter().collect();
    trajs.sort_by_key(|t| t.id);
    let mut row = Vec::with_capacity(n + 2);
    for t in trajs {
        for (k, s) in t.states.iter().enumerate() {
            row.clear();
            row.push(t.id.to_string());
            row.push((k as f64 * dataset.dt).to_string());
            row.extend(s.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &TrajectoryDataset, path: &Path) -> Result<(), DynamicsError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(dataset, f)
}

/// Parses a trajectory CSV. The sampling time is inferred from the first
/// trajectory and checked against all others.
pub fn read_csv<R: Read>(input: R) -> Result<TrajectoryDataset, DynamicsError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let n = header.len().saturating_sub(2);
    let expected: Vec<String> = ["traj_id".to_string(), "t".to_string()]
        .into_iter()
        .chain((1..=n).map(|j| format!("x{j}")))
        .collect();
    if n == 0 || header.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(DynamicsError::Format(format!(
            "expected header traj_id,t,x1,...,xn; found {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut times: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != n + 2 {
            return Err(DynamicsError::Format(format!(
                "line {row}: expected {} fields, found {}",
                n + 2,
                rec.len()
            )));
        }
        let id: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| DynamicsError::Format(format!("line {row}: bad traj_id {:?}", &rec[0])))?;
        let mut vals = Vec::with_capacity(n + 1);
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| DynamicsError::Format(format!("line {row}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(DynamicsError::Format(format!("line {row}: non-finite value")));
            }
            vals.push(v);
        }
        let t = vals[0];
        let state = vals[1..].to_vec();
        match trajectories.last_mut() {
            Some(last) if last.id == id => {
                let tl = times.last_mut().expect("parallel vectors");
                if t <= *tl.last().expect("nonempty") {
                    return Err(DynamicsError::Format(format!("line {row}: time not increasing")));
                }
                tl.push(t);
                last.states.push(state);
            }
            Some(last) if last.id > id => {
                return Err(DynamicsError::Format(format!(
                    "line {row}: rows must be ordered by traj_id"
                )));
            }
            _ => {
                trajectories.push(Trajectory {
                    id,
                    states: vec![state],
                });
                times.push(vec![t]);
            }
        }
    }
    let dt = times
        .iter()
        .find(|t| t.len() >= 2)
        .map(|t| t[1] - t[0])
        .ok_or(DynamicsError::EmptyDataset)?;
    for (tr, ts) in trajectories.iter().zip(&times) {
        for (k, &t) in ts.iter().enumerate() {
            let want = ts[0] + k as f64 * dt;
            if (t - want).abs() > 1e-6 * dt.max(want.abs()) {
                return Err(DynamicsError::Format(format!(
                    "trajectory {}: samples are not uniformly spaced by {dt}",
                    tr.id
                )));
            }
        }
    }
    let ds = TrajectoryDataset {
        dt,
        trajectories,
        seed: None,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: &Path) -> Result<TrajectoryDataset, DynamicsError> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
