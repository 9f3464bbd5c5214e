//! Fixed points, local stability, unitary eigenfunctions and saddle-threshold
//! classification of initial conditions into regions of attraction.

use crate::contour::{marching_squares, Point, ScalarGrid};
use crate::dynamics::{SnapshotPairs, TrajectoryDataset};
use crate::edmd::{EdmdError, KoopmanModel};
use faer::linalg::solvers::Solve;
use faer::{c64, Mat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, thiserror::Error)]
pub enum RoaError {
    #[error(transparent)]
    Edmd(#[from] EdmdError),
    #[error("no starting points given")]
    NoStarts,
    #[error("flow is not finite within the finite-difference stencil at {0:?}")]
    NonFiniteStencil(Vec<f64>),
    #[error("eigenvalue computation failed: {0}")]
    Decomposition(String),
    #[error("model has no non-trivial real positive eigenfunctions")]
    NoCandidates,
    #[error("eigenvalue {0} is not real and positive")]
    NotRealPositive(usize),
    #[error("eigenvalue {0} equals 1; its logarithm cannot be used as an exponent base")]
    ZeroLog(usize),
    #[error("eigenvalue {index} is {distance:.3e} away from 1, beyond the unitary tolerance")]
    NotUnitary { index: usize, distance: f64 },
    #[error("fixed point is not a type-one saddle")]
    NotTypeOneSaddle,
    #[error("classifier rejected: training accuracy {0:.3} does not exceed 0.5")]
    Rejected(f64),
    #[error("no labeled training points")]
    NoLabels,
    #[error("no usable classifier could be calibrated")]
    NoClassifier,
    #[error("grid needs at least 2 nodes per axis")]
    Resolution,
    #[error("invalid axes ({0}, {1}) for a {2}-dimensional state")]
    Axes(usize, usize, usize),
    #[error("state has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

// ---------------------------------------------------------------- fixed points

/// `J(x) = ½‖flow(x, k) − x‖²`.
pub fn residual_objective(model: &KoopmanModel, x: &[f64], k: usize) -> Result<f64, RoaError> {
    let y = if k <= 1 {
        model.step(x)?
    } else {
        model.flow(x, k as i64)?
    };
    Ok(0.5 * y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointOptions {
    /// Minima with `J` below this are accepted.
    pub tol_j: f64,
    /// Accepted minima closer than this are merged.
    pub merge_radius: f64,
    /// Optional acceptance box; minima outside it are discarded.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Initial simplex edge, per coordinate.
    pub simplex_step: f64,
    pub max_simplex_iter: usize,
    pub max_polish_iter: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol_j: 1e-8,
            merge_radius: 1e-2,
            bounds: None,
            simplex_step: 0.05,
            max_simplex_iter: 400,
            max_polish_iter: 50,
        }
    }
}

/// Stability class from the magnitudes of the local linearization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", content = "unstable_dims")]
pub enum Stability {
    AsymptoticallyStable,
    Unstable,
    Saddle(usize),
    NonHyperbolic,
}

impl Stability {
    pub fn is_type_one_saddle(self) -> bool {
        self == Stability::Saddle(1)
    }

    pub fn short(self) -> String {
        match self {
            Stability::AsymptoticallyStable => "AS".into(),
            Stability::Unstable => "Unstable".into(),
            Stability::Saddle(k) => format!("Saddle({k})"),
            Stability::NonHyperbolic => "NonHyperbolic".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub location: Vec<f64>,
    pub residual: f64,
    /// `|λ|` of the local Jacobian, ascending.
    pub magnitudes: Vec<f64>,
    pub stability: Option<Stability>,
    /// `min ||λᵢ| − 1|`.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSearch {
    pub points: Vec<FixedPointReport>,
    /// Smallest `J` among rejected minima, when nothing was accepted.
    pub best_rejected: Option<f64>,
}

fn nelder_mead<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..n {
        let mut v = x0.to_vec();
        v[j] += step;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let nan_last = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| nan_last(vals[a]).total_cmp(&nan_last(vals[b])));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = (nan_last(vals[n]) - vals[0]).abs();
        let size = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-20 || size <= 1e-10 {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|j| centroid[j] + t * (simplex[n][j] - centroid[j]))
                .collect()
        };
        let xr = along(-1.0);
        let fr = nan_last(f(&xr));
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = nan_last(f(&xe));
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < nan_last(vals[n]) {
                let xc = along(-0.5);
                let fc = nan_last(f(&xc));
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = nan_last(f(&xc));
                (xc, fc)
            };
            if fc < fr.min(nan_last(vals[n])) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let v: Vec<f64> = (0..n)
                        .map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]))
                        .collect();
                    vals[i] = nan_last(f(&v));
                    simplex[i] = v;
                }
            }
        }
    }
    let best = (0..=n)
        .min_by(|&a, &b| nan_last(vals[a]).total_cmp(&nan_last(vals[b])))
        .unwrap_or(0);
    (simplex[best].clone(), vals[best])
}

fn fd_steps(x: &[f64]) -> Vec<f64> {
    let h = f64::EPSILON.cbrt();
    x.iter().map(|v| h * v.abs().max(1.0)).collect()
}

/// Central-difference Jacobian of the one-step map.
pub fn local_jacobian(model: &KoopmanModel, x: &[f64]) -> Result<Mat<f64>, RoaError> {
    let n = model.state_dim();
    if x.len() != n {
        return Err(RoaError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let steps = fd_steps(x);
    let mut h = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += steps[j];
        xm[j] -= steps[j];
        let fp = model.step(&xp)?;
        let fm = model.step(&xm)?;
        for i in 0..n {
            let v = (fp[i] - fm[i]) / (2.0 * steps[j]);
            if !v.is_finite() {
                return Err(RoaError::NonFiniteStencil(x.to_vec()));
            }
            h[(i, j)] = v;
        }
    }
    Ok(h)
}

/// Levenberg–Marquardt-damped Gauss–Newton on `r(x) = step(x) − x`.
fn polish(model: &KoopmanModel, x0: Vec<f64>, max_iter: usize) -> Vec<f64> {
    let n = x0.len();
    let resid = |x: &[f64]| -> Option<Vec<f64>> {
        let y = model.step(x).ok()?;
        let r: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
        r.iter().all(|v| v.is_finite()).then_some(r)
    };
    let cost = |r: &[f64]| 0.5 * r.iter().map(|v| v * v).sum::<f64>();
    let mut x = x0;
    let Some(mut r) = resid(&x) else { return x };
    let mut lambda = 1e-6;
    for _ in 0..max_iter {
        let Ok(mut jac) = local_jacobian(model, &x) else { break };
        for i in 0..n {
            jac[(i, i)] -= 1.0;
        }
        let jt_j = jac.transpose() * &jac;
        let jt_r = Mat::from_fn(n, 1, |i, _| (0..n).map(|k| jac[(k, i)] * r[k]).sum::<f64>());
        let mut improved = false;
        for _ in 0..8 {
            let mut a = jt_j.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (1.0 + jt_j[(i, i)]);
            }
            let delta = a.partial_piv_lu().solve(&jt_r);
            let cand: Vec<f64> = (0..n).map(|i| x[i] - delta[(i, 0)]).collect();
            if let Some(rc) = resid(&cand) {
                if cost(&rc) < cost(&r) {
                    let moved = (0..n).map(|i| delta[(i, 0)].abs()).fold(0.0, f64::max);
                    x = cand;
                    r = rc;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = moved > 1e-15 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max));
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved || cost(&r) < 1e-30 {
            break;
        }
    }
    x
}

fn inside(x: &[f64], bounds: &Option<Vec<(f64, f64)>>) -> bool {
    match bounds {
        None => true,
        Some(b) => x.iter().zip(b).all(|(&v, &(lo, hi))| v >= lo && v <= hi),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Multi-start minimization of `J`; accepted minima are merged and sorted
/// lexicographically. Stability fields are left empty.
pub fn find_fixed_points(
    model: &KoopmanModel,
    starts: &[Vec<f64>],
    opts: &FixedPointOptions,
) -> Result<FixedPointSearch, RoaError> {
    if starts.is_empty() {
        return Err(RoaError::NoStarts);
    }
    let n = model.state_dim();
    if let Some(s) = starts.iter().find(|s| s.len() != n) {
        return Err(RoaError::DimensionMismatch {
            expected: n,
            got: s.len(),
        });
    }
    let objective = |x: &[f64]| residual_objective(model, x, 1).unwrap_or(f64::INFINITY);
    let minima: Vec<(Vec<f64>, f64)> = starts
        .par_iter()
        .flat_map_iter(|s| {
            // The simplex finds minima of J; the direct polish finds roots
            // whose descent basin is narrow, such as repelling nodes.
            let (x, _) = nelder_mead(objective, s, opts.simplex_step, opts.max_simplex_iter);
            [polish(model, x, opts.max_polish_iter), polish(model, s.clone(), opts.max_polish_iter)]
                .into_iter()
                .map(|x| {
                    let j = objective(&x);
                    (x, j)
                })
        })
        .collect();
    let mut accepted: Vec<(Vec<f64>, f64)> = minima
        .iter()
        .filter(|(x, j)| *j < opts.tol_j && inside(x, &opts.bounds))
        .cloned()
        .collect();
    let best_rejected = if accepted.is_empty() {
        minima.iter().map(|m| m.1).filter(|j| j.is_finite()).min_by(f64::total_cmp)
    } else {
        None
    };
    accepted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut kept: Vec<(Vec<f64>, f64)> = Vec::new();
    for (x, j) in accepted {
        if kept.iter().all(|(k, _)| dist(k, &x) > opts.merge_radius) {
            kept.push((x, j));
        }
    }
    // Coordinates are compared on a merge-radius lattice so that points
    // sharing a coordinate keep a stable order despite fit noise.
    let key = |x: &[f64]| -> Vec<i64> {
        x.iter()
            .map(|v| (v / opts.merge_radius.max(f64::MIN_POSITIVE)).round() as i64)
            .collect()
    };
    kept.sort_by(|a, b| {
        key(&a.0).cmp(&key(&b.0)).then_with(|| {
            a.0.iter()
                .zip(&b.0)
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(FixedPointSearch {
        points: kept
            .into_iter()
            .map(|(location, residual)| FixedPointReport {
                location,
                residual,
                magnitudes: Vec::new(),
                stability: None,
                margin: None,
            })
            .collect(),
        best_rejected,
    })
}

/// Start points: up to `count` training states stratified over a grid of the
/// data box, plus up to `count` well-separated states with the smallest
/// one-step displacement among those where a trajectory is locally slowest.
pub fn default_starts(pairs: &SnapshotPairs, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n = pairs.n;
    let m = pairs.len();
    if m == 0 || n == 0 || count == 0 {
        return Vec::new();
    }
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    for (x, _) in pairs.iter() {
        for j in 0..n {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    let bins = ((count as f64).powf(1.0 / n as f64).ceil() as usize).max(1);
    let cell = |x: &[f64]| -> Vec<usize> {
        (0..n)
            .map(|j| {
                let w = hi[j] - lo[j];
                if w <= 0.0 {
                    0
                } else {
                    (((x[j] - lo[j]) / w * bins as f64) as usize).min(bins - 1)
                }
            })
            .collect()
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut seen = std::collections::BTreeMap::new();
    for &i in &order {
        seen.entry(cell(pairs.x(i))).or_insert(i);
    }
    let mut reps: Vec<usize> = seen.into_values().collect();
    if reps.len() > count {
        reps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        reps.truncate(count);
        reps.sort_unstable();
    }
    let mut starts: Vec<Vec<f64>> = reps.iter().map(|&i| pairs.x(i).to_vec()).collect();

    let scale = (0..n).map(|j| hi[j] - lo[j]).sum::<f64>() / n as f64;
    let sep = 0.02 * scale.max(f64::MIN_POSITIVE);
    let disp: Vec<f64> = (0..m).map(|i| dist(pairs.x(i), pairs.y(i))).collect();
    // Consecutive pairs belong to one trajectory when they share a state.
    let linked = |i: usize| i + 1 < m && pairs.y(i) == pairs.x(i + 1);
    let mut by_disp: Vec<(f64, usize)> = (0..m)
        .filter(|&i| {
            let prev = i > 0 && linked(i - 1) && disp[i - 1] < disp[i];
            let next = linked(i) && disp[i + 1] < disp[i];
            !prev && !next
        })
        .map(|i| (disp[i], i))
        .collect();
    by_disp.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut slow: Vec<Vec<f64>> = Vec::new();
    for (_, i) in by_disp {
        if slow.len() >= count {
            break;
        }
        let x = pairs.x(i);
        if slow.iter().all(|s| dist(s, x) > sep) {
            slow.push(x.to_vec());
        }
    }
    starts.extend(slow);
    starts
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOutcome {
    pub class: Stability,
    pub magnitudes: Vec<f64>,
    pub margin: f64,
}

/// Class from eigenvalue magnitudes; any magnitude within `eps_hyp` of 1
/// makes the point non-hyperbolic.
pub fn classify_magnitudes(magnitudes: &[f64], eps_hyp: f64) -> StabilityOutcome {
    let n = magnitudes.len();
    let mut mags = magnitudes.to_vec();
    mags.sort_by(f64::total_cmp);
    let margin = mags.iter().map(|m| (m - 1.0).abs()).fold(f64::INFINITY, f64::min);
    let above = mags.iter().filter(|&&m| m > 1.0).count();
    let class = if margin < eps_hyp {
        Stability::NonHyperbolic
    } else if above == 0 {
        Stability::AsymptoticallyStable
    } else if above == n {
        Stability::Unstable
    } else {
        Stability::Saddle(above)
    };
    StabilityOutcome {
        class,
        magnitudes: mags,
        margin,
    }
}

pub fn classify_stability(h: &Mat<f64>, eps_hyp: f64) -> Result<StabilityOutcome, RoaError> {
    let ev = h
        .eigenvalues()
        .map_err(|e| RoaError::Decomposition(format!("{e:?}")))?;
    let mags: Vec<f64> = ev.iter().map(|z| z.norm()).collect();
    Ok(classify_magnitudes(&mags, eps_hyp))
}

/// Fills magnitudes, class and margin for each report.
pub fn analyze_fixed_points(
    model: &KoopmanModel,
    points: &mut [FixedPointReport],
    eps_hyp: f64,
) -> Result<(), RoaError> {
    for p in points.iter_mut() {
        let h = local_jacobian(model, &p.location)?;
        let out = classify_stability(&h, eps_hyp)?;
        p.magnitudes = out.magnitudes;
        p.stability = Some(out.class);
        p.margin = Some(out.margin);
    }
    Ok(())
}

// ---------------------------------------------------- unitary eigenfunctions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitaryOptions {
    /// Eigenvalues within this distance of 1 are used directly.
    pub eps_unit: f64,
    /// Relative standard deviation below which an eigenfunction is trivial.
    pub trivial_rel_std: f64,
    /// Ranked candidates kept for pairing and direct use.
    pub max_candidates: usize,
}

impl Default for UnitaryOptions {
    fn default() -> Self {
        Self {
            eps_unit: 5e-3,
            trivial_rel_std: 1e-6,
            max_candidates: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitaryCandidate {
    pub index: usize,
    pub eigenvalue: f64,
    /// `|μ − 1|`.
    pub distance: f64,
    pub direct: bool,
}

fn is_real_positive(mu: c64) -> bool {
    mu.re > 0.0 && mu.im.abs() <= 1e-10 * mu.re.max(1.0)
}

/// Evenly strided subset of the training states, at most `max` of them.
pub fn sample_states(pairs: &SnapshotPairs, max: usize) -> Vec<Vec<f64>> {
    let m = pairs.len();
    let stride = m.div_ceil(max.max(1)).max(1);
    (0..m).step_by(stride).map(|i| pairs.x(i).to_vec()).collect()
}

/// Real positive, non-trivial eigenfunctions ranked by `|μ − 1|`.
pub fn select_unitary_candidates(
    model: &KoopmanModel,
    states: &[Vec<f64>],
    opts: &UnitaryOptions,
) -> Result<Vec<UnitaryCandidate>, RoaError> {
    if model.dim() < 2 {
        return Err(RoaError::NoCandidates);
    }
    let phis: Vec<Vec<c64>> = states
        .par_iter()
        .map(|x| model.eigenfunctions(x))
        .collect::<Result<_, _>>()?;
    let mut out: Vec<UnitaryCandidate> = (0..model.dim())
        .filter(|&i| is_real_positive(model.eigenvalues[i]))
        .filter(|&i| {
            let vals: Vec<f64> = phis.iter().map(|p| p[i].re).collect();
            let m = vals.len().max(1) as f64;
            let mean = vals.iter().sum::<f64>() / m;
            let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m).sqrt();
            let scale = mean.abs().max(vals.iter().map(|v| v.abs()).fold(0.0, f64::max) * 1e-300);
            !(sd <= opts.trivial_rel_std * scale)
        })
        .map(|i| {
            let mu = model.eigenvalues[i].re;
            let distance = (mu - 1.0).abs();
            UnitaryCandidate {
                index: i,
                eigenvalue: mu,
                distance,
                direct: distance < opts.eps_unit,
            }
        })
        .collect();
    if out.is_empty() {
        return Err(RoaError::NoCandidates);
    }
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Construction {
    /// `φ₊ = φ_i`.
    Direct { index: usize },
    /// `φ₊ = φ_{i₁} · φ_{i₂}^{k₂}`.
    Product { i1: usize, i2: usize, k2: f64 },
    /// `φ₊ = Σ w_j Re φ_{i_j}` over near-unit eigenfunctions.
    Combination { indices: Vec<usize>, weights: Vec<f64> },
    /// `φ₊ ≡ 1`, the trivial eigenfunction of every model.
    Constant,
}

/// An (approximately) unit-eigenvalue eigenfunction built from fitted ones.
/// Carries the dictionary coefficients of its constituents, so it can be
/// evaluated from `Ψ(x)` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitaryEigenfunction {
    pub construction: Construction,
    /// Rows of `W` for the constituent eigenfunctions, as `(re, im)` pairs.
    pub coefficients: Vec<Vec<(f64, f64)>>,
    /// Composed eigenvalue `μ̄` as `(re, im)`.
    pub eigenvalue: (f64, f64),
    /// `|μ̄ − 1|`.
    pub unit_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitaryValue {
    pub value: c64,
    /// Sign of the fractional-power base for product constructions.
    pub branch: Option<f64>,
}

fn row_of(model: &KoopmanModel, i: usize) -> Vec<(f64, f64)> {
    model.left_row(i).iter().map(|z| (z.re, z.im)).collect()
}

fn dot(row: &[(f64, f64)], psi: &[f64]) -> c64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (&(a, b), &p) in row.iter().zip(psi) {
        re += a * p;
        im += b * p;
    }
    c64::new(re, im)
}

/// Signed power `sign(v)|v|^k`.
fn odd_pow(v: f64, k: f64) -> f64 {
    v.signum() * v.abs().powf(k)
}

impl UnitaryEigenfunction {
    /// Uses eigenfunction `i` as is; `μ_i` must lie within `eps_unit` of 1.
    pub fn direct(model: &KoopmanModel, i: usize, eps_unit: f64) -> Result<Self, RoaError> {
        let mu = model.eigenvalues[i];
        let distance = (mu - c64::new(1.0, 0.0)).norm();
        if !(distance < eps_unit) {
            return Err(RoaError::NotUnitary { index: i, distance });
        }
        Ok(Self {
            construction: Construction::Direct { index: i },
            coefficients: vec![row_of(model, i)],
            eigenvalue: (mu.re, mu.im),
            unit_distance: distance,
        })
    }

    /// The trivial eigenfunction `φ ≡ 1`. Its level sets carry no basin
    /// information, so its boundary grid has no contour.
    pub fn constant() -> Self {
        Self {
            construction: Construction::Constant,
            coefficients: Vec::new(),
            eigenvalue: (1.0, 0.0),
            unit_distance: 0.0,
        }
    }

    /// Weighted sum of real parts of near-unit eigenfunctions.
    pub fn combination(model: &KoopmanModel, indices: &[usize], weights: &[f64]) -> Self {
        let total: f64 = weights.iter().map(|w| w.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
        let mu: f64 = indices
            .iter()
            .zip(weights)
            .map(|(&i, w)| w.abs() * model.eigenvalues[i].re)
            .sum::<f64>()
            / total;
        let distance = indices
            .iter()
            .map(|&i| (model.eigenvalues[i] - c64::new(1.0, 0.0)).norm())
            .fold(0.0, f64::max);
        Self {
            construction: Construction::Combination {
                indices: indices.to_vec(),
                weights: weights.to_vec(),
            },
            coefficients: indices.iter().map(|&i| row_of(model, i)).collect(),
            eigenvalue: (mu, 0.0),
            unit_distance: distance,
        }
    }

    pub fn eval_psi(&self, psi: &[f64]) -> UnitaryValue {
        match &self.construction {
            Construction::Direct { .. } => UnitaryValue {
                value: dot(&self.coefficients[0], psi),
                branch: None,
            },
            Construction::Product { k2, .. } => {
                let p1 = dot(&self.coefficients[0], psi);
                let p2 = dot(&self.coefficients[1], psi).re;
                UnitaryValue {
                    value: p1 * odd_pow(p2, *k2),
                    branch: Some(if p2 < 0.0 { -1.0 } else { 1.0 }),
                }
            }
            Construction::Combination { weights, .. } => {
                let v: f64 = self
                    .coefficients
                    .iter()
                    .zip(weights)
                    .map(|(row, w)| w * dot(row, psi).re)
                    .sum();
                UnitaryValue {
                    value: c64::new(v, 0.0),
                    branch: None,
                }
            }
            Construction::Constant => UnitaryValue {
                value: c64::new(1.0, 0.0),
                branch: None,
            },
        }
    }

    /// Copy with every coefficient vector multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.coefficients {
            for c in row.iter_mut() {
                *c = (c.0 * s, c.1 * s);
            }
        }
        out
    }
}

/// `φ₊ = φ_{i₁} φ_{i₂}^{k₂}` with `k₂ = −ln μ_{i₁} / ln μ_{i₂}`, so `μ̄ = 1`.
pub fn construct_unitary(model: &KoopmanModel, i1: usize, i2: usize) -> Result<UnitaryEigenfunction, RoaError> {
    for i in [i1, i2] {
        if !is_real_positive(model.eigenvalues[i]) {
            return Err(RoaError::NotRealPositive(i));
        }
    }
    let (m1, m2) = (model.eigenvalues[i1].re, model.eigenvalues[i2].re);
    let (k2, mu_bar) = unit_exponent(m1, m2).ok_or(RoaError::ZeroLog(i2))?;
    Ok(UnitaryEigenfunction {
        construction: Construction::Product { i1, i2, k2 },
        coefficients: vec![row_of(model, i1), row_of(model, i2)],
        eigenvalue: (mu_bar, 0.0),
        unit_distance: (mu_bar - 1.0).abs(),
    })
}

/// `(k₂, μ₁ μ₂^{k₂})` for real positive `μ₁, μ₂`, or `None` when `μ₂ = 1`.
pub fn unit_exponent(mu1: f64, mu2: f64) -> Option<(f64, f64)> {
    let l2 = mu2.ln();
    if !(l2.abs() >= 1e-12) {
        return None;
    }
    let k2 = -mu1.ln() / l2;
    Some((k2, mu1 * mu2.powf(k2)))
}

/// Evaluates `φ₊` at a state.
pub fn eval_unitary(model: &KoopmanModel, phi: &UnitaryEigenfunction, x: &[f64]) -> Result<UnitaryValue, RoaError> {
    Ok(phi.eval_psi(&model.lift(x)?))
}

// --------------------------------------------------------------- classifiers

/// Training points with their lifted states and basin labels.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub states: Vec<Vec<f64>>,
    pub psi: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(model: &KoopmanModel, states: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self, RoaError> {
        let psi = states
            .iter()
            .map(|x| model.lift(x))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { states, psi, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleClassifier {
    pub unitary: UnitaryEigenfunction,
    pub saddle: Vec<f64>,
    /// `c = Re φ₊(x̂*)`.
    pub threshold: f64,
    /// `σ ∈ {+1, −1}`.
    pub orientation: f64,
    /// Basin label assigned when `σ(Re φ₊(x) − c) ≥ 0`.
    pub target: usize,
    /// Branch sign of the fractional-power base at the saddle.
    pub saddle_branch: Option<f64>,
    /// Balanced accuracy of the binary decision on its calibration set.
    pub training_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub accept: bool,
    /// `σ(Re φ₊(x) − c)`.
    pub score: f64,
    /// The fractional-power base changed sign relative to the saddle.
    pub cross_branch: bool,
}

impl SaddleClassifier {
    pub fn decide_psi(&self, psi: &[f64]) -> Decision {
        let v = self.unitary.eval_psi(psi);
        let score = self.orientation * (v.value.re - self.threshold);
        Decision {
            accept: score >= 0.0,
            score,
            cross_branch: matches!((v.branch, self.saddle_branch), (Some(a), Some(b)) if a != b),
        }
    }
}

/// Mean per-class recall of `predicted` against `truth` over the classes
/// present in `truth`.
pub fn balanced_accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes
        .iter()
        .map(|&c| {
            let total = truth.iter().filter(|&&t| t == c).count();
            let hit = truth.iter().zip(predicted).filter(|(&t, &p)| t == c && p == c).count();
            hit as f64 / total as f64
        })
        .sum::<f64>()
        / classes.len() as f64
}

fn binary_accuracy(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut tp, mut np, mut tn, mut nn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &pos) in scores.iter().zip(positive) {
        if pos {
            np += 1;
            tp += usize::from(s >= 0.0);
        } else {
            nn += 1;
            tn += usize::from(s < 0.0);
        }
    }
    match (np, nn) {
        (0, 0) => 0.0,
        (0, _) => tn as f64 / nn as f64,
        (_, 0) => tp as f64 / np as f64,
        _ => 0.5 * (tp as f64 / np as f64 + tn as f64 / nn as f64),
    }
}

/// Threshold at the saddle value, orientation from the labeled points
/// (balanced accuracy of `target` against all other labels).
pub fn build_classifier(
    model: &KoopmanModel,
    unitary: &UnitaryEigenfunction,
    saddle: &FixedPointReport,
    labeled: &LabeledSet,
    target: usize,
) -> Result<SaddleClassifier, RoaError> {
    if saddle.stability != Some(Stability::Saddle(1)) {
        return Err(RoaError::NotTypeOneSaddle);
    }
    let idx: Vec<usize> = (0..labeled.len()).collect();
    calibrate(unitary, &model.lift(&saddle.location)?, &saddle.location, labeled, &idx, target)
}

fn calibrate(
    unitary: &UnitaryEigenfunction,
    saddle_psi: &[f64],
    saddle: &[f64],
    labeled: &LabeledSet,
    subset: &[usize],
    target: usize,
) -> Result<SaddleClassifier, RoaError> {
    if subset.is_empty() {
        return Err(RoaError::NoLabels);
    }
    let at_saddle = unitary.eval_psi(saddle_psi);
    let c = at_saddle.value.re;
    let raw: Vec<f64> = subset
        .iter()
        .map(|&i| unitary.eval_psi(&labeled.psi[i]).value.re - c)
        .collect();
    let positive: Vec<bool> = subset.iter().map(|&i| labeled.labels[i] == target).collect();
    let plus = binary_accuracy(&raw, &positive);
    let neg: Vec<f64> = raw.iter().map(|v| -v).collect();
    let minus = binary_accuracy(&neg, &positive);
    let (orientation, acc) = if minus > plus { (-1.0, minus) } else { (1.0, plus) };
    if !(acc > 0.5) || !c.is_finite() {
        return Err(RoaError::Rejected(acc));
    }
    Ok(SaddleClassifier {
        unitary: unitary.clone(),
        saddle: saddle.to_vec(),
        threshold: c,
        orientation,
        target,
        saddle_branch: at_saddle.branch,
        training_accuracy: acc,
    })
}

/// Class-balanced, intercept-free logistic regression on saddle-centred,
/// standardized near-unit eigenfunction values. The returned weights act on
/// the raw eigenfunctions, so the decision threshold stays at the saddle.
fn fit_combination_weights(
    rows: &[Vec<(f64, f64)>],
    saddle_psi: &[f64],
    labeled: &LabeledSet,
    subset: &[usize],
    target: usize,
) -> Option<Vec<f64>> {
    let m = rows.len();
    let at_saddle: Vec<f64> = rows.iter().map(|r| dot(r, saddle_psi).re).collect();
    let feats: Vec<Vec<f64>> = subset
        .iter()
        .map(|&i| {
            rows.iter()
                .zip(&at_saddle)
                .map(|(r, s)| dot(r, &labeled.psi[i]).re - s)
                .collect()
        })
        .collect();
    let y: Vec<f64> = subset
        .iter()
        .map(|&i| if labeled.labels[i] == target { 1.0 } else { -1.0 })
        .collect();
    let npos = y.iter().filter(|&&v| v > 0.0).count();
    let nneg = y.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let scale: Vec<f64> = (0..m)
        .map(|j| {
            let k = feats.len() as f64;
            let mean = feats.iter().map(|f| f[j]).sum::<f64>() / k;
            let sd = (feats.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / k).sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| f.iter().zip(&scale).map(|(v, s)| v / s).collect())
        .collect();
    let weight: Vec<f64> = y
        .iter()
        .map(|&v| {
            let n = y.len() as f64;
            if v > 0.0 {
                n / (2.0 * npos as f64)
            } else {
                n / (2.0 * nneg as f64)
            }
        })
        .collect();
    let ridge = 1e-4;
    let mut beta = vec![0.0; m];
    for _ in 0..100 {
        let mut grad = vec![0.0; m];
        let mut hess = Mat::<f64>::zeros(m, m);
        for ((zi, &yi), &wi) in z.iter().zip(&y).zip(&weight) {
            let t: f64 = zi.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() * yi;
            let sig = 1.0 / (1.0 + t.exp());
            let curv = sig * (1.0 - sig);
            for a in 0..m {
                grad[a] -= wi * yi * sig * zi[a];
                for b in 0..m {
                    hess[(a, b)] += wi * curv * zi[a] * zi[b];
                }
            }
        }
        for a in 0..m {
            grad[a] += ridge * beta[a];
            hess[(a, a)] += ridge;
        }
        let g = Mat::from_fn(m, 1, |i, _| grad[i]);
        let step = hess.partial_piv_lu().solve(&g);
        let mut moved = 0.0f64;
        for a in 0..m {
            beta[a] -= step[(a, 0)];
            moved = moved.max(step[(a, 0)].abs());
        }
        if !moved.is_finite() {
            return None;
        }
        if moved < 1e-10 {
            break;
        }
    }
    Some(beta.iter().zip(&scale).map(|(b, s)| b / s).collect())
}

/// Ordered classifiers with a residual label for points none of them claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionList {
    pub classifiers: Vec<SaddleClassifier>,
    pub residual: usize,
    /// Balanced accuracy of the whole list on the calibration points.
    pub training_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLabel {
    pub label: usize,
    /// Score of the deciding classifier (the last one for residual labels).
    pub score: f64,
    /// Index of the deciding classifier; `None` for the residual label.
    pub stage: Option<usize>,
    pub cross_branch: bool,
}

impl DecisionList {
    pub fn classify_psi(&self, psi: &[f64]) -> PointLabel {
        let mut last = None;
        for (s, c) in self.classifiers.iter().enumerate() {
            let d = c.decide_psi(psi);
            if d.accept {
                return PointLabel {
                    label: c.target,
                    score: d.score,
                    stage: Some(s),
                    cross_branch: d.cross_branch,
                };
            }
            last = Some(d);
        }
        PointLabel {
            label: self.residual,
            score: last.map_or(0.0, |d| d.score),
            stage: None,
            cross_branch: last.is_some_and(|d| d.cross_branch),
        }
    }
}

/// First-match classification of states.
pub fn classify_points(
    model: &KoopmanModel,
    list: &DecisionList,
    points: &[Vec<f64>],
) -> Result<Vec<PointLabel>, RoaError> {
    points
        .iter()
        .map(|x| Ok(list.classify_psi(&model.lift(x)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub unitary: UnitaryOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            unitary: UnitaryOptions::default(),
        }
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Builds the candidate unitary eigenfunctions that do not depend on labels:
/// direct near-unit ones and products of ranked pairs with unit eigenvalue.
pub fn unitary_pool(
    model: &KoopmanModel,
    candidates: &[UnitaryCandidate],
    opts: &UnitaryOptions,
) -> Vec<UnitaryEigenfunction> {
    let top: Vec<&UnitaryCandidate> = candidates.iter().take(opts.max_candidates).collect();
    let mut pool = Vec::new();
    for c in &top {
        if c.direct {
            if let Ok(u) = UnitaryEigenfunction::direct(model, c.index, opts.eps_unit) {
                pool.push(u);
            }
        }
    }
    for a in &top {
        for b in &top {
            if a.index != b.index {
                if let Ok(u) = construct_unitary(model, a.index, b.index) {
                    if u.unit_distance <= opts.eps_unit {
                        pool.push(u);
                    }
                }
            }
        }
    }
    pool
}

struct StageChoice {
    classifier: SaddleClassifier,
}

fn best_stage(
    model: &KoopmanModel,
    pool: &[UnitaryEigenfunction],
    cluster: &[usize],
    saddles: &[(Vec<f64>, Vec<f64>)],
    labeled: &LabeledSet,
    subset: &[usize],
    target: usize,
) -> Option<StageChoice> {
    let cluster_rows: Vec<Vec<(f64, f64)>> = cluster.iter().map(|&i| row_of(model, i)).collect();
    let mut best: Option<SaddleClassifier> = None;
    for (loc, spsi) in saddles {
        let mut options: Vec<UnitaryEigenfunction> = pool.to_vec();
        if cluster.len() >= 2 {
            if let Some(w) = fit_combination_weights(&cluster_rows, spsi, labeled, subset, target) {
                options.push(UnitaryEigenfunction::combination(model, cluster, &w));
            }
        }
        for u in &options {
            if let Ok(c) = calibrate(u, spsi, loc, labeled, subset, target) {
                if best.as_ref().is_none_or(|b| c.training_accuracy > b.training_accuracy) {
                    best = Some(c);
                }
            }
        }
    }
    best.map(|classifier| StageChoice { classifier })
}

/// Searches stage orderings and, per stage, the (unitary eigenfunction,
/// saddle) pair that best separates the stage's target basin from the basins
/// not yet claimed. The ordering with the best overall balanced accuracy on
/// the labeled points wins.
pub fn calibrate_decision_list(
    model: &KoopmanModel,
    candidates: &[UnitaryCandidate],
    saddles: &[FixedPointReport],
    labeled: &LabeledSet,
    opts: &CalibrationOptions,
) -> Result<DecisionList, RoaError> {
    if labeled.is_empty() {
        return Err(RoaError::NoLabels);
    }
    let saddles: Vec<(Vec<f64>, Vec<f64>)> = saddles
        .iter()
        .filter(|s| s.stability == Some(Stability::Saddle(1)))
        .map(|s| Ok((s.location.clone(), model.lift(&s.location)?)))
        .collect::<Result<_, RoaError>>()?;
    if saddles.is_empty() {
        return Err(RoaError::NotTypeOneSaddle);
    }
    let mut targets: Vec<usize> = labeled.labels.clone();
    targets.sort_unstable();
    targets.dedup();
    if targets.len() < 2 {
        return Err(RoaError::NoClassifier);
    }
    let pool = unitary_pool(model, candidates, &opts.unitary);
    let cluster: Vec<usize> = candidates.iter().filter(|c| c.direct).map(|c| c.index).collect();
    let orderings = if targets.len() <= 4 {
        permutations(&targets)
    } else {
        vec![targets.clone()]
    };
    let results: Vec<Option<DecisionList>> = orderings
        .par_iter()
        .map(|order| {
            let (stages, residual) = order.split_at(order.len() - 1);
            let mut claimed: Vec<usize> = Vec::new();
            let mut list = Vec::new();
            for &target in stages {
                let subset: Vec<usize> = (0..labeled.len())
                    .filter(|&i| !claimed.contains(&labeled.labels[i]))
                    .collect();
                let choice = best_stage(model, &pool, &cluster, &saddles, labeled, &subset, target)?;
                list.push(choice.classifier);
                claimed.push(target);
            }
            let mut dl = DecisionList {
                classifiers: list,
                residual: residual[0],
                training_accuracy: 0.0,
            };
            let predicted: Vec<usize> = labeled.psi.iter().map(|p| dl.classify_psi(p).label).collect();
            dl.training_accuracy = balanced_accuracy(&labeled.labels, &predicted);
            Some(dl)
        })
        .collect();
    let mut best: Option<DecisionList> = None;
    for dl in results.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| dl.training_accuracy > b.training_accuracy) {
            best = Some(dl);
        }
    }
    best.ok_or(RoaError::NoClassifier)
}

/// Label of the stable point nearest to each trajectory's final state, or
/// `None` when it is farther than `radius`.
pub fn label_endpoints(dataset: &TrajectoryDataset, stable: &[(usize, Vec<f64>)], radius: f64) -> Vec<Option<usize>> {
    dataset
        .trajectories
        .iter()
        .map(|t| {
            let end = t.states.last()?;
            stable
                .iter()
                .map(|(label, p)| (dist(end, p), *label))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .filter(|(d, _)| *d <= radius)
                .map(|(_, l)| l)
        })
        .collect()
}

// ------------------------------------------------------------- boundary grid

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    pub axes: (usize, usize),
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `Re φ₊` at `(xs[i], ys[j])`, stored at `j * xs.len() + i`.
    pub values: Vec<f64>,
    pub level: f64,
    pub contours: Vec<Vec<Point>>,
    pub diagnostic: Option<String>,
}

impl BoundaryGrid {
    /// Whether node `(i, j)` has a grid neighbour on the other side of the level.
    /// Always false when the grid has no contour.
    pub fn on_contour(&self, i: usize, j: usize) -> bool {
        let nx = self.xs.len();
        let ny = self.ys.len();
        let v = |i: usize, j: usize| self.values[j * nx + i];
        let side = v(i, j) >= self.level;
        let mut nbrs = Vec::with_capacity(4);
        if i > 0 {
            nbrs.push((i - 1, j));
        }
        if i + 1 < nx {
            nbrs.push((i + 1, j));
        }
        if j > 0 {
            nbrs.push((i, j - 1));
        }
        if j + 1 < ny {
            nbrs.push((i, j + 1));
        }
        !self.contours.is_empty()
            && v(i, j).is_finite()
            && nbrs
                .into_iter()
                .any(|(a, b)| v(a, b).is_finite() && (v(a, b) >= self.level) != side)
    }

    /// Contour polyline passing closest to `p` (in the grid's axes).
    pub fn branch_nearest(&self, p: Point) -> Option<&Vec<Point>> {
        self.contours.iter().min_by(|a, b| {
            let da = a.iter().map(|q| dist(q, &p)).fold(f64::INFINITY, f64::min);
            let db = b.iter().map(|q| dist(q, &p)).fold(f64::INFINITY, f64::min);
            da.total_cmp(&db)
        })
    }

    /// Writes `x_a,x_b,re_phi,on_contour` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), std::io::Error> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| std::io::Error::other(e.to_string());
        w.write_record(["x_a", "x_b", "re_phi", "on_contour"]).map_err(io)?;
        for (j, y) in self.ys.iter().enumerate() {
            for (i, x) in self.xs.iter().enumerate() {
                w.write_record([
                    x.to_string(),
                    y.to_string(),
                    self.values[j * self.xs.len() + i].to_string(),
                    u8::from(self.on_contour(i, j)).to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()
    }
}

/// Relative value range below which a grid field counts as constant; the
/// same level as the default triviality test on eigenfunctions.
pub const FLAT_FIELD_RTOL: f64 = 1e-6;

/// `Re φ₊` on a 2-D slice through state space and its iso-contour at the
/// saddle value.
#[allow(clippy::too_many_arguments)]
pub fn boundary_grid(
    model: &KoopmanModel,
    unitary: &UnitaryEigenfunction,
    saddle: &[f64],
    axes: (usize, usize),
    bounds: [(f64, f64); 2],
    resolution: (usize, usize),
    frozen: &[f64],
) -> Result<BoundaryGrid, RoaError> {
    let n = model.state_dim();
    if resolution.0 < 2 || resolution.1 < 2 {
        return Err(RoaError::Resolution);
    }
    if axes.0 >= n || axes.1 >= n || axes.0 == axes.1 {
        return Err(RoaError::Axes(axes.0, axes.1, n));
    }
    if frozen.len() != n || saddle.len() != n {
        return Err(RoaError::DimensionMismatch {
            expected: n,
            got: frozen.len().min(saddle.len()),
        });
    }
    let lin = |(lo, hi): (f64, f64), k: usize| -> Vec<f64> {
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    };
    let xs = lin(bounds[0], resolution.0);
    let ys = lin(bounds[1], resolution.1);
    let level = unitary.eval_psi(&model.lift(saddle)?).value.re;
    let values: Vec<f64> = ys
        .par_iter()
        .flat_map_iter(|&y| {
            let xs = &xs;
            xs.iter().map(move |&x| {
                let mut s = frozen.to_vec();
                s[axes.0] = x;
                s[axes.1] = y;
                model
                    .lift(&s)
                    .map(|psi| unitary.eval_psi(&psi).value.re)
                    .unwrap_or(f64::NAN)
            })
        })
        .collect();
    let lo = values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let flat = !(hi - lo > FLAT_FIELD_RTOL * lo.abs().max(hi.abs()));
    let contours = if flat {
        Vec::new()
    } else {
        marching_squares(
            &ScalarGrid {
                xs: &xs,
                ys: &ys,
                values: &values,
            },
            level,
        )
    };
    let diagnostic = if flat {
        Some(format!("field is constant on the grid (range [{lo}, {hi}])"))
    } else {
        contours
            .is_empty()
            .then(|| format!("level {level} is outside the grid value range [{lo}, {hi}]"))
    };
    Ok(BoundaryGrid {
        axes,
        xs,
        ys,
        values,
        level,
        contours,
        diagnostic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, Family};
    use crate::edmd::{fit, FitOptions};

    fn halving_model() -> KoopmanModel {
        let xs: Vec<Vec<f64>> = [0.2, 0.7, 1.3, 2.0].iter().map(|&v| vec![v]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.5 * x[0]]).collect();
        let pairs = SnapshotPairs::from_columns(1, 1.0, &xs, &ys).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 1, 1, 1.0).unwrap();
        fit(&pairs, &spec, &FitOptions::default()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let m = halving_model();
        assert!(residual_objective(&m, &[0.0], 1).unwrap().abs() < 1e-24);
        assert!((residual_objective(&m, &[1.0], 1).unwrap() - 0.125).abs() < 1e-12);
        for i in 0..100 {
            let x = -5.0 + 0.1 * i as f64;
            assert!(residual_objective(&m, &[x], 1).unwrap() >= 0.0);
        }
    }

    #[test]
    fn linear_model_has_single_fixed_point() {
        let m = halving_model();
        let starts: Vec<Vec<f64>> = (0..10).map(|i| vec![-1.0 + 0.3 * i as f64]).collect();
        let found = find_fixed_points(&m, &starts, &FixedPointOptions::default()).unwrap();
        assert_eq!(found.points.len(), 1);
        assert!(found.points[0].location[0].abs() < 1e-8);
        assert!(matches!(
            find_fixed_points(&m, &[], &FixedPointOptions::default()),
            Err(RoaError::NoStarts)
        ));
    }

    #[test]
    fn rejected_minima_reported() {
        let m = halving_model();
        let opts = FixedPointOptions {
            bounds: Some(vec![(5.0, 6.0)]),
            ..Default::default()
        };
        let found = find_fixed_points(&m, &[vec![1.0]], &opts).unwrap();
        assert!(found.points.is_empty());
        assert!(found.best_rejected.is_some());
    }

    #[test]
    fn jacobian_of_linear_model() {
        let m = halving_model();
        let h = local_jacobian(&m, &[0.3]).unwrap();
        assert!((h[(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn stability_examples() {
        assert_eq!(classify_magnitudes(&[0.66, 0.82], 1e-3).class, Stability::AsymptoticallyStable);
        assert_eq!(classify_magnitudes(&[0.81, 1.10], 1e-3).class, Stability::Saddle(1));
        assert_eq!(classify_magnitudes(&[1.0, 0.5], 1e-3).class, Stability::NonHyperbolic);
        assert_eq!(classify_magnitudes(&[1.21, 1.22], 1e-3).class, Stability::Unstable);
        let o = classify_magnitudes(&[1.2, 0.9, 1.1], 1e-3);
        assert_eq!(o.class, Stability::Saddle(2));
        assert!((o.margin - 0.1).abs() < 1e-12);
        assert_eq!(o.magnitudes, vec![0.9, 1.1, 1.2]);
    }

    #[test]
    fn stability_from_matrix() {
        let h = Mat::from_fn(2, 2, |i, j| [[0.0, -1.2], [1.2, 0.0]][i][j]);
        assert_eq!(classify_stability(&h, 1e-3).unwrap().class, Stability::Unstable);
    }

    #[test]
    fn exponent_examples() {
        let (k2, mu) = unit_exponent(2.0, 0.5).unwrap();
        assert!((k2 - 1.0).abs() < 1e-15 && (mu - 1.0).abs() < 1e-15);
        let (k2, mu) = unit_exponent(1.07, 0.83).unwrap();
        assert!((k2 - 0.3631).abs() < 1e-4);
        assert!((mu - 1.0).abs() < 1e-12);
        assert!(unit_exponent(1.07, 1.0).is_none());
    }

    #[test]
    fn trivial_only_model_has_no_candidates() {
        let xs: Vec<Vec<f64>> = [0.2, 0.7, 1.3].iter().map(|&v| vec![v]).collect();
        let pairs = SnapshotPairs::from_columns(1, 1.0, &xs, &xs).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 1, 1, 1.0).unwrap();
        let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
        // Identity dynamics: both eigenvalues are 1, φ = Ψ up to mixing; the
        // state-dependent one survives. With a constant-only state set both are trivial.
        let states = vec![vec![0.5]; 5];
        assert!(matches!(
            select_unitary_candidates(&m, &states, &UnitaryOptions::default()),
            Err(RoaError::NoCandidates)
        ));
    }

    #[test]
    fn halving_candidates_exclude_trivial() {
        let m = halving_model();
        let states: Vec<Vec<f64>> = (0..20).map(|i| vec![0.1 * i as f64]).collect();
        let c = select_unitary_candidates(&m, &states, &UnitaryOptions::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert!((c[0].eigenvalue - 0.5).abs() < 1e-12);
        assert!(!c[0].direct);
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0]), 0.5);
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
    }

    #[test]
    fn decision_at_saddle_is_inclusive() {
        let m = halving_model();
        let u = UnitaryEigenfunction {
            construction: Construction::Direct { index: 1 },
            coefficients: vec![row_of(&m, 1)],
            eigenvalue: (1.0, 0.0),
            unit_distance: 0.0,
        };
        let psi = m.lift(&[0.7]).unwrap();
        let c = SaddleClassifier {
            threshold: u.eval_psi(&psi).value.re,
            unitary: u,
            saddle: vec![0.7],
            orientation: -1.0,
            target: 3,
            saddle_branch: None,
            training_accuracy: 1.0,
        };
        assert!(c.decide_psi(&psi).accept);
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(permutations(&[1, 2, 3]).len(), 6);
        assert_eq!(permutations(&[4]), vec![vec![4]]);
    }

    #[test]
    fn odd_power_keeps_sign() {
        assert!((odd_pow(-8.0, 1.0 / 3.0) + 2.0).abs() < 1e-12);
        assert!((odd_pow(8.0, 1.0 / 3.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_has_no_contour() {
        let xs: Vec<Vec<f64>> = (0..25).map(|i| vec![0.1 * (i % 5) as f64, 0.1 * (i / 5) as f64]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.5 * x[0], 0.8 * x[1]]).collect();
        let pairs = SnapshotPairs::from_columns(2, 1.0, &xs, &ys).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 1, 1.0).unwrap();
        let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
        let u = UnitaryEigenfunction::constant();
        let g = boundary_grid(&m, &u, &[0.0, 0.0], (0, 1), [(0.0, 1.0), (0.0, 1.0)], (20, 20), &[0.0, 0.0]).unwrap();
        assert!(g.contours.is_empty());
        assert!(g.diagnostic.as_deref().unwrap().contains("constant"));
        assert!((0..20).all(|i| (0..20).all(|j| !g.on_contour(i, j))));
    }
}
