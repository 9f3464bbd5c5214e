//! Extended dynamic mode decomposition: moment accumulation, the Koopman
//! fit `U_d = A G⁺`, spectral data, flow maps and prediction error.

use crate::basis::{BasisError, BasisSpec, Family};
use crate::dynamics::{SnapshotPairs, TrajectoryDataset};
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{c64, Mat, Side};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Snapshot pairs lifted per parallel work unit.
const CHUNK: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum EdmdError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("no snapshot pairs")]
    NoPairs,
    #[error("non-finite observable value at snapshot pair {0}")]
    NonFinite(usize),
    #[error(
        "moment matrix G has numerical rank {rank} of {d}, below the floor {floor}; \
         reduce p or q for a smaller dictionary"
    )]
    RankDeficient { rank: usize, d: usize, floor: usize },
    #[error("eigendecomposition failed: {0}")]
    Decomposition(String),
    #[error("spectral residual {residual:.3e} exceeds tolerance {tolerance:.1e}")]
    SpectrumInvalid { residual: f64, tolerance: f64 },
    #[error("backward evolution is singular: an eigenvalue has magnitude {0:.3e}")]
    SingularBackward(f64),
    #[error("prediction has imaginary residue {0:.3e} relative to its real part")]
    ImaginaryResidue(f64),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("no sweep candidates given")]
    EmptySweep,
    #[error("every sweep candidate failed")]
    SweepFailed,
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("model file shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `G = (1/N) Σ Ψ(xᵢ)Ψ(xᵢ)ᵀ` and `A = (1/N) Σ Ψ(yᵢ)Ψ(xᵢ)ᵀ`.
#[derive(Debug, Clone)]
pub struct MomentMatrices {
    pub g: Mat<f64>,
    pub a: Mat<f64>,
    pub count: usize,
}

fn lift_chunk(
    pairs: &SnapshotPairs,
    spec: &BasisSpec,
    range: std::ops::Range<usize>,
) -> Result<(Mat<f64>, Mat<f64>), EdmdError> {
    let d = spec.len();
    let rows = range.len();
    let mut px = Mat::<f64>::zeros(rows, d);
    let mut py = Mat::<f64>::zeros(rows, d);
    let mut buf = vec![0.0; d];
    for (r, i) in range.enumerate() {
        for (target, state) in [(&mut px, pairs.x(i)), (&mut py, pairs.y(i))] {
            spec.eval_into(state, &mut buf)?;
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(EdmdError::NonFinite(i));
            }
            for (l, &v) in buf.iter().enumerate() {
                target[(r, l)] = v;
            }
        }
    }
    Ok((px, py))
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Streams the snapshot pairs through the dictionary. Chunks are reduced in
/// a fixed pairwise tree so results do not depend on thread scheduling.
pub fn accumulate_moments(pairs: &SnapshotPairs, spec: &BasisSpec) -> Result<MomentMatrices, EdmdError> {
    let n = pairs.len();
    if n == 0 {
        return Err(EdmdError::NoPairs);
    }
    if pairs.n != spec.state_dim() {
        return Err(BasisError::DimensionMismatch {
            expected: spec.state_dim(),
            got: pairs.n,
        }
        .into());
    }
    let mut partial: Vec<(Mat<f64>, Mat<f64>)> = chunk_ranges(n)
        .into_par_iter()
        .map(|range| {
            let (px, py) = lift_chunk(pairs, spec, range)?;
            Ok((px.transpose() * &px, py.transpose() * &px))
        })
        .collect::<Result<_, EdmdError>>()?;
    while partial.len() > 1 {
        let mut it = partial.into_iter();
        let mut next = Vec::new();
        while let Some((g1, a1)) = it.next() {
            match it.next() {
                Some((g2, a2)) => next.push((g1 + g2, a1 + a2)),
                None => next.push((g1, a1)),
            }
        }
        partial = next;
    }
    let (g, a) = partial.pop().expect("at least one chunk");
    let scale = 1.0 / n as f64;
    Ok(MomentMatrices {
        g: g * faer::Scale(scale),
        a: a * faer::Scale(scale),
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Eigenvalues of `G` below `rtol · λ_max` are discarded in the pseudoinverse.
    pub rtol: f64,
    /// Cholesky is used when `cond(G)` is below this limit.
    pub cholesky_cond_limit: f64,
    /// Tolerance on the relative spectral residuals.
    pub spectral_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            cholesky_cond_limit: 1e8,
            spectral_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GSolver {
    Cholesky,
    Pseudoinverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub pairs: usize,
    pub rank: usize,
    /// `λ_max/λ_min` of `G`; absent when `G` is singular.
    pub condition: Option<f64>,
    pub solver: GSolver,
    /// Mean of `½‖Ψ(y) − U_d Ψ(x)‖²` over the training pairs.
    pub residual: f64,
    /// `‖U_d Ξ − Ξ diag(μ)‖ / ‖U_d‖` (Frobenius).
    pub right_residual: f64,
    /// `‖W U_d − diag(μ) W‖ / (‖U_d‖‖W‖)` (Frobenius).
    pub left_residual: f64,
    /// Per-coordinate range of the training states.
    pub data_bounds: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

/// A fitted finite Koopman approximation with its spectral data.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub spec: BasisSpec,
    pub u: Mat<f64>,
    /// Sorted by descending magnitude, then descending real part.
    pub eigenvalues: Vec<c64>,
    /// Right eigenvectors (columns), unit norm, largest entry real positive.
    pub xi: Mat<c64>,
    /// `Ξ⁻¹`; row `i` gives `φᵢ(x) = Wᵢ·Ψ(x)`.
    pub w: Mat<c64>,
    pub diagnostics: FitDiagnostics,
}

/// Mean of `½‖Ψ(yᵢ) − U Ψ(xᵢ)‖²` over the pairs.
pub fn fit_residual(u: &Mat<f64>, pairs: &SnapshotPairs, spec: &BasisSpec) -> Result<f64, EdmdError> {
    let n = pairs.len();
    if n == 0 {
        return Err(EdmdError::NoPairs);
    }
    let parts: Vec<f64> = chunk_ranges(n)
        .into_par_iter()
        .map(|range| {
            let (px, py) = lift_chunk(pairs, spec, range)?;
            let pred = &px * u.transpose();
            let diff = py - pred;
            Ok(0.5 * diff.squared_norm_l2())
        })
        .collect::<Result<_, EdmdError>>()?;
    Ok(parts.iter().sum::<f64>() / n as f64)
}

fn to_complex(m: &Mat<f64>) -> Mat<c64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| c64::new(m[(i, j)], 0.0))
}

fn frobenius(m: &Mat<c64>) -> f64 {
    m.norm_l2()
}

/// Orders, normalizes and inverts the eigendecomposition of `u`.
fn spectral_data(u: &Mat<f64>) -> Result<(Vec<c64>, Mat<c64>, Mat<c64>), EdmdError> {
    let d = u.nrows();
    let eig = u
        .eigen()
        .map_err(|e| EdmdError::Decomposition(format!("{e:?}")))?;
    let vals = eig.S().column_vector();
    let vecs = eig.U();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (vals[i], vals[j]);
        b.norm()
            .total_cmp(&a.norm())
            .then(b.re.total_cmp(&a.re))
            .then(b.im.total_cmp(&a.im))
    });
    let eigenvalues: Vec<c64> = order.iter().map(|&i| vals[i]).collect();
    let mut xi = Mat::<c64>::zeros(d, d);
    for (c, &i) in order.iter().enumerate() {
        let col = vecs.col(i);
        let norm = (0..d).map(|r| col[r].norm_sqr()).sum::<f64>().sqrt();
        let mut big = 0;
        for r in 1..d {
            if col[r].norm() > col[big].norm() {
                big = r;
            }
        }
        let pivot = col[big];
        let phase = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            c64::new(1.0, 0.0)
        };
        for r in 0..d {
            xi[(r, c)] = col[r] * phase / norm;
        }
        xi[(big, c)] = c64::new(xi[(big, c)].norm(), 0.0);
    }
    let w = xi.partial_piv_lu().inverse();
    Ok((eigenvalues, xi, w))
}

fn spectral_residuals(u: &Mat<f64>, mu: &[c64], xi: &Mat<c64>, w: &Mat<c64>) -> (f64, f64) {
    let uc = to_complex(u);
    let d = mu.len();
    let mut r = &uc * xi;
    for j in 0..d {
        for i in 0..d {
            r[(i, j)] -= xi[(i, j)] * mu[j];
        }
    }
    let mut l = w * &uc;
    for i in 0..d {
        for j in 0..d {
            l[(i, j)] -= mu[i] * w[(i, j)];
        }
    }
    let un = frobenius(&uc).max(f64::MIN_POSITIVE);
    (frobenius(&r) / un, frobenius(&l) / (un * frobenius(w).max(f64::MIN_POSITIVE)))
}

fn pairs_bounds(pairs: &SnapshotPairs) -> Vec<(f64, f64)> {
    let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); pairs.n];
    for (x, _) in pairs.iter() {
        for (bj, &v) in b.iter_mut().zip(x) {
            bj.0 = bj.0.min(v);
            bj.1 = bj.1.max(v);
        }
    }
    b
}

/// Least-squares Koopman fit `U_d = A G⁺` and its spectral decomposition.
pub fn fit(pairs: &SnapshotPairs, spec: &BasisSpec, opts: &FitOptions) -> Result<KoopmanModel, EdmdError> {
    let moments = accumulate_moments(pairs, spec)?;
    fit_from_moments(&moments, pairs, spec, opts)
}

pub fn fit_from_moments(
    moments: &MomentMatrices,
    pairs: &SnapshotPairs,
    spec: &BasisSpec,
    opts: &FitOptions,
) -> Result<KoopmanModel, EdmdError> {
    let d = spec.len();
    let mut warnings = Vec::new();
    if moments.count < d {
        warnings.push(format!(
            "{} snapshot pairs for {} observables; the fit is underdetermined",
            moments.count, d
        ));
    }
    let sym = moments
        .g
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| EdmdError::Decomposition(format!("{e:?}")))?;
    let lam = sym.S().column_vector();
    let lam_max = (0..d).map(|i| lam[i]).fold(0.0f64, f64::max);
    let lam_min = (0..d).map(|i| lam[i]).fold(f64::INFINITY, f64::min);
    let cutoff = opts.rtol * lam_max;
    let rank = (0..d).filter(|&i| lam[i] > cutoff).count();
    let floor = spec.state_dim() + 1;
    if rank < floor.min(d) {
        return Err(EdmdError::RankDeficient { rank, d, floor });
    }
    if rank < d {
        warnings.push(format!("G has numerical rank {rank} of {d}"));
    }
    let condition = (lam_min > 0.0).then(|| lam_max / lam_min);
    let chol = match condition {
        Some(c) if c < opts.cholesky_cond_limit => moments.g.llt(Side::Lower).ok(),
        _ => None,
    };
    let (u, solver) = match chol {
        Some(llt) => {
            // G symmetric: U = A G⁻¹ = (G⁻¹ Aᵀ)ᵀ.
            let sol = llt.solve(moments.a.transpose());
            (sol.transpose().to_owned(), GSolver::Cholesky)
        }
        None => {
            let v = sym.U();
            let inv = Mat::from_fn(d, 1, |i, _| if lam[i] > cutoff { 1.0 / lam[i] } else { 0.0 });
            let scaled = Mat::from_fn(d, d, |i, j| v[(i, j)] * inv[(j, 0)]);
            let g_pinv = &scaled * v.transpose();
            (&moments.a * &g_pinv, GSolver::Pseudoinverse)
        }
    };
    let (eigenvalues, xi, w) = spectral_data(&u)?;
    let (right_residual, left_residual) = spectral_residuals(&u, &eigenvalues, &xi, &w);
    for r in [right_residual, left_residual] {
        if !(r < opts.spectral_tol) {
            return Err(EdmdError::SpectrumInvalid {
                residual: r,
                tolerance: opts.spectral_tol,
            });
        }
    }
    let residual = fit_residual(&u, pairs, spec)?;
    Ok(KoopmanModel {
        spec: spec.clone(),
        u,
        eigenvalues,
        xi,
        w,
        diagnostics: FitDiagnostics {
            pairs: moments.count,
            rank,
            condition,
            solver,
            residual,
            right_residual,
            left_residual,
            data_bounds: pairs_bounds(pairs),
            warnings,
        },
    })
}

/// How multi-step predictions are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    /// `Ξ diag(μ)^k Φ(x)` evaluated once from the initial state.
    Spectral,
    /// The one-step map applied `k` times, re-lifting the recovered state each step.
    #[default]
    Iterated,
}

impl std::str::FromStr for Propagation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spectral" => Ok(Propagation::Spectral),
            "iterated" => Ok(Propagation::Iterated),
            o => Err(format!("unknown propagation {o:?} (expected spectral or iterated)")),
        }
    }
}

impl KoopmanModel {
    /// Dictionary size `d`.
    pub fn dim(&self) -> usize {
        self.spec.len()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    pub fn lift(&self, x: &[f64]) -> Result<Vec<f64>, EdmdError> {
        Ok(self.spec.eval(x)?)
    }

    /// `Φ(x) = W Ψ(x)`.
    pub fn eigenfunctions(&self, x: &[f64]) -> Result<Vec<c64>, EdmdError> {
        Ok(self.eigenfunctions_from_psi(&self.lift(x)?))
    }

    pub fn eigenfunctions_from_psi(&self, psi: &[f64]) -> Vec<c64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|l| self.w[(i, l)] * psi[l]).sum())
            .collect()
    }

    /// Row `i` of `W`, the coefficient vector of `φᵢ` in the dictionary.
    pub fn left_row(&self, i: usize) -> Vec<c64> {
        (0..self.dim()).map(|l| self.w[(i, l)]).collect()
    }

    fn powers(&self, k: i64) -> Result<Vec<c64>, EdmdError> {
        if k < 0 {
            if let Some(m) = self
                .eigenvalues
                .iter()
                .map(|m| m.norm())
                .find(|&m| m < 1e-12)
            {
                return Err(EdmdError::SingularBackward(m));
            }
        }
        let e = i32::try_from(k).map_err(|_| EdmdError::Format(format!("step count {k} out of range")))?;
        Ok(self.eigenvalues.iter().map(|m| m.powi(e)).collect())
    }

    fn take_real(v: Vec<c64>) -> Result<Vec<f64>, EdmdError> {
        let re = v.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
        let im = v.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        if im > 1e-6 * re.max(f64::MIN_POSITIVE) && im > 1e-300 {
            return Err(EdmdError::ImaginaryResidue(im / re.max(f64::MIN_POSITIVE)));
        }
        Ok(v.into_iter().map(|z| z.re).collect())
    }

    fn propagate_rows(&self, rows: &[usize], phi: &[c64], pw: &[c64]) -> Vec<c64> {
        let d = self.dim();
        rows.iter()
            .map(|&r| (0..d).map(|i| self.xi[(r, i)] * pw[i] * phi[i]).sum())
            .collect()
    }

    /// `Ξ diag(μ)^k Φ(x)`; negative `k` evolves backward.
    pub fn predict_observables(&self, x: &[f64], k: i64) -> Result<Vec<f64>, EdmdError> {
        let phi = self.eigenfunctions(x)?;
        let pw = self.powers(k)?;
        let rows: Vec<usize> = (0..self.dim()).collect();
        Self::take_real(self.propagate_rows(&rows, &phi, &pw))
    }

    /// State after `k` steps (negative for backward), read from the injective
    /// observables of the spectral prediction.
    pub fn flow(&self, x: &[f64], k: i64) -> Result<Vec<f64>, EdmdError> {
        let phi = self.eigenfunctions(x)?;
        let pw = self.powers(k)?;
        let v = Self::take_real(self.propagate_rows(self.spec.injective_positions(), &phi, &pw))?;
        Ok(self.spec.invert_injective(&v)?)
    }

    /// One-step map evaluated as `Ψ_B⁻¹(Bᵀ U_d Ψ(x))`; equal to `flow(x, 1)`
    /// up to rounding but real-valued throughout.
    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>, EdmdError> {
        let psi = self.lift(x)?;
        let v: Vec<f64> = self
            .spec
            .injective_positions()
            .iter()
            .map(|&r| (0..self.dim()).map(|l| self.u[(r, l)] * psi[l]).sum())
            .collect();
        Ok(self.spec.invert_injective(&v)?)
    }

    /// `step` applied `k` times.
    pub fn iterate(&self, x: &[f64], k: usize) -> Result<Vec<f64>, EdmdError> {
        let mut s = x.to_vec();
        for _ in 0..k {
            s = self.step(&s)?;
        }
        Ok(s)
    }

    /// Predicted states for `k = 1..=horizon` from `x0`.
    pub fn predict_sequence(
        &self,
        x0: &[f64],
        horizon: usize,
        propagation: Propagation,
    ) -> Result<Vec<Vec<f64>>, EdmdError> {
        let mut out = Vec::with_capacity(horizon);
        match propagation {
            Propagation::Iterated => {
                let mut s = x0.to_vec();
                for _ in 0..horizon {
                    s = self.step(&s)?;
                    if s.iter().any(|v| !v.is_finite()) {
                        out.resize(horizon, vec![f64::NAN; s.len()]);
                        return Ok(out);
                    }
                    out.push(s.clone());
                }
            }
            Propagation::Spectral => {
                let phi = self.eigenfunctions(x0)?;
                let rows = self.spec.injective_positions();
                let mut pw = vec![c64::new(1.0, 0.0); self.dim()];
                for _ in 0..horizon {
                    for (p, m) in pw.iter_mut().zip(&self.eigenvalues) {
                        *p *= m;
                    }
                    let v = Self::take_real(self.propagate_rows(rows, &phi, &pw))?;
                    out.push(self.spec.invert_injective(&v)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub e: f64,
    /// Number of test trajectories `N_s`.
    pub trajectories: usize,
    /// Evaluated horizon `K_i` per trajectory.
    pub horizons: Vec<usize>,
    /// Mean relative error per trajectory.
    pub per_trajectory: Vec<f64>,
    /// Samples skipped because `|Tᵏx| < 1e-9`.
    pub skipped: usize,
}

/// Mean relative multi-step prediction error for an arbitrary predictor that
/// maps `(x₀, K)` to the predicted states at `k = 1..=K`.
pub fn empirical_error_with<F>(test: &TrajectoryDataset, predict: F) -> Result<ErrorReport, EdmdError>
where
    F: Fn(&[f64], usize) -> Result<Vec<Vec<f64>>, EdmdError> + Sync,
{
    if test.trajectories.is_empty() {
        return Err(EdmdError::EmptyTestSet);
    }
    let per: Vec<(f64, usize, usize)> = test
        .trajectories
        .par_iter()
        .map(|t| {
            let horizon = t.states.len().saturating_sub(1);
            let pred = predict(&t.states[0], horizon)?;
            let mut sum = 0.0;
            let mut used = 0;
            let mut skipped = 0;
            for (truth, p) in t.states[1..].iter().zip(&pred) {
                let tn = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
                if tn < 1e-9 {
                    skipped += 1;
                    continue;
                }
                let dn = truth
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sum += if dn.is_finite() { dn / tn } else { f64::INFINITY };
                used += 1;
            }
            Ok((sum, used, skipped))
        })
        .collect::<Result<_, EdmdError>>()?;
    let total: f64 = per.iter().map(|p| p.0).sum();
    let count: usize = per.iter().map(|p| p.1).sum();
    Ok(ErrorReport {
        e: if count == 0 { 0.0 } else { total / count as f64 },
        trajectories: per.len(),
        horizons: per.iter().map(|p| p.1).collect(),
        per_trajectory: per
            .iter()
            .map(|p| if p.1 == 0 { 0.0 } else { p.0 / p.1 as f64 })
            .collect(),
        skipped: per.iter().map(|p| p.2).sum(),
    })
}

/// Empirical error of a fitted model over held-out trajectories.
pub fn empirical_error(
    model: &KoopmanModel,
    test: &TrajectoryDataset,
    propagation: Propagation,
) -> Result<ErrorReport, EdmdError> {
    empirical_error_with(test, |x0, k| model.predict_sequence(x0, k, propagation))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: u32,
    pub q: f64,
    pub d: usize,
    /// Empirical error; `+∞` when the candidate failed.
    pub e: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    pub fit: FitOptions,
    pub propagation: Propagation,
}

/// Fits one model per `(p, q)` and ranks them by empirical error on `test`.
pub fn pq_sweep(
    train: &SnapshotPairs,
    test: &TrajectoryDataset,
    ps: &[u32],
    qs: &[f64],
    family: Family,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>, EdmdError> {
    if ps.is_empty() || qs.is_empty() {
        return Err(EdmdError::EmptySweep);
    }
    let grid: Vec<(u32, f64)> = ps.iter().flat_map(|&p| qs.iter().map(move |&q| (p, q))).collect();
    let mut rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&(p, q)| {
            let spec = match BasisSpec::truncated(family, train.n, p, q) {
                Ok(s) => s,
                Err(e) => {
                    return SweepRow {
                        p,
                        q,
                        d: 0,
                        e: f64::INFINITY,
                        failure: Some(e.to_string()),
                    }
                }
            };
            let d = spec.len();
            let outcome = fit(train, &spec, &opts.fit)
                .and_then(|m| empirical_error(&m, test, opts.propagation));
            match outcome {
                Ok(r) if r.e.is_finite() => SweepRow {
                    p,
                    q,
                    d,
                    e: r.e,
                    failure: None,
                },
                Ok(_) => SweepRow {
                    p,
                    q,
                    d,
                    e: f64::INFINITY,
                    failure: Some("predictions diverged".into()),
                },
                Err(e) => SweepRow {
                    p,
                    q,
                    d,
                    e: f64::INFINITY,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| a.e.total_cmp(&b.e));
    if rows.iter().all(|r| r.failure.is_some()) {
        return Err(EdmdError::SweepFailed);
    }
    Ok(rows)
}

pub const MODEL_FORMAT: &str = "koopman-roa-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dimension: usize,
    basis: BasisSpec,
    injective_positions: Vec<usize>,
    /// Row-major `U_d`.
    koopman: Vec<f64>,
    /// Interleaved `re, im`.
    eigenvalues: Vec<f64>,
    /// Row-major, interleaved `re, im`.
    right_eigenvectors: Vec<f64>,
    /// Row-major, interleaved `re, im`.
    left_eigenvectors: Vec<f64>,
    diagnostics: FitDiagnostics,
}

fn real_rows(m: &Mat<f64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
        .collect()
}

fn complex_rows(m: &Mat<c64>) -> Vec<f64> {
    (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).flat_map(move |j| [m[(i, j)].re, m[(i, j)].im]))
        .collect()
}

fn check_len(name: &str, v: &[f64], want: usize) -> Result<(), EdmdError> {
    if v.len() == want {
        Ok(())
    } else {
        Err(EdmdError::Shape(format!("{name} has {} entries, expected {want}", v.len())))
    }
}

/// Serializes a model as a versioned JSON document.
pub fn model_to_string(model: &KoopmanModel) -> Result<String, EdmdError> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        dimension: model.dim(),
        basis: model.spec.clone(),
        injective_positions: model.spec.injective_positions().to_vec(),
        koopman: real_rows(&model.u),
        eigenvalues: model.eigenvalues.iter().flat_map(|z| [z.re, z.im]).collect(),
        right_eigenvectors: complex_rows(&model.xi),
        left_eigenvectors: complex_rows(&model.w),
        diagnostics: model.diagnostics.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| EdmdError::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Parses and re-validates a model document.
pub fn model_from_str(text: &str) -> Result<KoopmanModel, EdmdError> {
    let probe: serde_json::Value = serde_json::from_str(text).map_err(|e| EdmdError::Format(e.to_string()))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(MODEL_FORMAT) {
        return Err(EdmdError::Format("not a koopman-roa model document".into()));
    }
    let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != MODEL_VERSION {
        return Err(EdmdError::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(probe).map_err(|e| EdmdError::Format(e.to_string()))?;
    let spec = file.basis.revalidate()?;
    let d = spec.len();
    if file.dimension != d {
        return Err(EdmdError::Shape(format!(
            "dimension field {} disagrees with {} basis indices",
            file.dimension, d
        )));
    }
    if file.injective_positions != spec.injective_positions() {
        return Err(EdmdError::Shape("injective positions disagree with the basis".into()));
    }
    check_len("koopman", &file.koopman, d * d)?;
    check_len("eigenvalues", &file.eigenvalues, 2 * d)?;
    check_len("right_eigenvectors", &file.right_eigenvectors, 2 * d * d)?;
    check_len("left_eigenvectors", &file.left_eigenvectors, 2 * d * d)?;
    let u = Mat::from_fn(d, d, |i, j| file.koopman[i * d + j]);
    let cm = |v: &[f64]| {
        Mat::from_fn(d, d, |i, j| {
            let k = 2 * (i * d + j);
            c64::new(v[k], v[k + 1])
        })
    };
    let xi = cm(&file.right_eigenvectors);
    let w = cm(&file.left_eigenvectors);
    let eigenvalues: Vec<c64> = file
        .eigenvalues
        .chunks_exact(2)
        .map(|p| c64::new(p[0], p[1]))
        .collect();
    let (r, l) = spectral_residuals(&u, &eigenvalues, &xi, &w);
    let tol = FitOptions::default().spectral_tol;
    for res in [r, l] {
        if !(res < tol) {
            return Err(EdmdError::SpectrumInvalid {
                residual: res,
                tolerance: tol,
            });
        }
    }
    Ok(KoopmanModel {
        spec,
        u,
        eigenvalues,
        xi,
        w,
        diagnostics: file.diagnostics,
    })
}

pub fn save_model(model: &KoopmanModel, path: &std::path::Path) -> Result<(), EdmdError> {
    std::fs::write(path, model_to_string(model)?)?;
    Ok(())
}

pub fn load_model(path: &std::path::Path) -> Result<KoopmanModel, EdmdError> {
    model_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{truncated_indices, MultiIndex, MultiIndexSet};
    use crate::dynamics::Trajectory;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn halving_pairs() -> SnapshotPairs {
        let xs: Vec<Vec<f64>> = [0.2, 0.7, 1.3, 2.0].iter().map(|&v| vec![v]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![0.5 * x[0]]).collect();
        SnapshotPairs::from_columns(1, 1.0, &xs, &ys).unwrap()
    }

    fn halving_model() -> KoopmanModel {
        let spec = BasisSpec::truncated(Family::Laguerre, 1, 1, 1.0).unwrap();
        fit(&halving_pairs(), &spec, &FitOptions::default()).unwrap()
    }

    fn random_pairs(n: usize, count: usize, seed: u64) -> SnapshotPairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        SnapshotPairs::from_columns(n, 0.1, &xs, &ys).unwrap()
    }

    #[test]
    fn moments_constant_only() {
        let set = MultiIndexSet {
            n: 1,
            p: 1,
            q: 1.0,
            indices: vec![MultiIndex(vec![0]), MultiIndex(vec![1])],
        };
        let spec = BasisSpec::new(Family::Laguerre, set, None).unwrap();
        let pairs = SnapshotPairs::from_columns(1, 1.0, &[vec![0.0]], &[vec![0.0]]).unwrap();
        let m = accumulate_moments(&pairs, &spec).unwrap();
        assert_eq!(m.g[(0, 0)], 1.0);
        assert_eq!(m.a[(0, 0)], 1.0);
    }

    #[test]
    fn moments_identity_dynamics() {
        let mut p = random_pairs(2, 50, 1);
        let xs: Vec<Vec<f64>> = (0..p.len()).map(|i| p.x(i).to_vec()).collect();
        p = SnapshotPairs::from_columns(2, 0.1, &xs, &xs).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 2, 1.0).unwrap();
        let m = accumulate_moments(&p, &spec).unwrap();
        assert_eq!(m.g, m.a);
    }

    #[test]
    fn moments_match_naive_oracle() {
        let spec = BasisSpec::truncated(Family::Hermite, 1, 2, 1.0).unwrap();
        for count in [3, 5000] {
            let pairs = random_pairs(1, count, 2);
            let m = accumulate_moments(&pairs, &spec).unwrap();
            let mut g = [[0.0; 3]; 3];
            let mut a = [[0.0; 3]; 3];
            for (x, y) in pairs.iter() {
                let px = [1.0, x[0], x[0] * x[0] - 1.0];
                let py = [1.0, y[0], y[0] * y[0] - 1.0];
                for i in 0..3 {
                    for j in 0..3 {
                        g[i][j] += px[i] * px[j] / count as f64;
                        a[i][j] += py[i] * px[j] / count as f64;
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert!((m.g[(i, j)] - g[i][j]).abs() < 1e-12 * g[i][j].abs().max(1.0));
                    assert!((m.a[(i, j)] - a[i][j]).abs() < 1e-12 * a[i][j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn moments_report_non_finite_pair() {
        let spec = BasisSpec::truncated(Family::Laguerre, 1, 2, 1.0).unwrap();
        let pairs =
            SnapshotPairs::from_columns(1, 1.0, &[vec![0.0], vec![1e200]], &[vec![0.0], vec![0.0]]).unwrap();
        assert!(matches!(accumulate_moments(&pairs, &spec), Err(EdmdError::NonFinite(1))));
    }

    #[test]
    fn identity_dynamics_fit_identity() {
        let p = random_pairs(2, 200, 3);
        let xs: Vec<Vec<f64>> = (0..p.len()).map(|i| p.x(i).to_vec()).collect();
        let p = SnapshotPairs::from_columns(2, 0.1, &xs, &xs).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 3, 1.0).unwrap();
        let m = fit(&p, &spec, &FitOptions::default()).unwrap();
        for i in 0..spec.len() {
            for j in 0..spec.len() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((m.u[(i, j)] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn halving_map_fit() {
        let m = halving_model();
        let want = [[1.0, 0.0], [0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.u[(i, j)] - want[i][j]).abs() < 1e-12, "{:?}", m.u);
            }
        }
        assert!((m.eigenvalues[0].re - 1.0).abs() < 1e-12);
        assert!((m.eigenvalues[1].re - 0.5).abs() < 1e-12);
    }

    #[test]
    fn halving_map_eigenfunctions() {
        let m = halving_model();
        for x in [0.3, 1.0, 1.7] {
            let phi = m.eigenfunctions(&[x]).unwrap();
            let phi_half = m.eigenfunctions(&[0.5 * x]).unwrap();
            // Trivial eigenfunction is constant; the other is proportional to −x.
            assert!((phi[0] - m.eigenfunctions(&[0.0]).unwrap()[0]).norm() < 1e-12);
            let ratio = phi[1].re / -x;
            assert!(ratio > 0.0);
            assert!((phi[1].re / -x - ratio).abs() < 1e-12);
            assert!((phi_half[1] - phi[1] * 0.5).norm() < 1e-12);
        }
    }

    #[test]
    fn halving_map_prediction_and_flow() {
        let m = halving_model();
        let psi0 = m.lift(&[1.3]).unwrap();
        let p0 = m.predict_observables(&[1.3], 0).unwrap();
        for (a, b) in p0.iter().zip(&psi0) {
            assert!((a - b).abs() < 1e-12);
        }
        let p2 = m.predict_observables(&[1.0], 2).unwrap();
        let want = m.lift(&[0.25]).unwrap();
        for (a, b) in p2.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m.flow(&[1.0], 3).unwrap()[0] - 0.125).abs() < 1e-12);
        assert!((m.flow(&[0.125], -3).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((m.step(&[1.0]).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_flow_with_zero_eigenvalue_is_singular() {
        // y = 0 maps everything to the origin; U_d has a zero eigenvalue.
        let xs: Vec<Vec<f64>> = [0.2, 0.7, 1.3].iter().map(|&v| vec![v]).collect();
        let ys = vec![vec![0.0]; 3];
        let pairs = SnapshotPairs::from_columns(1, 1.0, &xs, &ys).unwrap();
        let spec = BasisSpec::truncated(Family::Legendre, 1, 1, 1.0).unwrap();
        let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
        assert!(matches!(m.flow(&[1.0], -1), Err(EdmdError::SingularBackward(_))));
        assert!(m.flow(&[1.0], 2).is_ok());
    }

    #[test]
    fn eigenvalues_sorted() {
        let pairs = random_pairs(2, 300, 9);
        let spec = BasisSpec::truncated(Family::Legendre, 2, 2, 1.0).unwrap();
        let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
        for w in m.eigenvalues.windows(2) {
            assert!(w[0].norm() >= w[1].norm());
        }
        for j in 0..m.dim() {
            let norm: f64 = (0..m.dim()).map(|i| m.xi[(i, j)].norm_sqr()).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_floor_diagnostic() {
        // All samples at one point: G has rank 1.
        let xs = vec![vec![0.5, 0.5]; 10];
        let pairs = SnapshotPairs::from_columns(2, 1.0, &xs, &xs).unwrap();
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 2, 1.0).unwrap();
        let err = fit(&pairs, &spec, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, EdmdError::RankDeficient { rank: 1, .. }));
        assert!(err.to_string().contains("reduce p or q"));
    }

    #[test]
    fn empirical_error_formula() {
        let test = TrajectoryDataset {
            dt: 0.1,
            trajectories: vec![
                Trajectory {
                    id: 0,
                    states: vec![vec![1.0, 2.0], vec![0.5, 1.0], vec![0.0, 0.0], vec![2.0, 1.0]],
                },
                Trajectory {
                    id: 1,
                    states: vec![vec![3.0, 1.0], vec![1.0, 1.0]],
                },
            ],
            seed: None,
        };
        let truth = test.clone();
        let exact = empirical_error_with(&test, |x0, k| {
            let t = truth.trajectories.iter().find(|t| t.states[0] == x0).unwrap();
            Ok(t.states[1..=k].to_vec())
        })
        .unwrap();
        assert_eq!(exact.e, 0.0);
        assert_eq!(exact.skipped, 1);
        let scaled = empirical_error_with(&test, |x0, k| {
            let t = truth.trajectories.iter().find(|t| t.states[0] == x0).unwrap();
            Ok(t.states[1..=k]
                .iter()
                .map(|s| s.iter().map(|v| 1.1 * v).collect())
                .collect())
        })
        .unwrap();
        assert!((scaled.e - 0.1).abs() < 1e-12);
        assert_eq!(scaled.horizons, vec![2, 1]);
        let empty = TrajectoryDataset {
            dt: 0.1,
            trajectories: vec![],
            seed: None,
        };
        assert!(matches!(
            empirical_error_with(&empty, |_, _| Ok(vec![])),
            Err(EdmdError::EmptyTestSet)
        ));
    }

    #[test]
    fn sweep_single_candidate_and_failure() {
        let traj = |x0: f64| Trajectory {
            id: 0,
            states: (0..6).map(|k| vec![x0 * 0.5f64.powi(k)]).collect(),
        };
        let ds = TrajectoryDataset {
            dt: 1.0,
            trajectories: vec![traj(1.0), traj(2.0)],
            seed: None,
        };
        let pairs = crate::dynamics::to_snapshots(&ds);
        let rows = pq_sweep(&pairs, &ds, &[1], &[1.0], Family::Laguerre, &SweepOptions::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].p, rows[0].d), (1, 2));
        assert!(rows[0].e < 1e-10);
        let rows = pq_sweep(&pairs, &ds, &[1, 2], &[1.0, -1.0], Family::Laguerre, &SweepOptions::default())
            .unwrap();
        assert!(rows.last().unwrap().e.is_infinite());
        assert!(rows.windows(2).all(|w| w[0].e <= w[1].e));
        assert!(matches!(
            pq_sweep(&pairs, &ds, &[], &[1.0], Family::Laguerre, &SweepOptions::default()),
            Err(EdmdError::EmptySweep)
        ));
        assert!(matches!(
            pq_sweep(&pairs, &ds, &[0], &[1.0], Family::Laguerre, &SweepOptions::default()),
            Err(EdmdError::SweepFailed)
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let pairs = random_pairs(2, 400, 4);
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 2, 1.0).unwrap();
        let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
        let s1 = model_to_string(&m).unwrap();
        let back = model_from_str(&s1).unwrap();
        assert_eq!(model_to_string(&back).unwrap(), s1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
            let a = m.flow(&x, 2).unwrap();
            let b = back.flow(&x, 2).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn model_file_rejects_tampering() {
        let pairs = random_pairs(2, 400, 4);
        let spec = BasisSpec::truncated(Family::Laguerre, 2, 2, 1.0).unwrap();
        let s = model_to_string(&fit(&pairs, &spec, &FitOptions::default()).unwrap()).unwrap();
        let tampered = s.replacen("\"dimension\": 6", "\"dimension\": 7", 1);
        assert!(matches!(model_from_str(&tampered), Err(EdmdError::Shape(_))));
        let old = s.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(model_from_str(&old), Err(EdmdError::Version { found: 2, .. })));
        assert!(matches!(model_from_str("{}"), Err(EdmdError::Format(_))));
        assert!(matches!(model_from_str("not json"), Err(EdmdError::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn modes_reconstruct_observables(seed in any::<u64>(), x in proptest::collection::vec(0.0f64..2.0, 2)) {
            let pairs = random_pairs(2, 300, seed);
            let spec = BasisSpec::new(Family::Legendre, truncated_indices(2, 3, 1.0).unwrap(), None).unwrap();
            let m = fit(&pairs, &spec, &FitOptions::default()).unwrap();
            let psi = m.lift(&x).unwrap();
            let back = m.predict_observables(&x, 0).unwrap();
            let scale = psi.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for (a, b) in back.iter().zip(&psi) {
                prop_assert!((a - b).abs() <= 1e-8 * scale);
            }
        }
    }
}
