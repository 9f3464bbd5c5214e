//! Truncated tensor-product orthogonal polynomial dictionaries.
//!
//! A dictionary is a set of multi-indices `α` retained by the q-quasi-norm
//! rule `(Σ αᵢ^q)^(1/q) ≤ p`, paired with a univariate polynomial family.
//! Element `l` evaluates to `Π_j π_{α_j}(t_j)` where `t` is the (optionally
//! rescaled) state.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

/// Relative slack on the quasi-norm boundary test.
pub const QUASI_NORM_RTOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BasisError {
    #[error("maximum degree p must be at least 1 (got {0})")]
    DegreeTooSmall(u32),
    #[error("quasi-norm exponent q must be a positive finite number (got {0})")]
    InvalidExponent(f64),
    #[error("state dimension must be at least 1")]
    ZeroDimension,
    #[error("state has dimension {got}, basis expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain scale has a zero or non-finite slope on coordinate {0}")]
    DegenerateScale(usize),
    #[error("unknown polynomial family {0:?} (expected laguerre, hermite or legendre)")]
    UnknownFamily(String),
    #[error("index set is missing the unit index for coordinate {0}")]
    MissingUnitIndex(usize),
}

/// Univariate orthogonal polynomial family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Laguerre polynomials, `L₁(t) = 1 − t`.
    #[default]
    Laguerre,
    /// Probabilists' Hermite polynomials, `He₁(t) = t`.
    Hermite,
    /// Legendre polynomials, `P₁(t) = t`.
    Legendre,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Laguerre => "laguerre",
            Family::Hermite => "hermite",
            Family::Legendre => "legendre",
        }
    }

    /// Writes `π_0(t), …, π_{out.len()-1}(t)` into `out`.
    pub fn eval_all(self, t: f64, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        out[0] = 1.0;
        if out.len() == 1 {
            return;
        }
        out[1] = self.degree_one(t);
        for k in 1..out.len() - 1 {
            let kf = k as f64;
            out[k + 1] = match self {
                Family::Laguerre => ((2.0 * kf + 1.0 - t) * out[k] - kf * out[k - 1]) / (kf + 1.0),
                Family::Hermite => t * out[k] - kf * out[k - 1],
                Family::Legendre => ((2.0 * kf + 1.0) * t * out[k] - kf * out[k - 1]) / (kf + 1.0),
            };
        }
    }

    fn degree_one(self, t: f64) -> f64 {
        match self {
            Family::Laguerre => 1.0 - t,
            Family::Hermite | Family::Legendre => t,
        }
    }

    /// Inverse of the degree-one member.
    pub fn invert_degree_one(self, v: f64) -> f64 {
        match self {
            Family::Laguerre => 1.0 - v,
            Family::Hermite | Family::Legendre => v,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = BasisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "laguerre" => Ok(Family::Laguerre),
            "hermite" => Ok(Family::Hermite),
            "legendre" => Ok(Family::Legendre),
            other => Err(BasisError::UnknownFamily(other.to_string())),
        }
    }
}

/// Value of the degree-`k` member of `family` at `t`.
pub fn eval_univariate(family: Family, k: usize, t: f64) -> f64 {
    let mut buf = vec![0.0; k + 1];
    family.eval_all(t, &mut buf);
    buf[k]
}

/// Per-coordinate degrees `(α₁, …, α_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn degrees(&self) -> &[u32] {
        &self.0
    }

    pub fn total_degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `(Σ αᵢ^q)^(1/q)`, computed with the largest entry factored out so that
    /// large `q` cannot overflow.
    pub fn quasi_norm(&self, q: f64) -> f64 {
        let m = self.0.iter().copied().max().unwrap_or(0);
        if m == 0 {
            return 0.0;
        }
        let m = m as f64;
        let s: f64 = self
            .0
            .iter()
            .filter(|&&a| a > 0)
            .map(|&a| (a as f64 / m).powf(q))
            .sum();
        m * s.powf(1.0 / q)
    }

    fn is_unit(&self, j: usize) -> bool {
        self.0.iter().enumerate().all(|(i, &a)| a == u32::from(i == j))
    }
}

/// Graded lexicographic order: total degree first, then larger leading
/// degrees first, so `(1,0)` precedes `(0,1)`.
pub fn graded_lex(a: &MultiIndex, b: &MultiIndex) -> Ordering {
    a.total_degree()
        .cmp(&b.total_degree())
        .then_with(|| b.0.cmp(&a.0))
}

fn within_quasi_norm(alpha: &MultiIndex, p: u32, q: f64) -> bool {
    let p = p as f64;
    alpha.quasi_norm(q) - p <= QUASI_NORM_RTOL * p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiIndexSet {
    pub n: usize,
    pub p: u32,
    pub q: f64,
    pub indices: Vec<MultiIndex>,
}

impl MultiIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_degree(&self) -> u32 {
        self.indices
            .iter()
            .flat_map(|a| a.0.iter().copied())
            .max()
            .unwrap_or(0)
    }
}

/// All multi-indices of length `n` with `‖α‖_q ≤ p`, in graded lexicographic order.
pub fn truncated_indices(n: usize, p: u32, q: f64) -> Result<MultiIndexSet, BasisError> {
    if n == 0 {
        return Err(BasisError::ZeroDimension);
    }
    if p < 1 {
        return Err(BasisError::DegreeTooSmall(p));
    }
    if !(q.is_finite() && q > 0.0) {
        return Err(BasisError::InvalidExponent(q));
    }
    // Depth-first enumeration pruned (loosely) on the partial sum of scaled
    // powers; the exact boundary test is applied afterwards.
    let budget = 1.0 + 1e3 * QUASI_NORM_RTOL;
    let pf = p as f64;
    let mut out = Vec::new();
    let mut current = vec![0u32; n];
    fn recurse(
        j: usize,
        partial: f64,
        current: &mut Vec<u32>,
        out: &mut Vec<MultiIndex>,
        p: u32,
        pf: f64,
        q: f64,
        budget: f64,
    ) {
        if j == current.len() {
            out.push(MultiIndex(current.clone()));
            return;
        }
        for a in 0..=p {
            let term = if a == 0 { 0.0 } else { (a as f64 / pf).powf(q) };
            let s = partial + term;
            if s.powf(1.0 / q) > budget {
                break;
            }
            current[j] = a;
            recurse(j + 1, s, current, out, p, pf, q, budget);
        }
        current[j] = 0;
    }
    recurse(0, 0.0, &mut current, &mut out, p, pf, q, budget);
    out.retain(|a| within_quasi_norm(a, p, q));
    out.sort_by(graded_lex);
    Ok(MultiIndexSet { n, p, q, indices: out })
}

/// Per-coordinate affine map `t_j = slope_j · x_j + offset_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScale {
    pub slope: Vec<f64>,
    pub offset: Vec<f64>,
}

impl DomainScale {
    pub fn new(slope: Vec<f64>, offset: Vec<f64>) -> Result<Self, BasisError> {
        if slope.len() != offset.len() {
            return Err(BasisError::DimensionMismatch {
                expected: slope.len(),
                got: offset.len(),
            });
        }
        if let Some(j) = slope.iter().position(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(BasisError::DegenerateScale(j));
        }
        if let Some(j) = offset.iter().position(|o| !o.is_finite()) {
            return Err(BasisError::DegenerateScale(j));
        }
        Ok(Self { slope, offset })
    }

    /// Map sending the box `[lo_j, hi_j]` onto `[t_lo, t_hi]` coordinate-wise.
    pub fn from_box(bounds: &[(f64, f64)], t_lo: f64, t_hi: f64) -> Result<Self, BasisError> {
        let mut slope = Vec::with_capacity(bounds.len());
        let mut offset = Vec::with_capacity(bounds.len());
        for &(lo, hi) in bounds {
            let s = (t_hi - t_lo) / (hi - lo);
            slope.push(s);
            offset.push(t_lo - s * lo);
        }
        Self::new(slope, offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: Family,
    pub index_set: MultiIndexSet,
    pub domain_scale: Option<DomainScale>,
    #[serde(skip)]
    injective: Vec<usize>,
}

impl BasisSpec {
    pub fn new(
        family: Family,
        index_set: MultiIndexSet,
        domain_scale: Option<DomainScale>,
    ) -> Result<Self, BasisError> {
        if let Some(s) = &domain_scale {
            if s.slope.len() != index_set.n {
                return Err(BasisError::DimensionMismatch {
                    expected: index_set.n,
                    got: s.slope.len(),
                });
            }
        }
        if let Some(a) = index_set.indices.iter().find(|a| a.0.len() != index_set.n) {
            return Err(BasisError::DimensionMismatch {
                expected: index_set.n,
                got: a.0.len(),
            });
        }
        let mut injective = Vec::with_capacity(index_set.n);
        for j in 0..index_set.n {
            let l = index_set
                .indices
                .iter()
                .position(|a| a.is_unit(j))
                .ok_or(BasisError::MissingUnitIndex(j))?;
            injective.push(l);
        }
        Ok(Self {
            family,
            index_set,
            domain_scale,
            injective,
        })
    }

    /// Convenience constructor: truncated index set, identity scaling.
    pub fn truncated(family: Family, n: usize, p: u32, q: f64) -> Result<Self, BasisError> {
        Self::new(family, truncated_indices(n, p, q)?, None)
    }

    /// State dimension `n`.
    pub fn state_dim(&self) -> usize {
        self.index_set.n
    }

    /// Dictionary size `d`.
    pub fn len(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_set.is_empty()
    }

    /// `Ψ(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, BasisError> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// `Ψ(x)` written into `out`, which must have length `d`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), BasisError> {
        let n = self.state_dim();
        if x.len() != n {
            return Err(BasisError::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        if out.len() != self.len() {
            return Err(BasisError::DimensionMismatch {
                expected: self.len(),
                got: out.len(),
            });
        }
        let width = self.index_set.max_degree() as usize + 1;
        let mut table = vec![0.0; n * width];
        for (j, &xj) in x.iter().enumerate() {
            let t = match &self.domain_scale {
                Some(s) => s.slope[j] * xj + s.offset[j],
                None => xj,
            };
            self.family.eval_all(t, &mut table[j * width..(j + 1) * width]);
        }
        for (o, alpha) in out.iter_mut().zip(&self.index_set.indices) {
            *o = alpha
                .0
                .iter()
                .enumerate()
                .map(|(j, &a)| table[j * width + a as usize])
                .product();
        }
        Ok(())
    }

    /// Dictionary position of the unit index `e_j`, for each coordinate `j`.
    pub fn injective_positions(&self) -> &[usize] {
        &self.injective
    }

    /// Recovers the state from the values of the injective observables.
    pub fn invert_injective(&self, v: &[f64]) -> Result<Vec<f64>, BasisError> {
        let n = self.state_dim();
        if v.len() != n {
            return Err(BasisError::DimensionMismatch {
                expected: n,
                got: v.len(),
            });
        }
        Ok(v.iter()
            .enumerate()
            .map(|(j, &vj)| {
                let t = self.family.invert_degree_one(vj);
                match &self.domain_scale {
                    Some(s) => (t - s.offset[j]) / s.slope[j],
                    None => t,
                }
            })
            .collect())
    }

    /// Recovers the state from a full lifted vector by reading its injective entries.
    pub fn recover_state(&self, psi: &[f64]) -> Result<Vec<f64>, BasisError> {
        if psi.len() != self.len() {
            return Err(BasisError::DimensionMismatch {
                expected: self.len(),
                got: psi.len(),
            });
        }
        let v: Vec<f64> = self.injective.iter().map(|&l| psi[l]).collect();
        self.invert_injective(&v)
    }

    /// Rebuilds derived fields after deserialization.
    pub(crate) fn revalidate(self) -> Result<Self, BasisError> {
        Self::new(self.family, self.index_set, self.domain_scale)
    }
}
