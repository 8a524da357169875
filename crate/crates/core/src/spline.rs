//! Natural cubic regression splines and their double penalties.
//!
//! Basis functions are cardinal: the coefficient vector holds the values of
//! the curve at the knots. The curvature penalty S₁ integrates the squared
//! second derivative exactly; S₂ projects onto the null space of S₁ (the
//! straight lines), so λ₁S₁ + λ₂S₂ is positive definite for λ₁, λ₂ > 0.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Covariate {
    Stringency,
    Age,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ByFactor {
    Cause,
    Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnotPlacement {
    /// Quantiles of the distinct observed values.
    #[default]
    Quantile,
    /// Evenly spaced over the observed range.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothSpec {
    pub covariate: Covariate,
    pub by_factor: Option<ByFactor>,
    pub n_knots: usize,
    pub placement: KnotPlacement,
    pub baseline_level: Option<usize>,
}

impl SmoothSpec {
    pub fn main(covariate: Covariate, n_knots: usize, placement: KnotPlacement) -> Self {
        Self {
            covariate,
            by_factor: None,
            n_knots,
            placement,
            baseline_level: None,
        }
    }

    pub fn by(self, factor: ByFactor, baseline_level: usize) -> Self {
        Self {
            by_factor: Some(factor),
            baseline_level: Some(baseline_level),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_knots < 3 {
            return Err(Error::KnotCountTooSmall(self.n_knots));
        }
        if self.by_factor.is_some() != self.baseline_level.is_some() {
            return Err(Error::InvalidSmoothSpec(
                "baseline level must be given exactly when a by-factor is present".into(),
            ));
        }
        Ok(())
    }
}

/// Knot locations for `n_knots` knots over the values in `x`.
///
/// Quantile placement falls back to uniform spacing when there are fewer
/// distinct values than knots.
pub fn place_knots<T: Scalar>(x: &[T], n_knots: usize, placement: KnotPlacement) -> Result<Vec<T>> {
    if n_knots < 3 {
        return Err(Error::KnotCountTooSmall(n_knots));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut distinct: Vec<T> = x.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite covariate"));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateCovariate("covariate".into()));
    }
    let lo = distinct[0];
    let hi = distinct[distinct.len() - 1];
    let denom = T::from_count(n_knots - 1);
    let use_quantiles = placement == KnotPlacement::Quantile && distinct.len() >= n_knots;
    let knots = (0..n_knots)
        .map(|j| {
            let frac = T::from_count(j) / denom;
            if use_quantiles {
                let pos = frac * T::from_count(distinct.len() - 1);
                let i = pos.floor().to_usize().unwrap_or(0).min(distinct.len() - 2);
                let w = pos - T::from_count(i);
                distinct[i] * (T::one() - w) + distinct[i + 1] * w
            } else {
                lo + (hi - lo) * frac
            }
        })
        .collect::<Vec<_>>();
    if knots.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::NonIncreasingKnots);
    }
    Ok(knots)
}

/// Cardinal natural cubic spline basis on a fixed knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalCubicBasis<T: Scalar> {
    knots: Vec<T>,
    /// Maps knot values to second derivatives at the knots (zero at both ends).
    second_deriv: DMatrix<T>,
    centers: Option<DVector<T>>,
}

impl<T: Scalar> NaturalCubicBasis<T> {
    pub fn new(knots: Vec<T>) -> Result<Self> {
        let j = knots.len();
        if j < 3 {
            return Err(Error::KnotCountTooSmall(j));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonIncreasingKnots);
        }
        let (band, diff) = interior_system(&knots);
        let inner = band
            .cholesky()
            .expect("natural spline system is diagonally dominant")
            .solve(&diff);
        let mut second_deriv = DMatrix::zeros(j, j);
        second_deriv.view_mut((1, 0), (j - 2, j)).copy_from(&inner);
        Ok(Self {
            knots,
            second_deriv,
            centers: None,
        })
    }

    /// Places knots from `x` according to `spec` and centers the columns on `x`.
    pub fn from_spec(spec: &SmoothSpec, x: &[T]) -> Result<Self> {
        spec.validate()?;
        let knots = place_knots(x, spec.n_knots, spec.placement).map_err(|e| match e {
            Error::DegenerateCovariate(_) => Error::DegenerateCovariate(format!("{:?}", spec.covariate)),
            other => other,
        })?;
        Ok(Self::new(knots)?.centered_on(x))
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len()
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn centers(&self) -> Option<&DVector<T>> {
        self.centers.as_ref()
    }

    /// Subtracts the column means over `x` from every later evaluation.
    pub fn centered_on(mut self, x: &[T]) -> Self {
        let raw = self.eval_raw(x);
        let n = T::from_count(x.len().max(1));
        let means = DVector::from_iterator(raw.ncols(), raw.column_iter().map(|col| col.sum() / n));
        self.centers = Some(means);
        self
    }

    /// Uncentered basis row at `x`.
    pub fn eval_raw_row(&self, x: T) -> DVector<T> {
        let k = &self.knots;
        let j = k.len();
        let mut row = DVector::zeros(j);
        if x < k[0] || x > k[j - 1] {
            // linear continuation past the boundary knots
            let (edge, slope) = if x < k[0] {
                (0, self.slope_row(0, true))
            } else {
                (j - 1, self.slope_row(j - 2, false))
            };
            row[edge] = T::one();
            row.axpy(x - k[edge], &slope, T::one());
            return row;
        }
        let i = k.partition_point(|&kn| kn <= x).clamp(1, j - 1) - 1;
        let h = k[i + 1] - k[i];
        let a = (k[i + 1] - x) / h;
        let b = (x - k[i]) / h;
        row[i] += a;
        row[i + 1] += b;
        let h2 = h * h / c(6.0);
        let ca = (a * a * a - a) * h2;
        let cb = (b * b * b - b) * h2;
        for col in 0..j {
            row[col] += ca * self.second_deriv[(i, col)] + cb * self.second_deriv[(i + 1, col)];
        }
        row
    }

    // Row of first derivatives at the left (`left = true`) or right end of interval `i`.
    fn slope_row(&self, i: usize, left: bool) -> DVector<T> {
        let k = &self.knots;
        let j = k.len();
        let h = k[i + 1] - k[i];
        let mut row = DVector::zeros(j);
        row[i] -= h.recip();
        row[i + 1] += h.recip();
        let (wi, wi1) = if left {
            (-h / c(3.0), -h / c(6.0))
        } else {
            (h / c(6.0), h / c(3.0))
        };
        for col in 0..j {
            row[col] += wi * self.second_deriv[(i, col)] + wi1 * self.second_deriv[(i + 1, col)];
        }
        row
    }

    pub fn eval_raw(&self, x: &[T]) -> DMatrix<T> {
        let mut out = DMatrix::zeros(x.len(), self.n_basis());
        for (r, &xi) in x.iter().enumerate() {
            out.row_mut(r).copy_from(&self.eval_raw_row(xi).transpose());
        }
        out
    }

    /// Basis row at `x`, centered when centering constants are set.
    pub fn eval_row(&self, x: T) -> DVector<T> {
        let mut row = self.eval_raw_row(x);
        if let Some(cen) = &self.centers {
            row -= cen;
        }
        row
    }

    pub fn eval(&self, x: &[T]) -> DMatrix<T> {
        let mut out = self.eval_raw(x);
        if let Some(cen) = &self.centers {
            for mut r in out.row_iter_mut() {
                r -= cen.transpose();
            }
        }
        out
    }

    /// S₁: ∫ f''(x)² dx = βᵀS₁β over the knot range.
    pub fn curvature_penalty(&self) -> DMatrix<T> {
        let (band, diff) = interior_system(&self.knots);
        let solved = band.cholesky().expect("positive definite band").solve(&diff);
        let s = diff.transpose() * solved;
        symmetrize(s)
    }

    /// S₂: orthogonal projector onto span{1, knots}, the null space of S₁.
    pub fn nullspace_penalty(&self) -> DMatrix<T> {
        let j = self.n_basis();
        let n = DMatrix::from_fn(j, 2, |r, col| if col == 0 { T::one() } else { self.knots[r] });
        let qr = n.qr();
        let q = qr.q();
        symmetrize(&q * q.transpose())
    }
}

// Tridiagonal interior system B and second-difference operator D of a
// natural cubic spline: B·γ_interior = D·y.
fn interior_system<T: Scalar>(knots: &[T]) -> (DMatrix<T>, DMatrix<T>) {
    let j = knots.len();
    let h: Vec<T> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let mut band = DMatrix::zeros(j - 2, j - 2);
    let mut diff = DMatrix::zeros(j - 2, j);
    for r in 0..j - 2 {
        band[(r, r)] = (h[r] + h[r + 1]) / c(3.0);
        if r + 1 < j - 2 {
            band[(r, r + 1)] = h[r + 1] / c(6.0);
            band[(r + 1, r)] = h[r + 1] / c(6.0);
        }
        diff[(r, r)] = h[r].recip();
        diff[(r, r + 1)] = -h[r].recip() - h[r + 1].recip();
        diff[(r, r + 2)] = h[r + 1].recip();
    }
    (band, diff)
}

pub(crate) fn symmetrize<T: Scalar>(m: DMatrix<T>) -> DMatrix<T> {
    let t = m.transpose();
    (m + t) * c::<T>(0.5)
}

/// Centered basis matrix for the covariate values `x` (len(x) × J).
pub fn natural_cubic_basis<T: Scalar>(spec: &SmoothSpec, x: &[T]) -> Result<DMatrix<T>> {
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    let basis = NaturalCubicBasis::from_spec(spec, x)?;
    Ok(basis.eval(x))
}

/// (S₁, S₂) for a basis.
pub fn penalty_pair<T: Scalar>(basis: &NaturalCubicBasis<T>) -> (DMatrix<T>, DMatrix<T>) {
    (basis.curvature_penalty(), basis.nullspace_penalty())
}

/// A by-factor smooth: one basis copy per non-baseline level.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionBlocks<T: Scalar> {
    /// n × J(levels − 1), zero on rows of other levels.
    pub columns: DMatrix<T>,
    pub s1: DMatrix<T>,
    pub s2: DMatrix<T>,
    /// Factor level served by each column block, in order.
    pub levels: Vec<usize>,
}

/// Non-baseline levels in increasing order.
pub fn active_levels(n_levels: usize, baseline: usize) -> Vec<usize> {
    (0..n_levels).filter(|&l| l != baseline).collect()
}

/// Expands a marginal basis matrix into by-factor interaction columns with
/// block-diagonal penalties.
pub fn interaction_blocks<T: Scalar>(
    marginal: &DMatrix<T>,
    row_levels: &[usize],
    n_levels: usize,
    baseline: usize,
    penalties: (&DMatrix<T>, &DMatrix<T>),
) -> Result<InteractionBlocks<T>> {
    if n_levels < 2 {
        return Err(Error::SingleLevelFactor);
    }
    if baseline >= n_levels {
        return Err(Error::InvalidSmoothSpec(format!("baseline {baseline} out of {n_levels} levels")));
    }
    if row_levels.len() != marginal.nrows() {
        return Err(Error::DimensionMismatch("one factor level per basis row required".into()));
    }
    let j = marginal.ncols();
    let levels = active_levels(n_levels, baseline);
    let width = j * levels.len();
    let mut columns = DMatrix::zeros(marginal.nrows(), width);
    for (r, &lev) in row_levels.iter().enumerate() {
        if let Some(pos) = levels.iter().position(|&l| l == lev) {
            columns
                .view_mut((r, pos * j), (1, j))
                .copy_from(&marginal.row(r));
        }
    }
    Ok(InteractionBlocks {
        columns,
        s1: block_diagonal(penalties.0, levels.len()),
        s2: block_diagonal(penalties.1, levels.len()),
        levels,
    })
}

pub(crate) fn block_diagonal<T: Scalar>(block: &DMatrix<T>, copies: usize) -> DMatrix<T> {
    let j = block.nrows();
    let mut out = DMatrix::zeros(j * copies, j * copies);
    for b in 0..copies {
        out.view_mut((b * j, b * j), (j, j)).copy_from(block);
    }
    out
}
