//! Structured prior precision of the latent states.
//!
//! The AR(1) precision R is block tridiagonal in time with diagonal LK×LK
//! blocks. Under the variational Wisharts the expected latent precision keeps
//! that shape: each time block is Wᵀ·diag(e*)·W with W = V^k ⊗ V^l and e* a
//! Bartlett-weighted cumulative sum of the matching diagonal of E(R).

use nalgebra::{DMatrix, DVector};
use num_traits::Num;

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::model::{check_wishart_factor, Dims, PriorConfig, VariationalState};
use crate::scalar::{c, Scalar};
use crate::special::wishart_digamma_sum;

/// Which block of the AR precision an expectation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RBlock {
    /// First and last diagonal blocks, 1/(1−φ²).
    Corner,
    /// Blocks next to the diagonal, −φ/(1−φ²).
    OffDiagonal,
    /// Interior diagonal blocks, (1+φ²)/(1−φ²).
    Interior,
}

impl RBlock {
    pub const ALL: [RBlock; 3] = [RBlock::Corner, RBlock::OffDiagonal, RBlock::Interior];

    /// 1, 2 or 3.
    pub fn from_index(which: usize) -> Option<Self> {
        match which {
            1 => Some(RBlock::Corner),
            2 => Some(RBlock::OffDiagonal),
            3 => Some(RBlock::Interior),
            _ => None,
        }
    }
}

/// (corner, off-diagonal, interior) entries of R for one coefficient, in any
/// numeric type. Used with exact rationals in tests.
pub fn ar_block_entries<N: Num + Copy>(phi: N) -> (N, N, N) {
    let one = N::one();
    let denom = one - phi * phi;
    (one / denom, N::zero() - phi / denom, (one + phi * phi) / denom)
}

fn check_phi<T: Scalar>(phi: &DVector<T>) -> Result<()> {
    match phi.iter().enumerate().find(|(_, &p)| !(p.abs() < T::one())) {
        Some((index, &v)) => Err(Error::PhiOutOfRange {
            index,
            value: v.as_f64(),
        }),
        None => Ok(()),
    }
}

/// Dense AR(1) precision over `months` blocks, index `t·LK + i`.
pub fn ar_precision_dense<T: Scalar>(phi: &DVector<T>, months: usize) -> Result<DMatrix<T>> {
    check_phi(phi)?;
    let lk = phi.len();
    let mut r = DMatrix::zeros(lk * months, lk * months);
    for (i, &p) in phi.iter().enumerate() {
        let (corner, off, interior) = ar_block_entries(p);
        for t in 0..months {
            let d = if months == 1 {
                T::one()
            } else if t == 0 || t == months - 1 {
                corner
            } else {
                interior
            };
            r[(t * lk + i, t * lk + i)] = d;
            if t + 1 < months {
                r[(t * lk + i, (t + 1) * lk + i)] = off;
                r[((t + 1) * lk + i, t * lk + i)] = off;
            }
        }
    }
    Ok(r)
}

/// Diagonals of the three distinct blocks of E(R) at a point φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ArExpectations<T: Scalar> {
    pub e1: DVector<T>,
    pub e2: DVector<T>,
    pub e3: DVector<T>,
}

impl<T: Scalar> ArExpectations<T> {
    pub fn block(&self, which: RBlock) -> &DVector<T> {
        match which {
            RBlock::Corner => &self.e1,
            RBlock::OffDiagonal => &self.e2,
            RBlock::Interior => &self.e3,
        }
    }
}

pub fn expected_r_blocks<T: Scalar>(phi: &DVector<T>) -> Result<ArExpectations<T>> {
    check_phi(phi)?;
    let n = phi.len();
    let mut out = ArExpectations {
        e1: DVector::zeros(n),
        e2: DVector::zeros(n),
        e3: DVector::zeros(n),
    };
    for (i, &p) in phi.iter().enumerate() {
        let (a, b, cc) = ar_block_entries(p);
        out.e1[i] = a;
        out.e2[i] = b;
        out.e3[i] = cc;
    }
    Ok(out)
}

/// `order`-th derivatives (0, 1 or 2) of (e1, e2, e3) at a scalar φ.
pub fn ar_block_derivatives<T: Scalar>(phi: T, order: usize) -> (T, T, T) {
    let one = T::one();
    let s = one - phi * phi;
    match order {
        0 => ar_block_entries(phi),
        1 => {
            let d1 = (phi + phi) / (s * s);
            let d2 = -(one + phi * phi) / (s * s);
            (d1, d2, d1 + d1)
        }
        2 => {
            let s3 = s * s * s;
            let d1 = (c::<T>(2.0) + c::<T>(6.0) * phi * phi) / s3;
            let d2 = -(c::<T>(6.0) * phi + c::<T>(2.0) * phi * phi * phi) / s3;
            (d1, d2, d1 + d1)
        }
        _ => panic!("derivative order {order} not supported"),
    }
}

/// Second moments of the Bartlett factors: E[c_i²] = δ − i + 1 (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct BartlettMoments<T: Scalar> {
    pub chi2_means_k: DVector<T>,
    pub chi2_means_l: DVector<T>,
}

impl<T: Scalar> BartlettMoments<T> {
    pub fn new(delta_k: T, causes: usize, delta_l: T, regions: usize) -> Result<Self> {
        let means = |delta: T, dim: usize| -> Result<DVector<T>> {
            let min = T::from_count(dim) - T::one();
            if !(delta > min) {
                return Err(Error::DegreesOfFreedomTooSmall {
                    delta: delta.as_f64(),
                    min: min.as_f64(),
                });
            }
            Ok(DVector::from_fn(dim, |i, _| delta - T::from_count(i)))
        };
        Ok(Self {
            chi2_means_k: means(delta_k, causes)?,
            chi2_means_l: means(delta_l, regions)?,
        })
    }

    /// E[(A^k ⊗ A^l)ᵀ diag(e) (A^k ⊗ A^l)], which is diagonal.
    ///
    /// Entry (k, l) is Σ_{k'≤k} Σ_{l'≤l} w^k w^l e(k', l'), where a weight is
    /// the chi-square mean on the diagonal position and 1 above it.
    pub fn apply(&self, e: &DVector<T>) -> DVector<T> {
        let kk = self.chi2_means_k.len();
        let ll = self.chi2_means_l.len();
        assert_eq!(e.len(), kk * ll);
        // inner cumulative sum over regions
        let mut inner = DMatrix::zeros(kk, ll);
        for k1 in 0..kk {
            let mut acc = T::zero();
            for l2 in 0..ll {
                let v = e[k1 * ll + l2];
                inner[(k1, l2)] = acc + self.chi2_means_l[l2] * v;
                acc += v;
            }
        }
        let mut out = DVector::zeros(kk * ll);
        for l2 in 0..ll {
            let mut acc = T::zero();
            for k2 in 0..kk {
                let v = inner[(k2, l2)];
                out[k2 * ll + l2] = acc + self.chi2_means_k[k2] * v;
                acc += v;
            }
        }
        out
    }

    /// Transpose of [`BartlettMoments::apply`].
    pub fn apply_adjoint(&self, g: &DVector<T>) -> DVector<T> {
        let kk = self.chi2_means_k.len();
        let ll = self.chi2_means_l.len();
        assert_eq!(g.len(), kk * ll);
        let mut inner = DMatrix::zeros(kk, ll);
        for l2 in 0..ll {
            let mut acc = T::zero();
            for k1 in (0..kk).rev() {
                let v = g[k1 * ll + l2];
                inner[(k1, l2)] = acc + self.chi2_means_k[k1] * v;
                acc += v;
            }
        }
        let mut out = DVector::zeros(kk * ll);
        for k1 in 0..kk {
            let mut acc = T::zero();
            for l1 in (0..ll).rev() {
                let v = inner[(k1, l1)];
                out[k1 * ll + l1] = acc + self.chi2_means_l[l1] * v;
                acc += v;
            }
        }
        out
    }

    /// Derivative of `apply(e)` with respect to δ^k (`cause_side`) or δ^l.
    /// The map is affine in δ, so this is also the exact finite difference.
    pub fn apply_delta_derivative(&self, e: &DVector<T>, cause_side: bool) -> DVector<T> {
        let kk = self.chi2_means_k.len();
        let ll = self.chi2_means_l.len();
        let mut out = DVector::zeros(kk * ll);
        if cause_side {
            // only the diagonal cause weight moves
            for k2 in 0..kk {
                let mut acc = T::zero();
                for l2 in 0..ll {
                    let v = e[k2 * ll + l2];
                    out[k2 * ll + l2] = acc + self.chi2_means_l[l2] * v;
                    acc += v;
                }
            }
        } else {
            for l2 in 0..ll {
                let mut acc = T::zero();
                for k2 in 0..kk {
                    let v = e[k2 * ll + l2];
                    out[k2 * ll + l2] = acc + self.chi2_means_k[k2] * v;
                    acc += v;
                }
            }
        }
        out
    }
}

/// Diagonal of E[(A^k⊗A^l)ᵀ E_which(R) (A^k⊗A^l)] at the given φ.
pub fn bartlett_quadratic_expectation<T: Scalar>(
    phi: &DVector<T>,
    delta_k: T,
    causes: usize,
    delta_l: T,
    regions: usize,
    which: RBlock,
) -> Result<DVector<T>> {
    if phi.len() != causes * regions {
        return Err(Error::DimensionMismatch("phi must have length L*K".into()));
    }
    let moments = BartlettMoments::new(delta_k, causes, delta_l, regions)?;
    let ar = expected_r_blocks(phi)?;
    Ok(moments.apply(ar.block(which)))
}

/// Derivative (order 1 or 2) with respect to φ_i of the three Bartlett
/// expectations. Only entries (k, l) with k ≥ k_i and l ≥ l_i are nonzero.
pub fn phi_derivative_of_expectation<T: Scalar>(
    phi: &DVector<T>,
    delta_k: T,
    causes: usize,
    delta_l: T,
    regions: usize,
    coord: usize,
    order: usize,
) -> Result<[DVector<T>; 3]> {
    if coord >= phi.len() {
        return Err(Error::CoordOutOfRange {
            index: coord,
            size: phi.len(),
        });
    }
    if phi.len() != causes * regions {
        return Err(Error::DimensionMismatch("phi must have length L*K".into()));
    }
    if order == 0 || order > 2 {
        return Err(Error::InvalidConfig(format!("derivative order {order} not supported")));
    }
    check_phi(phi)?;
    let moments = BartlettMoments::new(delta_k, causes, delta_l, regions)?;
    let (d1, d2, d3) = ar_block_derivatives(phi[coord], order);
    let unit = |v: T| {
        let mut e = DVector::zeros(phi.len());
        e[coord] = v;
        moments.apply(&e)
    };
    Ok([unit(d1), unit(d2), unit(d3)])
}

/// W = V^k ⊗ V^l, the scale part of the Kronecker Cholesky factor.
pub fn kron_factor<T: Scalar>(v_k: &DMatrix<T>, v_l: &DMatrix<T>) -> DMatrix<T> {
    v_k.kronecker(v_l)
}

/// Wᵀ diag(e) W.
pub fn sandwich<T: Scalar>(w: &DMatrix<T>, e: &DVector<T>) -> DMatrix<T> {
    let mut scaled = w.clone();
    for (r, mut row) in scaled.row_iter_mut().enumerate() {
        row *= e[r];
    }
    let out = w.tr_mul(&scaled);
    crate::spline::symmetrize(out)
}

/// Bartlett-weighted diagonals e*_s for s = corner, off-diagonal, interior.
/// With a single month R is the identity and only the corner slot is used.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights<T: Scalar> {
    pub corner: DVector<T>,
    pub off: DVector<T>,
    pub interior: DVector<T>,
}

pub fn latent_weights<T: Scalar>(
    phi: &DVector<T>,
    moments: &BartlettMoments<T>,
    months: usize,
) -> Result<LatentWeights<T>> {
    let mut ar = expected_r_blocks(phi)?;
    if months == 1 {
        ar.e1.fill(T::one());
    }
    Ok(LatentWeights {
        corner: moments.apply(&ar.e1),
        off: moments.apply(&ar.e2),
        interior: moments.apply(&ar.e3),
    })
}

/// E_q(M₀⁻¹) in structured form.
#[derive(Debug, Clone)]
pub struct ExpectedPriorPrecision<T: Scalar> {
    dims: Dims,
    beta_dim: usize,
    /// Fixed-effect diagonal blocks: (first column, block).
    fixed: Vec<(usize, DMatrix<T>)>,
    /// Latent time-diagonal block at the two ends (or the only month).
    corner: DMatrix<T>,
    /// Latent time-diagonal block strictly inside.
    interior: DMatrix<T>,
    /// Latent block between consecutive months (symmetric).
    off: DMatrix<T>,
}

impl<T: Scalar> ExpectedPriorPrecision<T> {
    pub fn total_dim(&self) -> usize {
        self.beta_dim + self.dims.latent_dim()
    }

    pub fn beta_dim(&self) -> usize {
        self.beta_dim
    }

    pub fn corner_block(&self) -> &DMatrix<T> {
        &self.corner
    }

    pub fn interior_block(&self) -> &DMatrix<T> {
        &self.interior
    }

    pub fn off_diagonal_block(&self) -> &DMatrix<T> {
        &self.off
    }

    pub fn fixed_blocks(&self) -> &[(usize, DMatrix<T>)] {
        &self.fixed
    }

    fn months(&self) -> usize {
        self.dims.months
    }

    /// Time-diagonal block for month t.
    pub fn diagonal_block(&self, t: usize) -> &DMatrix<T> {
        if t == 0 || t + 1 == self.months() {
            &self.corner
        } else {
            &self.interior
        }
    }

    /// Σ_t of the time-diagonal blocks.
    pub fn time_diagonal_sum(&self) -> DMatrix<T> {
        let t = self.months();
        if t == 1 {
            return self.corner.clone();
        }
        &self.corner * c::<T>(2.0) + &self.interior * T::from_count(t - 2)
    }

    /// Sum of every latent block, Eᵀ Λ E with E = 1_T ⊗ I.
    pub fn all_blocks_sum(&self) -> DMatrix<T> {
        let t = self.months();
        self.time_diagonal_sum() + &self.off * T::from_count(2 * (t - 1))
    }

    pub fn matvec(&self, v: &DVector<T>) -> DVector<T> {
        assert_eq!(v.len(), self.total_dim());
        let mut out = DVector::zeros(v.len());
        for (start, b) in &self.fixed {
            let n = b.nrows();
            out.rows_mut(*start, n).copy_from(&(b * v.rows(*start, n)));
        }
        let lk = self.dims.latent_width();
        let p = self.beta_dim;
        let months = self.months();
        for t in 0..months {
            let mut acc = self.diagonal_block(t) * v.rows(p + t * lk, lk);
            if t > 0 {
                acc += &self.off * v.rows(p + (t - 1) * lk, lk);
            }
            if t + 1 < months {
                acc += &self.off * v.rows(p + (t + 1) * lk, lk);
            }
            out.rows_mut(p + t * lk, lk).copy_from(&acc);
        }
        out
    }

    pub fn quad_form(&self, v: &DVector<T>) -> T {
        self.matvec(v).dot(v)
    }

    /// tr(Λ·S) for a dense S of matching size.
    pub fn trace_with(&self, s: &DMatrix<T>) -> T {
        assert_eq!(s.nrows(), self.total_dim());
        let mut tr = T::zero();
        for (start, b) in &self.fixed {
            let n = b.nrows();
            tr += b.component_mul(&s.view((*start, *start), (n, n)).transpose()).sum();
        }
        let lk = self.dims.latent_width();
        let p = self.beta_dim;
        for t in 0..self.months() {
            let d = self.diagonal_block(t);
            tr += d.component_mul(&s.view((p + t * lk, p + t * lk), (lk, lk)).transpose()).sum();
            if t + 1 < self.months() {
                let up = s.view((p + t * lk, p + (t + 1) * lk), (lk, lk));
                let down = s.view((p + (t + 1) * lk, p + t * lk), (lk, lk));
                tr += self.off.component_mul(&up.transpose()).sum();
                tr += self.off.component_mul(&down.transpose()).sum();
            }
        }
        tr
    }

    /// Adds the operator into a dense matrix.
    pub fn add_to_dense(&self, target: &mut DMatrix<T>) {
        assert_eq!(target.nrows(), self.total_dim());
        for (start, b) in &self.fixed {
            let n = b.nrows();
            let mut v = target.view_mut((*start, *start), (n, n));
            v += b;
        }
        let lk = self.dims.latent_width();
        let p = self.beta_dim;
        for t in 0..self.months() {
            let mut v = target.view_mut((p + t * lk, p + t * lk), (lk, lk));
            v += self.diagonal_block(t);
            if t + 1 < self.months() {
                let mut up = target.view_mut((p + t * lk, p + (t + 1) * lk), (lk, lk));
                up += &self.off;
                let mut down = target.view_mut((p + (t + 1) * lk, p + t * lk), (lk, lk));
                down += &self.off;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut m = DMatrix::zeros(self.total_dim(), self.total_dim());
        self.add_to_dense(&mut m);
        m
    }
}

/// λ₁S₁ + λ₂S₂ for one smooth.
pub fn smooth_precision<T: Scalar>(s1: &DMatrix<T>, s2: &DMatrix<T>, l1: T, l2: T) -> DMatrix<T> {
    s1 * l1 + s2 * l2
}

/// Builds E_q(M₀⁻¹) from the current state.
pub fn assemble_expected_prior_precision<T: Scalar>(
    design: &ModelDesign<T>,
    state: &VariationalState<T>,
    priors: &PriorConfig<T>,
) -> Result<ExpectedPriorPrecision<T>> {
    let dims = design.dims();
    check_wishart_factor(state.delta_k, &state.v_k, dims.causes)?;
    check_wishart_factor(state.delta_l, &state.v_l, dims.regions)?;
    if state.lambda.len() != crate::model::N_SMOOTHING || state.phi.len() != dims.latent_width() {
        return Err(Error::InvalidState("lambda / phi lengths do not match the design".into()));
    }
    let mut fixed = Vec::with_capacity(6);
    let pd = design.parametric_dim();
    fixed.push((0, DMatrix::from_diagonal_element(pd, pd, priors.sigma2_beta.recip())));
    for term in design.smooths() {
        if term.width == 0 {
            continue;
        }
        let j = 2 * term.name.ordinal();
        fixed.push((
            term.offset,
            smooth_precision(&term.s1, &term.s2, state.lambda[j], state.lambda[j + 1]),
        ));
    }
    let moments = BartlettMoments::new(state.delta_k, dims.causes, state.delta_l, dims.regions)?;
    let weights = latent_weights(&state.phi, &moments, dims.months)?;
    let w = kron_factor(&state.v_k, &state.v_l);
    Ok(ExpectedPriorPrecision {
        dims,
        beta_dim: design.beta_dim(),
        fixed,
        corner: sandwich(&w, &weights.corner),
        interior: sandwich(&w, &weights.interior),
        off: sandwich(&w, &weights.off),
    })
}

/// E_q(m₀): zeros on fixed effects, μ tiled over months.
pub fn expected_prior_mean<T: Scalar>(mu: &DVector<T>, design: &ModelDesign<T>) -> DVector<T> {
    let p = design.beta_dim();
    let lk = design.dims().latent_width();
    assert_eq!(mu.len(), lk);
    let mut out = DVector::zeros(design.total_dim());
    for t in 0..design.dims().months {
        out.rows_mut(p + t * lk, lk).copy_from(mu);
    }
    out
}

/// Split of E_q log|M₀⁻¹| into its state-dependent pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDetParts<T> {
    /// Σ over smooths of log|λ₁S₁ + λ₂S₂|.
    pub smooths: T,
    /// (T−1) Σ log 1/(1−φ²).
    pub autoregressive: T,
    /// L·T [log|D^k| + Σψ((δ^k − i + 1)/2)].
    pub wishart_k: T,
    /// K·T [log|D^l| + Σψ((δ^l − i + 1)/2)].
    pub wishart_l: T,
}

impl<T: Scalar> LogDetParts<T> {
    pub fn total(&self) -> T {
        self.smooths + self.autoregressive + self.wishart_k + self.wishart_l
    }
}

/// log|VᵀV| for an upper-triangular V.
pub fn log_det_gram_upper<T: Scalar>(v: &DMatrix<T>) -> T {
    v.diagonal().iter().fold(T::zero(), |acc, &d| acc + (d * d).ln())
}

/// log|S| through Cholesky.
pub(crate) fn log_det_spd<T: Scalar>(s: &DMatrix<T>, what: &str) -> Result<T> {
    if s.nrows() == 0 {
        return Ok(T::zero());
    }
    let ch = nalgebra::Cholesky::new(s.clone()).ok_or_else(|| Error::CholeskyFailure(what.to_string()))?;
    Ok(ch.l().diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * c::<T>(2.0))
}

pub fn expected_log_det_parts<T: Scalar>(
    state: &VariationalState<T>,
    design: &ModelDesign<T>,
) -> Result<LogDetParts<T>> {
    let dims = design.dims();
    check_phi(&state.phi)?;
    check_wishart_factor(state.delta_k, &state.v_k, dims.causes)?;
    check_wishart_factor(state.delta_l, &state.v_l, dims.regions)?;
    let mut smooths = T::zero();
    for term in design.smooths() {
        let j = 2 * term.name.ordinal();
        let s = smooth_precision(&term.s1, &term.s2, state.lambda[j], state.lambda[j + 1]);
        smooths += log_det_spd(&s, term.name.label())?;
    }
    let months = T::from_count(dims.months);
    let ar = state
        .phi
        .iter()
        .fold(T::zero(), |acc, &p| acc - (T::one() - p * p).ln())
        * T::from_count(dims.months - 1);
    let wk = (log_det_gram_upper(&state.v_k) + wishart_digamma_sum(state.delta_k, dims.causes))
        * T::from_count(dims.regions)
        * months;
    let wl = (log_det_gram_upper(&state.v_l) + wishart_digamma_sum(state.delta_l, dims.regions))
        * T::from_count(dims.causes)
        * months;
    Ok(LogDetParts {
        smooths,
        autoregressive: ar,
        wishart_k: wk,
        wishart_l: wl,
    })
}

/// E_q log|M₀⁻¹| without the state-free constant
/// [`log_det_prior_constant`].
pub fn expected_log_det_prior_precision<T: Scalar>(
    state: &VariationalState<T>,
    design: &ModelDesign<T>,
    _priors: &PriorConfig<T>,
) -> Result<T> {
    Ok(expected_log_det_parts(state, design)?.total())
}

/// The part of E_q log|M₀⁻¹| left out of
/// [`expected_log_det_prior_precision`]: the fixed-effect prior
/// p₀·log(1/σ²_β) plus 2·T·L·K·log 2 from the chi-square log moments.
pub fn log_det_prior_constant<T: Scalar>(design: &ModelDesign<T>, priors: &PriorConfig<T>) -> T {
    let dims = design.dims();
    -T::from_count(design.parametric_dim()) * priors.sigma2_beta.ln()
        + T::from_count(2 * dims.latent_dim()) * c::<T>(2.0).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use num_rational::Rational64;

    fn dense_ar_covariance(phi: &[f64], months: usize) -> DMatrix<f64> {
        let lk = phi.len();
        DMatrix::from_fn(lk * months, lk * months, |r, c| {
            let (t, i) = (r / lk, r % lk);
            let (s, j) = (c / lk, c % lk);
            if i != j {
                0.0
            } else {
                phi[i].powi((t as i32 - s as i32).abs())
            }
        })
    }

    #[test]
    fn zero_phi_gives_identity() {
        for months in 1..5 {
            let r = ar_precision_dense(&DVector::from_element(3, 0.0_f64), months).unwrap();
            assert_eq!(r, DMatrix::identity(3 * months, 3 * months));
        }
    }

    #[test]
    fn half_phi_blocks_are_exact() {
        let r = ar_precision_dense(&DVector::from_element(1, 0.5_f64), 3).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[4.0, -2.0, 0.0, -2.0, 5.0, -2.0, 0.0, -2.0, 4.0]) / 3.0;
        assert_relative_eq!(r, expect, epsilon = 1e-14);
        let half = Rational64::new(1, 2);
        let (a, b, c) = ar_block_entries(half);
        assert_eq!((a, b, c), (Rational64::new(4, 3), Rational64::new(-2, 3), Rational64::new(5, 3)));
        let e = expected_r_blocks(&DVector::from_element(1, 0.5_f64)).unwrap();
        assert_relative_eq!(e.e1[0], 4.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(e.e2[0], -2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(e.e3[0], 5.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn precision_inverts_covariance() {
        let phi = [0.3, -0.7];
        let r = ar_precision_dense(&DVector::from_column_slice(&phi), 4).unwrap();
        let prod = r * dense_ar_covariance(&phi, 4);
        assert!((prod - DMatrix::identity(8, 8)).amax() < 1e-10);
    }

    #[test]
    fn block_identity_and_zero() {
        let e = expected_r_blocks(&DVector::from_element(2, 0.9_f64)).unwrap();
        assert_relative_eq!(e.e1[0] * e.e3[0] - e.e2[0] * e.e2[0], e.e1[0] * e.e1[0], max_relative = 1e-10);
        assert_relative_eq!(e.e3[0], 2.0 * e.e1[0] - 1.0, max_relative = 1e-12);
        let z = expected_r_blocks(&DVector::from_element(2, 0.0_f64)).unwrap();
        assert_eq!((z.e1[1], z.e2[1], z.e3[1]), (1.0, 0.0, 1.0));
        assert!(matches!(
            expected_r_blocks(&DVector::from_element(1, 1.0_f64)),
            Err(Error::PhiOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn scalar_bartlett_is_product_of_means() {
        let v = bartlett_quadratic_expectation(&DVector::from_element(1, 0.0_f64), 3.0, 1, 4.0, 1, RBlock::Corner)
            .unwrap();
        assert_relative_eq!(v[0], 12.0);
        let off =
            bartlett_quadratic_expectation(&DVector::from_element(6, 0.0_f64), 3.0, 2, 4.0, 3, RBlock::OffDiagonal)
                .unwrap();
        assert_eq!(off.amax(), 0.0);
        assert!(matches!(
            bartlett_quadratic_expectation(&DVector::from_element(4, 0.0_f64), 0.5, 2, 4.0, 2, RBlock::Corner),
            Err(Error::DegreesOfFreedomTooSmall { .. })
        ));
    }

    // Direct expansion over all index tuples, no cumulative sums.
    fn brute_bartlett(e: &[f64], delta_k: f64, kk: usize, delta_l: f64, ll: usize) -> Vec<f64> {
        let second = |delta: f64, r: usize, a: usize| -> f64 {
            if r == a {
                delta - r as f64
            } else if r < a {
                1.0
            } else {
                0.0
            }
        };
        let mut out = vec![0.0; kk * ll];
        for a in 0..kk {
            for b in 0..ll {
                for r in 0..kk {
                    for s in 0..ll {
                        out[a * ll + b] += e[r * ll + s] * second(delta_k, r, a) * second(delta_l, s, b);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cumulative_form_matches_expansion() {
        let e: Vec<f64> = (0..12).map(|i| 0.3 + (i as f64 * 1.3).sin()).collect();
        let m = BartlettMoments::new(4.5, 3, 5.2, 4).unwrap();
        let fast = m.apply(&DVector::from_column_slice(&e));
        let slow = brute_bartlett(&e, 4.5, 3, 5.2, 4);
        for i in 0..12 {
            assert_relative_eq!(fast[i], slow[i], epsilon = 1e-12);
        }
        // adjoint
        let g = DVector::from_fn(12, |i, _| (i as f64 * 0.77).cos());
        let lhs = fast.dot(&g);
        let rhs = DVector::from_column_slice(&e).dot(&m.apply_adjoint(&g));
        assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn delta_derivative_is_exact_difference() {
        let e = DVector::from_fn(6, |i, _| 1.0 + i as f64 * 0.1);
        for cause_side in [true, false] {
            let (dk, dl) = (3.0, 4.0);
            let base = BartlettMoments::new(dk, 2, dl, 3).unwrap().apply(&e);
            let bumped = if cause_side {
                BartlettMoments::new(dk + 1.0, 2, dl, 3)
            } else {
                BartlettMoments::new(dk, 2, dl + 1.0, 3)
            }
            .unwrap()
            .apply(&e);
            let d = BartlettMoments::new(dk, 2, dl, 3).unwrap().apply_delta_derivative(&e, cause_side);
            assert_relative_eq!(bumped - base, d, epsilon = 1e-12);
        }
    }

    #[test]
    fn phi_derivatives_match_finite_differences() {
        let phi = DVector::from_element(4, 0.4_f64);
        let h = 1e-5;
        for coord in 0..4 {
            let analytic = phi_derivative_of_expectation(&phi, 4.0, 2, 5.0, 2, coord, 1).unwrap();
            let second = phi_derivative_of_expectation(&phi, 4.0, 2, 5.0, 2, coord, 2).unwrap();
            for (s, which) in RBlock::ALL.into_iter().enumerate() {
                let f = |x: f64| {
                    let mut p = phi.clone();
                    p[coord] = x;
                    bartlett_quadratic_expectation(&p, 4.0, 2, 5.0, 2, which).unwrap()
                };
                let fd = (f(0.4 + h) - f(0.4 - h)) / (2.0 * h);
                assert!((fd - &analytic[s]).amax() < 1e-6);
                let fd2 = (f(0.4 + h) - f(0.4) * 2.0 + f(0.4 - h)) / (h * h);
                assert!((fd2 - &second[s]).amax() < 1e-3 * (1.0 + second[s].amax()));
                // sparsity: only positions whose cumulative sum reaches coord
                let (kc, lc) = (coord / 2, coord % 2);
                for idx in 0..4 {
                    if idx / 2 < kc || idx % 2 < lc {
                        assert_eq!(analytic[s][idx], 0.0);
                    }
                }
            }
        }
        let (d1, _, _) = ar_block_derivatives(0.0_f64, 1);
        assert_eq!(d1, 0.0);
        let (_, _, d3) = ar_block_derivatives(0.0_f64, 2);
        assert_relative_eq!(d3, 4.0);
        assert!(matches!(
            phi_derivative_of_expectation(&phi, 4.0, 2, 5.0, 2, 4, 1),
            Err(Error::CoordOutOfRange { index: 4, size: 4 })
        ));
    }

    #[test]
    fn large_delta_limit_is_plug_in() {
        let delta: f64 = 1e4;
        let phi = DVector::from_column_slice(&[0.3, -0.2, 0.5, 0.1]);
        let vk = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.0, 0.8]);
        let vl = DMatrix::from_row_slice(2, 2, &[0.9, -0.4, 0.0, 1.1]);
        let e = expected_r_blocks(&phi).unwrap();
        let m = BartlettMoments::new(delta, 2, delta, 2).unwrap();
        let scaled = kron_factor(&(&vk / delta.sqrt()), &(&vl / delta.sqrt()));
        for which in RBlock::ALL {
            let expected = sandwich(&scaled, &m.apply(e.block(which)));
            let p = kron_factor(&vk, &vl);
            let plug = p.transpose() * DMatrix::from_diagonal(e.block(which)) * &p;
            assert!((expected - &plug).amax() < 0.01 * plug.amax());
        }
    }

    proptest::proptest! {
        #[test]
        fn ar_identity_holds(phi in -0.999f64..0.999) {
            let e = expected_r_blocks(&DVector::from_element(1, phi)).unwrap();
            proptest::prop_assert!(e.e1[0] > 0.0 && e.e3[0] >= e.e1[0]);
            let det = e.e1[0] * e.e3[0] - e.e2[0] * e.e2[0];
            proptest::prop_assert!((det - e.e1[0] * e.e1[0]).abs() < 1e-9 * e.e1[0] * e.e3[0]);
        }

        #[test]
        fn bartlett_map_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u32..100) {
            let m = BartlettMoments::new(3.5, 2, 4.5, 3).unwrap();
            let x = DVector::from_fn(6, |i, _| ((i as u32 * 31 + seed) as f64).sin());
            let y = DVector::from_fn(6, |i, _| ((i as u32 * 17 + seed) as f64).cos());
            let lhs = m.apply(&(&x * a + &y * b));
            let rhs = m.apply(&x) * a + m.apply(&y) * b;
            proptest::prop_assert!((lhs - rhs).amax() < 1e-12);
        }
    }
}
