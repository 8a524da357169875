//! Updates of the Gaussian factor q(β*, z) = N(m, M).

use nalgebra::{DMatrix, DVector};

use super::anderson::solve_fixed_point;
use super::search::backtrack;
use super::CaviConfig;
use crate::design::FitContext;
use crate::elbo::{half_log_det, poisson_part, poisson_weights};
use crate::error::{Error, Result};
use crate::kron::{assemble_expected_prior_precision, expected_prior_mean, ExpectedPriorPrecision};
use crate::model::VariationalState;
use crate::scalar::{c, Scalar};

/// Parts of the ELBO that depend on m.
fn m_objective<T: Scalar>(
    m: &DVector<T>,
    cov: &DMatrix<T>,
    mean: &DVector<T>,
    ctx: &FitContext<T>,
    op: &ExpectedPriorPrecision<T>,
) -> Result<T> {
    Ok(poisson_part(m, cov, &ctx.design, &ctx.response)? - op.quad_form(&(m - mean)) * c::<T>(0.5))
}

/// One undamped Newton step for a dense design, prior precision and mean.
/// Used as an independent reference for the structured update.
pub fn newton_step_dense<T: Scalar>(
    x: &DMatrix<T>,
    counts: &DVector<T>,
    offsets: &DVector<T>,
    prior_precision: &DMatrix<T>,
    prior_mean: &DVector<T>,
    m: &DVector<T>,
    cov: &DMatrix<T>,
) -> Result<DVector<T>> {
    let half = c::<T>(0.5);
    let w = DVector::from_fn(x.nrows(), |i, _| {
        let row = x.row(i);
        offsets[i] * (row.dot(&m.transpose()) + (row * cov * row.transpose())[0] * half).exp()
    });
    let grad = x.tr_mul(&(counts - &w)) - prior_precision * (m - prior_mean);
    let mut neg_h = prior_precision.clone();
    for i in 0..x.nrows() {
        let row = x.row(i).transpose();
        neg_h += &row * row.transpose() * w[i];
    }
    let ch = neg_h.cholesky().ok_or(Error::HessianFactorizationFailure)?;
    Ok(m + ch.solve(&grad))
}

/// Damped Newton ascent on m with M and the prior held fixed.
pub fn update_m<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>, cfg: &CaviConfig<T>) -> Result<DVector<T>> {
    let op = assemble_expected_prior_precision(&ctx.design, state, &ctx.priors)?;
    let mut lam = DMatrix::zeros(op.total_dim(), op.total_dim());
    op.add_to_dense(&mut lam);
    let mean = expected_prior_mean(&state.mu, &ctx.design);
    let mut m = state.m.clone();
    let mut f = m_objective(&m, &state.cov, &mean, ctx, &op)?;
    for iter in 0..cfg.newton_max_inner {
        let w = poisson_weights(&m, &state.cov, &ctx.design, &ctx.response)?;
        let grad = ctx.design.tr_mul_vec(&(&ctx.response.counts - &w)) - op.matvec(&(&m - &mean));
        let neg_h = ctx.design.weighted_gram(&w) + &lam;
        let ch = neg_h.cholesky().ok_or(Error::HessianFactorizationFailure)?;
        let step = ch.solve(&grad);
        let decrement = grad.dot(&step);
        // the predicted gain falls below rounding in f long before inner_tol
        // bites on the gradient, so stop on machine precision instead
        if decrement * c::<T>(0.5) <= T::default_epsilon() * (T::one() + f.abs()) {
            break;
        }
        let accepted = backtrack(f, T::one(), cfg.backtrack_shrink, cfg.backtrack_armijo, |a| {
            let trial = &m + &step * a;
            m_objective(&trial, &state.cov, &mean, ctx, &op).ok().map(|v| (v, a * decrement))
        });
        match accepted {
            Some(acc) => {
                m.axpy(acc.alpha, &step, T::one());
                f = acc.value;
            }
            None => {
                // The objective is concave, so a full step that still points
                // uphill at its end cannot have lowered it; this rescues steps
                // whose gain is lost in rounding.
                let trial = &m + &step;
                let wt = poisson_weights(&trial, &state.cov, &ctx.design, &ctx.response)?;
                let gt = ctx.design.tr_mul_vec(&(&ctx.response.counts - &wt)) - op.matvec(&(&trial - &mean));
                if gt.dot(&step) >= T::zero() {
                    m = trial;
                    f = m_objective(&m, &state.cov, &mean, ctx, &op)?;
                } else if iter == 0 {
                    return Err(Error::LineSearchStall("mean m".into()));
                } else {
                    break;
                }
            }
        }
    }
    Ok(m)
}

/// g(M) = (XᵀW(M)X + E(M₀⁻¹))⁻¹ at fixed m.
pub fn covariance_map<T: Scalar>(
    m: &DVector<T>,
    cov: &DMatrix<T>,
    ctx: &FitContext<T>,
    lam: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let w = poisson_weights(m, cov, &ctx.design, &ctx.response)?;
    let a = ctx.design.weighted_gram(&w) + lam;
    let ch = a
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("X'WX + E(M0^-1) is not positive definite".into()))?;
    Ok(crate::spline::symmetrize(ch.inverse()))
}

/// Result of the covariance fixed point.
#[derive(Debug, Clone)]
pub struct CovUpdate<T: Scalar> {
    pub cov: DMatrix<T>,
    pub iterations: usize,
    pub residual: T,
    pub converged: bool,
}

/// Parts of the ELBO that depend on M.
pub fn cov_objective<T: Scalar>(
    m: &DVector<T>,
    cov: &DMatrix<T>,
    ctx: &FitContext<T>,
    op: &ExpectedPriorPrecision<T>,
) -> Result<T> {
    let w = poisson_weights(m, cov, &ctx.design, &ctx.response)?;
    Ok(-w.sum() - op.trace_with(cov) * c::<T>(0.5) + half_log_det(cov)?)
}

/// Fixed-point update of M, Anderson-accelerated when `anderson_memory > 0`.
pub fn update_cov<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>, cfg: &CaviConfig<T>) -> Result<CovUpdate<T>> {
    update_cov_with_memory(state, ctx, cfg, cfg.anderson_memory)
}

pub fn update_cov_with_memory<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
    cfg: &CaviConfig<T>,
    memory: usize,
) -> Result<CovUpdate<T>> {
    let op = assemble_expected_prior_precision(&ctx.design, state, &ctx.priors)?;
    let lam = op.to_dense();
    let n = lam.nrows();
    let to_mat = |v: &DVector<T>| DMatrix::from_column_slice(n, n, v.as_slice());
    let x0 = DVector::from_column_slice(state.cov.as_slice());
    let res = solve_fixed_point(
        x0,
        |x| {
            let g = covariance_map(&state.m, &to_mat(x), ctx, &lam)?;
            Ok(DVector::from_column_slice(g.as_slice()))
        },
        memory,
        cfg.fixed_point_tol,
        cfg.fixed_point_max_iter,
        |x| to_mat(x).cholesky().is_some(),
    )?;
    Ok(CovUpdate {
        cov: to_mat(&res.point),
        iterations: res.iterations,
        residual: res.residual,
        converged: res.converged,
    })
}
