//! Projected Newton update of the smoothing parameters.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::search::backtrack;
use super::CaviConfig;
use crate::design::{FitContext, SmoothTerm};
use crate::error::{Error, Result};
use crate::kron::smooth_precision;
use crate::model::{PriorConfig, VariationalState};
use crate::scalar::{c, Scalar};

/// E[βᵀSβ] = mᵀSm + tr(S M) for both penalties of one smooth.
fn penalty_moments<T: Scalar>(term: &SmoothTerm<T>, state: &VariationalState<T>) -> (T, T) {
    let r = term.range();
    let mb = state.m.rows(r.start, term.width);
    let mbb = state.cov.view((r.start, r.start), (term.width, term.width));
    let f = |s: &DMatrix<T>| (mb.transpose() * s * mb)[0] + s.component_mul(&mbb).sum();
    (f(&term.s1), f(&term.s2))
}

/// λ-dependent ELBO of one smooth.
pub fn smooth_objective<T: Scalar>(term: &SmoothTerm<T>, a: (T, T), l: Vector2<T>, pr: &PriorConfig<T>) -> Option<T> {
    if !(l[0] > T::zero() && l[1] > T::zero()) {
        return None;
    }
    let half = c::<T>(0.5);
    let prior = (pr.alpha_lambda - T::one()) * (l[0].ln() + l[1].ln()) - pr.beta_lambda * (l[0] + l[1]);
    if term.width == 0 {
        return Some(prior);
    }
    let p = smooth_precision(&term.s1, &term.s2, l[0], l[1]);
    let ch = p.cholesky()?;
    let logdet = ch.l().diagonal().iter().fold(T::zero(), |acc, &d| acc + d.ln()) * c::<T>(2.0);
    Some(-(l[0] * a.0 + l[1] * a.1) * half + logdet * half + prior)
}

fn gradient_hessian<T: Scalar>(
    term: &SmoothTerm<T>,
    a: (T, T),
    l: Vector2<T>,
    pr: &PriorConfig<T>,
) -> Result<(Vector2<T>, Matrix2<T>)> {
    let half = c::<T>(0.5);
    let am1 = pr.alpha_lambda - T::one();
    let mut g = Vector2::new(am1 / l[0] - pr.beta_lambda, am1 / l[1] - pr.beta_lambda);
    let mut h = Matrix2::new(-am1 / (l[0] * l[0]), T::zero(), T::zero(), -am1 / (l[1] * l[1]));
    if term.width > 0 {
        let p = smooth_precision(&term.s1, &term.s2, l[0], l[1]);
        let ch = p
            .cholesky()
            .ok_or_else(|| Error::CholeskyFailure(format!("smooth {}", term.name.label())))?;
        let b = [ch.solve(&term.s1), ch.solve(&term.s2)];
        g[0] += (b[0].trace() - a.0) * half;
        g[1] += (b[1].trace() - a.1) * half;
        for i in 0..2 {
            for j in 0..2 {
                h[(i, j)] -= b[i].component_mul(&b[j].transpose()).sum() * half;
            }
        }
    }
    Ok((g, h))
}

fn project<T: Scalar>(l: Vector2<T>, floor: T) -> Vector2<T> {
    l.map(|v| v.max(floor))
}

/// Maximizes the ELBO over all ten smoothing parameters.
pub fn update_lambda<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
    cfg: &CaviConfig<T>,
) -> Result<DVector<T>> {
    let pr = &ctx.priors;
    let floor = cfg.projection_floor_lambda;
    let mut out = state.lambda.clone();
    for term in ctx.design.smooths() {
        let j = 2 * term.name.ordinal();
        let a = if term.width > 0 {
            penalty_moments(term, state)
        } else {
            (T::zero(), T::zero())
        };
        let mut l = Vector2::new(out[j], out[j + 1]);
        if term.width == 0 {
            // prior only: mode of the Gamma
            let mode = ((pr.alpha_lambda - T::one()) / pr.beta_lambda).max(floor);
            out[j] = mode;
            out[j + 1] = mode;
            continue;
        }
        let mut f = smooth_objective(term, a, l, pr)
            .ok_or_else(|| Error::CholeskyFailure(format!("smooth {}", term.name.label())))?;
        for iter in 0..cfg.newton_max_inner {
            let (g, h) = gradient_hessian(term, a, l, pr)?;
            // Newton direction when the Hessian is negative definite, else gradient
            let dir = match (-h).cholesky() {
                Some(ch) => ch.solve(&g),
                None => g / (T::one() + g.norm()),
            };
            // variables at the floor with an outward gradient stay put
            let mut dir = dir;
            for k in 0..2 {
                if l[k] <= floor && dir[k] < T::zero() {
                    dir[k] = T::zero();
                }
            }
            if dir.norm() <= cfg.inner_tol * (T::one() + l.norm()) {
                break;
            }
            let acc = backtrack(f, T::one(), cfg.backtrack_shrink, cfg.backtrack_armijo, |alpha| {
                let trial = project(l + dir * alpha, floor);
                smooth_objective(term, a, trial, pr).map(|v| (v, g.dot(&(trial - l))))
            });
            match acc {
                Some(acc) => {
                    let next = project(l + dir * acc.alpha, floor);
                    let gain = acc.value - f;
                    l = next;
                    f = acc.value;
                    if gain <= T::default_epsilon() * (T::one() + f.abs()) {
                        break;
                    }
                }
                None if iter == 0 && g.norm() > c::<T>(1e-8) * (T::one() + f.abs()) => {
                    return Err(Error::LineSearchStall(format!("smoothing parameters of {}", term.name.label())));
                }
                None => break,
            }
        }
        out[j] = l[0];
        out[j + 1] = l[1];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::tests::{toy_context, toy_state};
    use crate::elbo::{elbo_gradient, elbo_total};
    use crate::model::Dims;

    #[test]
    fn update_reaches_stationarity_and_is_idempotent() {
        let ctx = toy_context(Dims::new(2, 3, 3, 2, 3), 3);
        let mut st = toy_state(&ctx, 3);
        let mut pr = ctx.priors;
        pr.alpha_lambda = 2.0;
        pr.beta_lambda = 0.5;
        let ctx = crate::design::FitContext { priors: pr, ..ctx };
        let before = elbo_total(&st, &ctx).unwrap().total;
        let cfg = CaviConfig::default();
        st.lambda = update_lambda(&st, &ctx, &cfg).unwrap();
        assert!(elbo_total(&st, &ctx).unwrap().total >= before);
        let g = elbo_gradient(&st, &ctx).unwrap();
        for i in 0..10 {
            assert!(g.lambda[i].abs() < 1e-6 * (1.0 + 1.0 / st.lambda[i]), "lambda {i}: {}", g.lambda[i]);
        }
        let again = update_lambda(&st, &ctx, &cfg).unwrap();
        assert!((again - &st.lambda).amax() < 1e-8 * (1.0 + st.lambda.amax()));
    }

    #[test]
    fn projection_keeps_floor_and_monotone() {
        // α = 1 with a huge rate pushes λ to the floor
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 4);
        let mut st = toy_state(&ctx, 4);
        let mut pr = ctx.priors;
        pr.alpha_lambda = 1.0;
        pr.beta_lambda = 1e6;
        let ctx = crate::design::FitContext { priors: pr, ..ctx };
        let cfg = CaviConfig::default();
        let before = elbo_total(&st, &ctx).unwrap().total;
        st.lambda = update_lambda(&st, &ctx, &cfg).unwrap();
        assert!(st.lambda.iter().all(|&l| l >= cfg.projection_floor_lambda));
        assert!(elbo_total(&st, &ctx).unwrap().total >= before);
    }
}
