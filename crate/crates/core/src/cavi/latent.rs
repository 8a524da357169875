//! Updates of q(μ), q(σ²) and the autoregressive coefficients.

use nalgebra::DVector;
use rayon::prelude::*;

use super::search::backtrack;
use super::CaviConfig;
use crate::design::FitContext;
use crate::elbo::{phi_log_prior, phi_log_prior_derivatives};
use crate::error::{Error, Result};
use crate::kron::{ar_block_derivatives, assemble_expected_prior_precision, kron_factor, BartlettMoments};
use crate::model::{PriorConfig, VariationalState};
use crate::moments::LatentMoments;
use crate::scalar::{c, Scalar};

/// Closed-form maximizers of μ and σ² given everything else.
pub fn update_mu_sigma<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
) -> Result<(DVector<T>, DVector<T>)> {
    let design = &ctx.design;
    let dims = design.dims();
    let op = assemble_expected_prior_precision(design, state, &ctx.priors)?;
    let lk = dims.latent_width();
    let p = design.beta_dim();
    let prec = ctx.priors.sigma2_mu.recip();

    let mut lat = DVector::zeros(design.total_dim());
    lat.rows_mut(p, design.latent_dim()).copy_from(&state.m.rows(p, design.latent_dim()));
    let lm = op.matvec(&lat);
    let mut rhs = DVector::zeros(lk);
    for t in 0..dims.months {
        rhs += lm.rows(p + t * lk, lk);
    }
    let mut a = op.all_blocks_sum();
    for i in 0..lk {
        a[(i, i)] += prec;
    }
    let mu = a
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("mean system for mu".into()))?
        .solve(&rhs);

    let d = op.time_diagonal_sum();
    let sigma2 = DVector::from_fn(lk, |i, _| (d[(i, i)] + prec).recip());
    Ok((mu, sigma2))
}

/// Per-coordinate φ objective −½Σ_s H_s e_s(φ) − ½(T−1)log(1−φ²) + log prior.
#[derive(Debug, Clone, Copy)]
pub struct PhiObjective<T> {
    pub h: [T; 3],
    pub months: usize,
}

impl<T: Scalar> PhiObjective<T> {
    pub fn value(&self, phi: T, pr: &PriorConfig<T>) -> Option<T> {
        if !(phi.abs() < T::one()) {
            return None;
        }
        let half = c::<T>(0.5);
        let (e1, e2, e3) = crate::kron::ar_block_entries(phi);
        let e1 = if self.months == 1 { T::one() } else { e1 };
        let latent = -(self.h[0] * e1 + self.h[1] * e2 + self.h[2] * e3) * half;
        let ar = -T::from_count(self.months - 1) * (T::one() - phi * phi).ln() * half;
        Some(latent + ar + phi_log_prior(phi, pr))
    }

    pub fn derivatives(&self, phi: T, pr: &PriorConfig<T>) -> (T, T) {
        let half = c::<T>(0.5);
        let one = T::one();
        let mut out = [T::zero(); 2];
        for order in 1..=2 {
            let (d1, d2, d3) = ar_block_derivatives(phi, order);
            let d1 = if self.months == 1 { T::zero() } else { d1 };
            out[order - 1] = -(self.h[0] * d1 + self.h[1] * d2 + self.h[2] * d3) * half;
        }
        let s = one - phi * phi;
        let tm1 = T::from_count(self.months - 1);
        let (pg, ph) = phi_log_prior_derivatives(phi, pr);
        (
            out[0] + tm1 * phi / s + pg,
            out[1] + tm1 * (one + phi * phi) / (s * s) + ph,
        )
    }
}

/// Weights H_s = 𝔅ᵀ diag(W Γ_s Wᵀ) for every coordinate.
pub fn phi_objectives<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>) -> Result<Vec<PhiObjective<T>>> {
    let dims = ctx.dims();
    let moments = LatentMoments::new(state, &ctx.design);
    let bart = BartlettMoments::new(state.delta_k, dims.causes, state.delta_l, dims.regions)?;
    let g = moments.projected_diagonals(&kron_factor(&state.v_k, &state.v_l));
    let h = g.map(|gs| bart.apply_adjoint(&gs));
    Ok((0..dims.latent_width())
        .map(|i| PhiObjective {
            h: [h[0][i], h[1][i], h[2][i]],
            months: dims.months,
        })
        .collect())
}

/// Damped, clamped Newton on one coordinate. Returns the new value, or the
/// old one with a message when the line search stalls.
fn maximize_phi<T: Scalar>(
    obj: &PhiObjective<T>,
    start: T,
    pr: &PriorConfig<T>,
    cfg: &CaviConfig<T>,
) -> std::result::Result<T, String> {
    let bound = cfg.phi_bound;
    let clamp = |x: T| x.max(-bound).min(bound);
    let mut x = clamp(start);
    let mut f = match obj.value(x, pr) {
        Some(v) => v,
        None => return Err("phi objective not finite at start".into()),
    };
    for iter in 0..cfg.newton_max_inner {
        let (g, h) = obj.derivatives(x, pr);
        let dir = if h < T::zero() { -g / h } else { g / (T::one() + g.abs()) * c::<T>(0.1) };
        if (clamp(x + dir) - x).abs() <= cfg.inner_tol * (T::one() + x.abs()) {
            break;
        }
        let acc = backtrack(f, T::one(), cfg.backtrack_shrink, cfg.backtrack_armijo, |a| {
            let trial = clamp(x + dir * a);
            obj.value(trial, pr).map(|v| (v, g * (trial - x)))
        });
        match acc {
            Some(acc) => {
                let gain = acc.value - f;
                x = clamp(x + dir * acc.alpha);
                f = acc.value;
                if gain <= T::default_epsilon() * (T::one() + f.abs()) {
                    break;
                }
            }
            None if iter == 0 && g.abs() > c::<T>(1e-8) * (T::one() + f.abs()) => {
                return Err("line search stalled".into());
            }
            None => break,
        }
    }
    Ok(x)
}

/// Updates every φ_i; coordinates decouple given the other blocks, so the
/// parallel and sequential sweeps agree exactly.
pub fn update_phi<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
    cfg: &CaviConfig<T>,
) -> Result<(DVector<T>, Vec<String>)> {
    let objs = phi_objectives(state, ctx)?;
    let pr = &ctx.priors;
    let solve = |i: usize| maximize_phi(&objs[i], state.phi[i], pr, cfg);
    let results: Vec<_> = if cfg.parallel_phi {
        (0..objs.len()).into_par_iter().map(solve).collect()
    } else {
        (0..objs.len()).map(solve).collect()
    };
    let mut phi = state.phi.clone();
    let mut warnings = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => phi[i] = v,
            Err(msg) => warnings.push(format!("phi[{i}]: {msg}; left unchanged")),
        }
    }
    Ok((phi, warnings))
}
