//! Evidence lower bound and its analytic gradients.
//!
//! Each term drops a state-free additive constant; the constants are
//! available separately ([`joint_term_constant`], [`wishart_term_constant`])
//! so Monte Carlo checks can compare absolute values.

use nalgebra::{DMatrix, DVector};

use crate::design::{FitContext, ModelDesign, Response};
use crate::error::{Error, Result};
use crate::kron::{
    ar_block_derivatives, assemble_expected_prior_precision, expected_log_det_prior_precision, expected_prior_mean,
    kron_factor, latent_weights, log_det_gram_upper, log_det_prior_constant, log_det_spd, smooth_precision,
    BartlettMoments, ExpectedPriorPrecision,
};
use crate::model::{check_wishart_factor, PhiPriorForm, PriorConfig, VariationalState};
use crate::moments::{latent_v_gradient, LatentMoments, Side};
use crate::scalar::{c, Scalar};
use crate::special::{ln_multigamma, wishart_digamma_sum, wishart_trigamma_sum};

/// Largest admissible exponent xᵢᵀm + ½xᵢᵀMxᵢ.
pub const EXPONENT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown<T> {
    pub joint_term: T,
    pub lambda_term: T,
    pub mu_term: T,
    pub phi_term: T,
    pub wishart_k_term: T,
    pub wishart_l_term: T,
    pub total: T,
}

/// εᵢ exp(xᵢᵀm + ½xᵢᵀMxᵢ) for every row.
pub fn poisson_weights<T: Scalar>(
    m: &DVector<T>,
    cov: &DMatrix<T>,
    design: &ModelDesign<T>,
    response: &Response<T>,
) -> Result<DVector<T>> {
    let eta = design.mul_vec(m);
    let quad = design.row_quadratic_forms(cov);
    let limit = c::<T>(EXPONENT_LIMIT);
    let mut w = DVector::zeros(eta.len());
    for i in 0..eta.len() {
        let x = eta[i] + quad[i] * c::<T>(0.5);
        if !(x <= limit) {
            return Err(Error::NumericOverflow(x.as_f64()));
        }
        w[i] = response.offsets[i] * x.exp();
    }
    Ok(w)
}

/// yᵀXm − Σ εᵢ exp(xᵢᵀm + ½xᵢᵀMxᵢ).
pub fn poisson_part<T: Scalar>(
    m: &DVector<T>,
    cov: &DMatrix<T>,
    design: &ModelDesign<T>,
    response: &Response<T>,
) -> Result<T> {
    let w = poisson_weights(m, cov, design, response)?;
    Ok(design.mul_vec(m).dot(&response.counts) - w.sum())
}

/// ½ log|M| through Cholesky.
pub fn half_log_det<T: Scalar>(cov: &DMatrix<T>) -> Result<T> {
    Ok(log_det_spd(cov, "variational covariance M")? * c::<T>(0.5))
}

/// Pieces of the joint term sharing one prior-precision assembly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointParts<T> {
    pub poisson: T,
    /// (m−m̄)ᵀΛ(m−m̄) + tr(ΛM) + tr(ΛC).
    pub prior_quadratic: T,
    pub half_log_det_m: T,
    pub log_det_prior: T,
}

impl<T: Scalar> JointParts<T> {
    pub fn value(&self) -> T {
        self.poisson - self.prior_quadratic * c::<T>(0.5) + self.half_log_det_m + self.log_det_prior * c::<T>(0.5)
    }
}

/// tr(Λ C) with C = blockdiag(0, I_T ⊗ diag σ²).
pub fn trace_prior_mean_cov<T: Scalar>(op: &ExpectedPriorPrecision<T>, sigma2: &DVector<T>) -> T {
    let s = op.time_diagonal_sum();
    sigma2.iter().enumerate().fold(T::zero(), |acc, (i, &v)| acc + s[(i, i)] * v)
}

pub fn joint_parts<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
    op: &ExpectedPriorPrecision<T>,
) -> Result<JointParts<T>> {
    let design = &ctx.design;
    let resid = &state.m - expected_prior_mean(&state.mu, design);
    let quad = op.quad_form(&resid) + op.trace_with(&state.cov) + trace_prior_mean_cov(op, &state.sigma2);
    Ok(JointParts {
        poisson: poisson_part(&state.m, &state.cov, design, &ctx.response)?,
        prior_quadratic: quad,
        half_log_det_m: half_log_det(&state.cov)?,
        log_det_prior: expected_log_det_prior_precision(state, design, &ctx.priors)?,
    })
}

/// E_q log p(y, β*, z | ·) + entropy of q(β*, z), up to [`joint_term_constant`].
pub fn elbo_joint_term<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>) -> Result<T> {
    let op = assemble_expected_prior_precision(&ctx.design, state, &ctx.priors)?;
    Ok(joint_parts(state, ctx, &op)?.value())
}

/// Σ (y log ε − log y!) + (p+Q)/2 + ½·(log-determinant constant).
pub fn joint_term_constant<T: Scalar>(ctx: &FitContext<T>) -> T {
    ctx.response.log_likelihood_constant()
        + T::from_count(ctx.design.total_dim()) * c::<T>(0.5)
        + log_det_prior_constant(&ctx.design, &ctx.priors) * c::<T>(0.5)
}

/// Σ (α_λ − 1) log λ − β_λ λ.
pub fn elbo_lambda_term<T: Scalar>(lambda: &DVector<T>, priors: &PriorConfig<T>) -> T {
    lambda.iter().fold(T::zero(), |acc, &l| {
        acc + (priors.alpha_lambda - T::one()) * l.ln() - priors.beta_lambda * l
    })
}

/// −(μᵀμ + Σσ²)/(2σ²_μ) + ½ Σ log σ².
pub fn elbo_mu_term<T: Scalar>(mu: &DVector<T>, sigma2: &DVector<T>, priors: &PriorConfig<T>) -> T {
    let half = c::<T>(0.5);
    -(mu.norm_squared() + sigma2.sum()) * half / priors.sigma2_mu
        + sigma2.iter().fold(T::zero(), |acc, &s| acc + s.ln()) * half
}

/// Log prior density of one autoregressive coefficient (up to a constant).
pub fn phi_log_prior<T: Scalar>(phi: T, priors: &PriorConfig<T>) -> T {
    let (a, b) = (priors.alpha_phi - T::one(), priors.beta_phi - T::one());
    match priors.phi_prior_form {
        PhiPriorForm::BetaConsistent => a * (T::one() + phi).ln() + b * (T::one() - phi).ln(),
        PhiPriorForm::Printed => a * (T::one() + phi * phi).ln() + b * (T::one() - phi * phi).ln(),
    }
}

/// First and second derivative of [`phi_log_prior`].
pub fn phi_log_prior_derivatives<T: Scalar>(phi: T, priors: &PriorConfig<T>) -> (T, T) {
    let (a, b) = (priors.alpha_phi - T::one(), priors.beta_phi - T::one());
    let one = T::one();
    match priors.phi_prior_form {
        PhiPriorForm::BetaConsistent => {
            let (u, v) = (one + phi, one - phi);
            (a / u - b / v, -a / (u * u) - b / (v * v))
        }
        PhiPriorForm::Printed => {
            let two = c::<T>(2.0);
            let (u, v) = (one + phi * phi, one - phi * phi);
            let g = a * two * phi / u - b * two * phi / v;
            let h = a * two * (one - phi * phi) / (u * u) - b * two * (one + phi * phi) / (v * v);
            (g, h)
        }
    }
}

pub fn elbo_phi_term<T: Scalar>(phi: &DVector<T>, priors: &PriorConfig<T>) -> Result<T> {
    let mut acc = T::zero();
    for (index, &p) in phi.iter().enumerate() {
        if !(p.abs() < T::one()) {
            return Err(Error::PhiOutOfRange {
                index,
                value: p.as_f64(),
            });
        }
        acc += phi_log_prior(p, priors);
    }
    Ok(acc)
}

/// E_q[log p(Ω) − log q(Ω)] for one Wishart factor, up to
/// [`wishart_term_constant`]. `v_q` is the upper-triangular factor of D^q.
pub fn elbo_wishart_term<T: Scalar>(delta_q: T, v_q: &DMatrix<T>, delta_prior: T, theta_prior: T) -> Result<T> {
    let dim = v_q.nrows();
    check_wishart_factor(delta_q, v_q, dim)?;
    let half = c::<T>(0.5);
    let d = T::from_count(dim);
    let trace = v_q.norm_squared();
    Ok(delta_prior * half * log_det_gram_upper(v_q)
        + (delta_prior - delta_q) * half * wishart_digamma_sum(delta_q, dim)
        - delta_q * trace * half / theta_prior
        + delta_q * d * half
        + ln_multigamma(delta_q * half, dim))
}

/// −(δ·d/2) log θ − log Γ_d(δ/2).
pub fn wishart_term_constant<T: Scalar>(dim: usize, delta_prior: T, theta_prior: T) -> T {
    let half = c::<T>(0.5);
    -(delta_prior * T::from_count(dim) * half) * theta_prior.ln() - ln_multigamma(delta_prior * half, dim)
}

pub fn elbo_total<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>) -> Result<ElboBreakdown<T>> {
    let pr = &ctx.priors;
    let joint_term = elbo_joint_term(state, ctx)?;
    let lambda_term = elbo_lambda_term(&state.lambda, pr);
    let mu_term = elbo_mu_term(&state.mu, &state.sigma2, pr);
    let phi_term = elbo_phi_term(&state.phi, pr)?;
    let wishart_k_term = elbo_wishart_term(state.delta_k, &state.v_k, pr.delta_k, pr.theta_k)?;
    let wishart_l_term = elbo_wishart_term(state.delta_l, &state.v_l, pr.delta_l, pr.theta_l)?;
    Ok(ElboBreakdown {
        joint_term,
        lambda_term,
        mu_term,
        phi_term,
        wishart_k_term,
        wishart_l_term,
        total: joint_term + lambda_term + mu_term + phi_term + wishart_k_term + wishart_l_term,
    })
}

/// Analytic ELBO gradient for every variational block.
///
/// `cov` is the derivative treating the entries of M as free (the
/// symmetric-perturbation derivative is `cov[(i,j)] + cov[(j,i)]` off the
/// diagonal). `v_k` and `v_l` are filled on the upper triangle only.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient<T: Scalar> {
    pub m: DVector<T>,
    pub cov: DMatrix<T>,
    pub lambda: DVector<T>,
    pub mu: DVector<T>,
    pub sigma2: DVector<T>,
    pub phi: DVector<T>,
    pub delta_k: T,
    pub v_k: DMatrix<T>,
    pub delta_l: T,
    pub v_l: DMatrix<T>,
}

/// ∂ELBO/∂m = Xᵀ(y − w) − Λ(m − m̄).
pub fn gradient_m<T: Scalar>(
    state: &VariationalState<T>,
    ctx: &FitContext<T>,
    op: &ExpectedPriorPrecision<T>,
    weights: &DVector<T>,
) -> DVector<T> {
    let d = &ctx.design;
    d.tr_mul_vec(&(&ctx.response.counts - weights)) - op.matvec(&(&state.m - expected_prior_mean(&state.mu, d)))
}

/// Per-smooth ∂ELBO/∂(λ₁, λ₂), in state order.
pub fn gradient_lambda<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>) -> Result<DVector<T>> {
    let mut g = DVector::zeros(state.lambda.len());
    let half = c::<T>(0.5);
    let pr = &ctx.priors;
    for term in ctx.design.smooths() {
        let j = 2 * term.name.ordinal();
        let (l1, l2) = (state.lambda[j], state.lambda[j + 1]);
        for (k, s, l) in [(j, &term.s1, l1), (j + 1, &term.s2, l2)] {
            let mut v = (pr.alpha_lambda - T::one()) / l - pr.beta_lambda;
            if term.width > 0 {
                let r = term.range();
                let mb = state.m.rows(r.start, term.width);
                let mbb = state.cov.view((r.start, r.start), (term.width, term.width));
                let a = (mb.transpose() * s * mb)[0] + s.component_mul(&mbb).sum();
                let prec = smooth_precision(&term.s1, &term.s2, l1, l2);
                let ch = nalgebra::Cholesky::new(prec)
                    .ok_or_else(|| Error::CholeskyFailure(format!("smooth {}", term.name.label())))?;
                let tr = ch.solve(s).trace();
                v += (tr - a) * half;
            }
            g[k] = v;
        }
    }
    Ok(g)
}

fn diag_of<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    m.diagonal()
}

pub fn elbo_gradient<T: Scalar>(state: &VariationalState<T>, ctx: &FitContext<T>) -> Result<ElboGradient<T>> {
    let design = &ctx.design;
    let dims = design.dims();
    let pr = &ctx.priors;
    let half = c::<T>(0.5);
    let op = assemble_expected_prior_precision(design, state, pr)?;
    let w = poisson_weights(&state.m, &state.cov, design, &ctx.response)?;

    let m = gradient_m(state, ctx, &op, &w);
    let cov = {
        let ch = nalgebra::Cholesky::new(state.cov.clone())
            .ok_or_else(|| Error::CholeskyFailure("variational covariance M".into()))?;
        let mut lam = DMatrix::zeros(op.total_dim(), op.total_dim());
        op.add_to_dense(&mut lam);
        (ch.inverse() - design.weighted_gram(&w) - lam) * half
    };
    let lambda = gradient_lambda(state, ctx)?;

    // μ and σ²
    let p = design.beta_dim();
    let lk = dims.latent_width();
    let resid = &state.m - expected_prior_mean(&state.mu, design);
    let lr = op.matvec(&resid);
    let mut mu = -&state.mu / pr.sigma2_mu;
    for t in 0..dims.months {
        mu += lr.rows(p + t * lk, lk);
    }
    let dsum = diag_of(&op.time_diagonal_sum());
    let sigma2 = DVector::from_fn(lk, |i, _| {
        (state.sigma2[i].recip() - dsum[i] - pr.sigma2_mu.recip()) * half
    });

    // φ
    let moments = LatentMoments::new(state, design);
    let bart = BartlettMoments::new(state.delta_k, dims.causes, state.delta_l, dims.regions)?;
    let wk = kron_factor(&state.v_k, &state.v_l);
    let g = moments.projected_diagonals(&wk);
    let h = g.clone().map(|gs| bart.apply_adjoint(&gs));
    let months = dims.months;
    let phi = DVector::from_fn(lk, |i, _| {
        let x = state.phi[i];
        let (d1, d2, d3) = ar_block_derivatives(x, 1);
        let d1 = if months == 1 { T::zero() } else { d1 };
        let latent = -(h[0][i] * d1 + h[1][i] * d2 + h[2][i] * d3) * half;
        let ar = T::from_count(months - 1) * x / (T::one() - x * x);
        latent + ar + phi_log_prior_derivatives(x, pr).0
    });

    // Wishart factors
    let weights = latent_weights(&state.phi, &bart, months)?;
    let e = [weights.corner.clone(), weights.off.clone(), weights.interior.clone()];
    let mut ar = crate::kron::expected_r_blocks(&state.phi)?;
    if months == 1 {
        ar.e1.fill(T::one());
    }
    let raw = [ar.e1, ar.e2, ar.e3];
    let wishart = |side: Side| -> (T, DMatrix<T>) {
        let (delta_q, v, dim, other, delta_p, theta_p, cause_side) = match side {
            Side::Cause => (state.delta_k, &state.v_k, dims.causes, dims.regions, pr.delta_k, pr.theta_k, true),
            Side::Region => (state.delta_l, &state.v_l, dims.regions, dims.causes, pr.delta_l, pr.theta_l, false),
        };
        let ot = T::from_count(other * months);
        let quarter = c::<T>(0.25);
        let psi1 = wishart_trigamma_sum(delta_q, dim);
        let mut gd = ot * quarter * psi1 + (delta_p - delta_q) * quarter * psi1 - v.norm_squared() * half / theta_p
            + T::from_count(dim) * half;
        for s in 0..3 {
            gd -= g[s].dot(&bart.apply_delta_derivative(&raw[s], cause_side)) * half;
        }
        let mut gv = latent_v_gradient(&moments, &e, &state.v_k, &state.v_l, side) * (-half);
        for i in 0..dim {
            for j in i..dim {
                gv[(i, j)] -= delta_q * v[(i, j)] / theta_p;
            }
            gv[(i, i)] += (ot + delta_p) / v[(i, i)];
        }
        (gd, gv)
    };
    let (delta_k, v_k) = wishart(Side::Cause);
    let (delta_l, v_l) = wishart(Side::Region);
    Ok(ElboGradient {
        m,
        cov,
        lambda,
        mu,
        sigma2,
        phi,
        delta_k,
        v_k,
        delta_l,
        v_l,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::design::KnotConfig;
    use crate::model::{validate_dataset, Dims, PanelDataset, Record};
    use approx::assert_relative_eq;

    pub(crate) fn toy_data(dims: Dims, seed: u64) -> PanelDataset<f64> {
        let mut recs = Vec::new();
        let mut h = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (h >> 33) as f64 / (1u64 << 31) as f64
        };
        for month in 0..dims.months {
            for region in 0..dims.regions {
                let s = (next() * 100.0).round();
                for cause in 0..dims.causes {
                    for age in 0..dims.ages {
                        for gender in 0..dims.genders {
                            recs.push(Record {
                                region,
                                cause,
                                age,
                                gender,
                                month,
                                count: (next() * 12.0) as u64,
                                offset: 2.0 + 3.0 * next(),
                                stringency: s,
                            });
                        }
                    }
                }
            }
        }
        validate_dataset(recs, dims).unwrap()
    }

    pub(crate) fn toy_context(dims: Dims, seed: u64) -> FitContext<f64> {
        let data = toy_data(dims, seed);
        let knots = KnotConfig {
            stringency_knots: 4,
            ..KnotConfig::default()
        };
        FitContext::new(&data, &knots, PriorConfig::for_dims(dims)).unwrap()
    }

    pub(crate) fn toy_state(ctx: &FitContext<f64>, seed: u64) -> VariationalState<f64> {
        let dims = ctx.dims();
        let n = ctx.design.total_dim();
        let lk = dims.latent_width();
        let f = |i: usize, k: u64| (((i as u64 + 1) * 2654435761 + k * 97 + seed * 31) % 1000) as f64 / 1000.0;
        let a = DMatrix::from_fn(n, n, |i, j| 0.02 * (f(i * n + j, 1) - 0.5));
        let cov = &a * a.transpose() + DMatrix::identity(n, n) * 0.02;
        let mut vk = DMatrix::from_fn(dims.causes, dims.causes, |i, j| if j > i { 0.3 * (f(i + 3 * j, 2) - 0.5) } else { 0.0 });
        for i in 0..dims.causes {
            vk[(i, i)] = 0.8 + 0.4 * f(i, 3);
        }
        let mut vl = DMatrix::from_fn(dims.regions, dims.regions, |i, j| if j > i { 0.3 * (f(i + 5 * j, 4) - 0.5) } else { 0.0 });
        for i in 0..dims.regions {
            vl[(i, i)] = 0.7 + 0.5 * f(i, 5);
        }
        let mut m = DVector::from_fn(n, |i, _| 0.2 * (f(i, 6) - 0.5));
        m[0] = 1.2;
        VariationalState {
            m,
            cov,
            lambda: DVector::from_fn(10, |i, _| 0.5 + f(i, 7)),
            mu: DVector::from_fn(lk, |i, _| 0.2 * (f(i, 8) - 0.5)),
            sigma2: DVector::from_fn(lk, |i, _| 0.05 + 0.1 * f(i, 9)),
            phi: DVector::from_fn(lk, |i, _| 0.8 * (f(i, 10) - 0.5)),
            delta_k: dims.causes as f64 + 0.7,
            v_k: vk,
            delta_l: dims.regions as f64 + 1.3,
            v_l: vl,
        }
    }

    #[test]
    fn scalar_joint_oracle() {
        // y = 1, ε = 1, x = 1, m = 0, M = 1, Λ = 1: −e^{½} − ½
        let parts = JointParts {
            poisson: 1.0 * 0.0 - (0.0f64 + 0.5 * 1.0).exp(),
            prior_quadratic: 0.0 + 1.0 + 0.0,
            half_log_det_m: 0.5 * 1.0f64.ln(),
            log_det_prior: 1.0f64.ln(),
        };
        assert_relative_eq!(parts.value(), -2.148_721_270_700_128, epsilon = 1e-12);
    }

    #[test]
    fn lambda_mu_phi_terms() {
        let mut pr = PriorConfig::<f64>::for_dims(Dims::new(2, 2, 1, 1, 1));
        pr.alpha_lambda = 1.0;
        pr.beta_lambda = 1000.0;
        assert_relative_eq!(elbo_lambda_term(&DVector::from_element(10, 0.001), &pr), -10.0, epsilon = 1e-12);
        pr.sigma2_mu = 1.0;
        assert_relative_eq!(elbo_mu_term(&DVector::zeros(4), &DVector::from_element(4, 1.0), &pr), -2.0);
        assert!(elbo_mu_term(&DVector::from_element(4, 0.1), &DVector::from_element(4, 1.0), &pr) < -2.0);
        pr.alpha_phi = 10.0;
        pr.beta_phi = 10.0;
        assert_eq!(elbo_phi_term(&DVector::zeros(3), &pr).unwrap(), 0.0);
        let a = elbo_phi_term(&DVector::from_element(1, 0.37), &pr).unwrap();
        let b = elbo_phi_term(&DVector::from_element(1, -0.37), &pr).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
        pr.phi_prior_form = PhiPriorForm::Printed;
        let v = elbo_phi_term(&DVector::from_element(1, 0.5), &pr).unwrap();
        assert_relative_eq!(v, 9.0 * 1.25f64.ln() + 9.0 * 0.75f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(v, -0.5805, epsilon = 5e-4);
        assert!(elbo_phi_term(&DVector::from_element(1, 1.0), &pr).is_err());
    }

    #[test]
    fn scalar_wishart_term() {
        let v = elbo_wishart_term(3.0, &DMatrix::from_element(1, 1, 1.0), 3.0, 1.0).unwrap();
        assert_relative_eq!(v, (std::f64::consts::PI.sqrt() / 2.0).ln(), epsilon = 1e-13);
        // at q = prior the negative KL is zero
        assert_relative_eq!(v + wishart_term_constant(1, 3.0, 1.0), 0.0, epsilon = 1e-13);
        assert!(matches!(
            elbo_wishart_term(0.5, &DMatrix::identity(2, 2), 3.0, 1.0),
            Err(Error::DegreesOfFreedomTooSmall { .. })
        ));
    }

    #[test]
    fn total_is_sum_and_deterministic() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 1);
        let st = toy_state(&ctx, 1);
        let a = elbo_total(&st, &ctx).unwrap();
        let b = elbo_total(&st, &ctx).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        let s = a.joint_term + a.lambda_term + a.mu_term + a.phi_term + a.wishart_k_term + a.wishart_l_term;
        assert_eq!(a.total, s);
    }

    #[test]
    fn latent_moments_reproduce_prior_quadratic() {
        let ctx = toy_context(Dims::new(2, 2, 2, 1, 4), 3);
        let mut st = toy_state(&ctx, 3);
        // isolate the latent block
        for l in st.lambda.iter_mut() {
            *l = 1e-300;
        }
        let op = assemble_expected_prior_precision(&ctx.design, &st, &ctx.priors).unwrap();
        let p = ctx.design.beta_dim();
        let mut m = st.m.clone();
        m.rows_mut(0, p).fill(0.0);
        let mut cov = st.cov.clone();
        cov.view_mut((0, 0), (p, p)).fill(0.0);
        cov.view_mut((0, p), (p, cov.ncols() - p)).fill(0.0);
        cov.view_mut((p, 0), (cov.nrows() - p, p)).fill(0.0);
        st.m = m;
        st.cov = cov;
        let resid = &st.m - expected_prior_mean(&st.mu, &ctx.design);
        let direct = op.quad_form(&resid) + op.trace_with(&st.cov) + trace_prior_mean_cov(&op, &st.sigma2);
        let reduced = LatentMoments::new(&st, &ctx.design).latent_quadratic(&st, 4).unwrap();
        assert_relative_eq!(direct, reduced, max_relative = 1e-10);
    }

    #[test]
    fn overflow_guard() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 2);
        let mut st = toy_state(&ctx, 2);
        st.m[0] = 800.0;
        assert!(matches!(elbo_total(&st, &ctx), Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn zero_counts_poisson_limit() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 4);
        let mut resp = ctx.response.clone();
        resp.counts.fill(0.0);
        let n = ctx.design.total_dim();
        let v = poisson_part(&DVector::zeros(n), &(DMatrix::identity(n, n) * 1e-12), &ctx.design, &resp).unwrap();
        assert_relative_eq!(v, -resp.offsets.sum(), max_relative = 1e-9);
    }

    #[test]
    fn joint_term_is_concave_in_m() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 5);
        let st = toy_state(&ctx, 5);
        let op = assemble_expected_prior_precision(&ctx.design, &st, &ctx.priors).unwrap();
        let w = poisson_weights(&st.m, &st.cov, &ctx.design, &ctx.response).unwrap();
        let neg_h = ctx.design.weighted_gram(&w) + op.to_dense();
        assert!(neg_h.cholesky().is_some());
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64, what: &str) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs())), "{what}: analytic {a} vs fd {b}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (dims, seed) in [(Dims::new(2, 2, 2, 2, 3), 7), (Dims::new(3, 2, 2, 1, 1), 8), (Dims::new(2, 3, 2, 1, 2), 9)] {
            let ctx = toy_context(dims, seed);
            let st = toy_state(&ctx, seed);
            let g = elbo_gradient(&st, &ctx).unwrap();
            let total = |s: &VariationalState<f64>| elbo_total(s, &ctx).unwrap().total;
            for i in (0..st.m.len()).step_by(3) {
                let v = fd(|x| { let mut s = st.clone(); s.m[i] = x; total(&s) }, st.m[i]);
                close(g.m[i], v, "m");
            }
            for i in 0..10 {
                let v = fd(|x| { let mut s = st.clone(); s.lambda[i] = x; total(&s) }, st.lambda[i]);
                close(g.lambda[i], v, "lambda");
            }
            for i in 0..dims.latent_width() {
                let v = fd(|x| { let mut s = st.clone(); s.mu[i] = x; total(&s) }, st.mu[i]);
                close(g.mu[i], v, "mu");
                let v = fd(|x| { let mut s = st.clone(); s.sigma2[i] = x; total(&s) }, st.sigma2[i]);
                close(g.sigma2[i], v, "sigma2");
                let v = fd(|x| { let mut s = st.clone(); s.phi[i] = x; total(&s) }, st.phi[i]);
                close(g.phi[i], v, "phi");
            }
            for (i, j) in [(0, 0), (0, 1), (1, 1), (2, 5)] {
                let n = st.cov.nrows();
                let (i, j) = (i.min(n - 1), j.min(n - 1));
                let v = fd(
                    |x| {
                        let mut s = st.clone();
                        let d = x - st.cov[(i, j)];
                        s.cov[(i, j)] += d;
                        if i != j {
                            s.cov[(j, i)] += d;
                        }
                        total(&s)
                    },
                    st.cov[(i, j)],
                );
                let a = if i == j { g.cov[(i, i)] } else { g.cov[(i, j)] + g.cov[(j, i)] };
                close(a, v, "M");
            }
            let v = fd(|x| { let mut s = st.clone(); s.delta_k = x; total(&s) }, st.delta_k);
            close(g.delta_k, v, "delta_k");
            let v = fd(|x| { let mut s = st.clone(); s.delta_l = x; total(&s) }, st.delta_l);
            close(g.delta_l, v, "delta_l");
            for i in 0..dims.causes {
                for j in i..dims.causes {
                    let v = fd(|x| { let mut s = st.clone(); s.v_k[(i, j)] = x; total(&s) }, st.v_k[(i, j)]);
                    close(g.v_k[(i, j)], v, "v_k");
                }
            }
            for i in 0..dims.regions {
                for j in i..dims.regions {
                    let v = fd(|x| { let mut s = st.clone(); s.v_l[(i, j)] = x; total(&s) }, st.v_l[(i, j)]);
                    close(g.v_l[(i, j)], v, "v_l");
                }
            }
        }
    }
}
