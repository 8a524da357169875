//! Slow, independent reference computations used to check the engine.
//!
//! Nothing here calls the structured code it is meant to check: AR
//! precisions come from inverting the dense covariance, Wishart moments
//! from an explicit loop or from Bartlett draws, and log densities are
//! written out term by term.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::design::{FitContext, ModelDesign};
use crate::error::{Error, Result};
use crate::model::{PriorConfig, VariationalState};

/// Largest total dimension the dense oracles will instantiate.
pub const DENSE_LIMIT: usize = 2000;

const CHUNK: usize = 4096;

/// Lanczos log-gamma (g = 7), kept separate from the engine's special functions.
pub fn ln_gamma_lanczos(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma_lanczos(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_multigamma_direct(a: f64, d: usize) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln() + (0..d).map(|j| ln_gamma_lanczos(a - j as f64 / 2.0)).sum::<f64>()
}

/// Covariance of a unit-variance stationary AR(1) path: φ^|t−s|.
pub fn ar_covariance_dense(phi: f64, months: usize) -> DMatrix<f64> {
    DMatrix::from_fn(months, months, |t, s| phi.powi((t as i32 - s as i32).abs()))
}

/// Inverse of [`ar_covariance_dense`] by a general LU solve.
pub fn ar_precision_by_inversion(phi: f64, months: usize) -> Result<DMatrix<f64>> {
    ar_covariance_dense(phi, months)
        .try_inverse()
        .ok_or_else(|| Error::SingularSystem(format!("AR covariance at phi = {phi}")))
}

/// (corner, off-diagonal, interior) entries of the AR precision, read off a
/// dense inverse of a 3-month covariance.
pub fn ar_entries_by_inversion(phi: f64) -> Result<(f64, f64, f64)> {
    let r = ar_precision_by_inversion(phi, 3)?;
    Ok((r[(0, 0)], r[(0, 1)], r[(1, 1)]))
}

/// Running mean and M2 over a chunk, merged in a fixed order.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    mean: DVector<f64>,
    m2: DVector<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(len),
            m2: DVector::zeros(len),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.m2 += delta.component_mul(&delta2);
    }

    fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0.0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        self.m2 += &other.m2 + delta.component_mul(&delta) * (self.n * other.n / n);
        self.mean += delta * (other.n / n);
        self.n = n;
        self
    }

    /// Sample mean and its standard error.
    fn finish(self) -> (DVector<f64>, DVector<f64>) {
        let var = &self.m2 / (self.n - 1.0);
        (self.mean, var.map(|v| (v / self.n).sqrt()))
    }
}

/// Runs `draw` on `n` samples split into seeded chunks; chunks may run in
/// parallel but are reduced in index order, so the result depends only on
/// `seed`.
fn monte_carlo<F>(n: usize, len: usize, seed: u64, draw: F) -> Result<(DVector<f64>, DVector<f64>)>
where
    F: Fn(&mut ChaCha8Rng) -> Result<DVector<f64>> + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Result<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut acc = Moments::new(len);
            for _ in 0..CHUNK.min(n - c * CHUNK) {
                acc.push(&draw(&mut rng)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Moments::new(len);
    for p in parts {
        total = total.merge(&p?);
    }
    Ok(total.finish())
}

/// Bartlett factor A: upper triangular, A_ii² ~ χ²(δ − i), N(0,1) above.
fn bartlett_factor(delta: f64, d: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(delta - i as f64).map_err(|_| Error::DegreesOfFreedomTooSmall {
            delta,
            min: d as f64 - 1.0,
        })?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in i + 1..d {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(a)
}

/// Monte-Carlo mean and standard error of the three expected latent blocks.
#[derive(Debug, Clone)]
pub struct McBlocks {
    /// Corner, off-diagonal, interior.
    pub mean: [DMatrix<f64>; 3],
    pub se: [DMatrix<f64>; 3],
}

/// Draws Ω^k, Ω^l through their Bartlett factors and averages
/// (AW)ᵀ diag(e_s) (AW), with e_s the AR precision entries of each φ_i.
pub fn mc_bartlett_expectation(
    phi: &DVector<f64>,
    delta_k: f64,
    v_k: &DMatrix<f64>,
    delta_l: f64,
    v_l: &DMatrix<f64>,
    n_samples: usize,
    seed: u64,
) -> Result<McBlocks> {
    if n_samples < 2 {
        return Err(Error::InvalidConfig("need at least two samples".into()));
    }
    let (kk, ll) = (v_k.nrows(), v_l.nrows());
    let lk = kk * ll;
    if phi.len() != lk {
        return Err(Error::DimensionMismatch(format!("phi must have length {lk}")));
    }
    let mut e = [DVector::zeros(lk), DVector::zeros(lk), DVector::zeros(lk)];
    for i in 0..lk {
        let (a, b, c) = ar_entries_by_inversion(phi[i])?;
        e[0][i] = a;
        e[1][i] = b;
        e[2][i] = c;
    }
    let (mean, se) = monte_carlo(n_samples, 3 * lk * lk, seed, |rng| {
        let ak = bartlett_factor(delta_k, kk, rng)? * v_k;
        let al = bartlett_factor(delta_l, ll, rng)? * v_l;
        let g = ak.kronecker(&al);
        let mut out = DVector::zeros(3 * lk * lk);
        for (s, es) in e.iter().enumerate() {
            let mut scaled = g.clone();
            for (r, mut row) in scaled.row_iter_mut().enumerate() {
                row *= es[r];
            }
            let block = g.transpose() * scaled;
            out.rows_mut(s * lk * lk, lk * lk).copy_from_slice(block.as_slice());
        }
        Ok(out)
    })?;
    let unpack = |v: &DVector<f64>, s: usize| DMatrix::from_column_slice(lk, lk, &v.as_slice()[s * lk * lk..(s + 1) * lk * lk]);
    Ok(McBlocks {
        mean: [unpack(&mean, 0), unpack(&mean, 1), unpack(&mean, 2)],
        se: [unpack(&se, 0), unpack(&se, 1), unpack(&se, 2)],
    })
}

/// E[A_ab²] for a Bartlett factor of size d: δ − a on the diagonal, 1 above.
fn bartlett_second_moments(delta: f64, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |a, b| match a.cmp(&b) {
        std::cmp::Ordering::Equal => delta - a as f64,
        std::cmp::Ordering::Less => 1.0,
        std::cmp::Ordering::Greater => 0.0,
    })
}

/// E_q(M₀⁻¹) built entry by entry.
#[allow(clippy::needless_range_loop)] // index loops mirror the formula
pub fn dense_prior_precision(
    state: &VariationalState<f64>,
    design: &ModelDesign<f64>,
    priors: &PriorConfig<f64>,
) -> Result<DMatrix<f64>> {
    let n = design.total_dim();
    if n > DENSE_LIMIT {
        return Err(Error::DimensionTooLarge(n));
    }
    let dims = design.dims();
    let (kk, ll, months) = (dims.causes, dims.regions, dims.months);
    let lk = kk * ll;
    let p = design.beta_dim();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..design.parametric_dim() {
        out[(i, i)] = 1.0 / priors.sigma2_beta;
    }
    for term in design.smooths() {
        let j = 2 * term.name.ordinal();
        for r in 0..term.width {
            for c in 0..term.width {
                out[(term.offset + r, term.offset + c)] =
                    state.lambda[j] * term.s1[(r, c)] + state.lambda[j + 1] * term.s2[(r, c)];
            }
        }
    }

    // second moments of the Kronecker Bartlett factor, one per (a, b) pair
    let mk = bartlett_second_moments(state.delta_k, kk);
    let ml = bartlett_second_moments(state.delta_l, ll);
    let e2 = |a: usize, b: usize| mk[(a / ll, b / ll)] * ml[(a % ll, b % ll)];
    let w = DMatrix::from_fn(lk, lk, |r, c| state.v_k[(r / ll, c / ll)] * state.v_l[(r % ll, c % ll)]);
    let r: Vec<DMatrix<f64>> = (0..lk)
        .map(|a| {
            if months == 1 {
                Ok(DMatrix::identity(1, 1))
            } else {
                ar_precision_by_inversion(state.phi[a], months)
            }
        })
        .collect::<Result<_>>()?;
    for i in 0..lk {
        for j in 0..lk {
            for a in 0..lk {
                let mut s = 0.0;
                for b in 0..lk {
                    s += e2(a, b) * w[(b, i)] * w[(b, j)];
                }
                if s == 0.0 {
                    continue;
                }
                for t in 0..months {
                    for u in 0..months {
                        out[(p + t * lk + i, p + u * lk + j)] += s * r[a][(t, u)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Central differences with step `step·(1 + |x_i|)` per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, x: &DVector<f64>, step: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::NonFiniteEvaluation(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    /// |target − mean| in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        (target - self.mean).abs() / self.se
    }
}

fn log_det_chol(m: &DMatrix<f64>, what: &str) -> Result<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let ch = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::CholeskyFailure(what.to_string()))?;
    let ld = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok((ld, ch))
}

/// E_q[log p(y | β*, z) + log p(β*, z | λ, μ, φ, Ω) − log q(β*, z)] by
/// sampling (β*, z), μ and both Wishart factors. Equals
/// `elbo_joint_term + joint_term_constant` in expectation.
pub fn mc_joint_term(state: &VariationalState<f64>, ctx: &FitContext<f64>, n_samples: usize, seed: u64) -> Result<McEstimate> {
    let design = &ctx.design;
    let n = design.total_dim();
    if n > DENSE_LIMIT {
        return Err(Error::DimensionTooLarge(n));
    }
    let dims = design.dims();
    let (kk, ll, months) = (dims.causes, dims.regions, dims.months);
    let lk = kk * ll;
    let p = design.beta_dim();
    let pr = &ctx.priors;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let x = design.dense_x();
    let y = &ctx.response.counts;
    let eps = &ctx.response.offsets;
    let lfact: f64 = y.iter().map(|&v| ln_gamma_lanczos(v + 1.0)).sum();
    let ylogeps: f64 = y.iter().zip(eps.iter()).map(|(a, b)| a * b.ln()).sum();
    let (ld_m, ch_m) = log_det_chol(&state.cov, "variational covariance")?;
    let lm = ch_m.l();

    // fixed-effect prior blocks: (offset, precision, log det)
    let mut blocks = Vec::new();
    let pd = design.parametric_dim();
    blocks.push((0, DMatrix::identity(pd, pd) / pr.sigma2_beta, -(pd as f64) * pr.sigma2_beta.ln()));
    for term in design.smooths().iter().filter(|t| t.width > 0) {
        let j = 2 * term.name.ordinal();
        let prec = &term.s1 * state.lambda[j] + &term.s2 * state.lambda[j + 1];
        let (ld, _) = log_det_chol(&prec, "smooth precision")?;
        blocks.push((term.offset, prec, ld));
    }
    // AR pieces per coordinate
    let ar: Vec<(DMatrix<f64>, f64)> = (0..lk)
        .map(|i| {
            let c = ar_covariance_dense(state.phi[i], months);
            let (ld, ch) = log_det_chol(&c, "AR covariance")?;
            Ok((ch.inverse(), ld))
        })
        .collect::<Result<_>>()?;

    let (mean, se) = monte_carlo(n_samples, 1, seed, |rng| {
        let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = &state.m + &lm * &xi;
        let eta = &x * &theta;
        let mut v = ylogeps - lfact;
        for i in 0..eta.len() {
            v += y[i] * eta[i] - eps[i] * eta[i].exp();
        }
        for (off, prec, ld) in &blocks {
            let b = theta.rows(*off, prec.nrows());
            v += 0.5 * ld - 0.5 * prec.nrows() as f64 * ln2pi - 0.5 * (b.transpose() * prec * b)[0];
        }
        let mu = DVector::from_fn(lk, |i, _| state.mu[i] + state.sigma2[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let pk = bartlett_factor(state.delta_k, kk, rng)? * &state.v_k;
        let pl = bartlett_factor(state.delta_l, ll, rng)? * &state.v_l;
        let pz = pk.kronecker(&pl);
        let log_det_p: f64 = pz.diagonal().iter().map(|d| d.abs().ln()).sum();
        let mut u = DMatrix::zeros(months, lk);
        for t in 0..months {
            let z = theta.rows(p + t * lk, lk) - &mu;
            u.row_mut(t).copy_from(&(&pz * z).transpose());
        }
        for (i, (rinv, ld)) in ar.iter().enumerate() {
            let ui = u.column(i);
            v += -0.5 * months as f64 * ln2pi - 0.5 * ld - 0.5 * (ui.transpose() * rinv * ui)[0];
        }
        v += months as f64 * log_det_p;
        v += 0.5 * n as f64 * ln2pi + 0.5 * ld_m + 0.5 * xi.norm_squared();
        Ok(DVector::from_element(1, v))
    })?;
    Ok(McEstimate { mean: mean[0], se: se[0] })
}

/// log density of Wishart(δ, S) with E Ω = δS.
fn wishart_log_density(omega: &DMatrix<f64>, delta: f64, scale: &DMatrix<f64>) -> Result<f64> {
    let d = omega.nrows() as f64;
    let (ld_o, _) = log_det_chol(omega, "Wishart draw")?;
    let (ld_s, ch_s) = log_det_chol(scale, "Wishart scale")?;
    let tr = ch_s.solve(omega).trace();
    Ok(0.5 * (delta - d - 1.0) * ld_o - 0.5 * tr - 0.5 * delta * d * 2f64.ln() - 0.5 * delta * ld_s
        - ln_multigamma_direct(delta / 2.0, omega.nrows()))
}

/// E_q[log p(Ω) − log q(Ω)] for p = Wishart(δ, θI), q = Wishart(δ^q, VᵀV).
/// Equals `elbo_wishart_term + wishart_term_constant` in expectation.
pub fn mc_wishart_term(delta_q: f64, v_q: &DMatrix<f64>, delta: f64, theta: f64, n_samples: usize, seed: u64) -> Result<McEstimate> {
    let d = v_q.nrows();
    let dq = v_q.transpose() * v_q;
    let prior_scale = DMatrix::identity(d, d) * theta;
    let (mean, se) = monte_carlo(n_samples, 1, seed, |rng| {
        let g = bartlett_factor(delta_q, d, rng)? * v_q;
        let omega = g.transpose() * g;
        let v = wishart_log_density(&omega, delta, &prior_scale)? - wishart_log_density(&omega, delta_q, &dq)?;
        Ok(DVector::from_element(1, v))
    })?;
    Ok(McEstimate { mean: mean[0], se: se[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::tests::{toy_context, toy_state};
    use crate::elbo::{elbo_gradient, elbo_joint_term, elbo_lambda_term, elbo_total, elbo_wishart_term, joint_term_constant, wishart_term_constant};
    use crate::kron::{ar_precision_dense, assemble_expected_prior_precision, bartlett_quadratic_expectation, kron_factor, sandwich, RBlock};
    use crate::model::Dims;

    #[test]
    fn lanczos_matches_known_values() {
        assert!((ln_gamma_lanczos(1.0)).abs() < 1e-14);
        assert!((ln_gamma_lanczos(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma_lanczos(10.0) - 362_880f64.ln()).abs() < 1e-12);
        assert!((ln_gamma_lanczos(1.5) - (std::f64::consts::PI.sqrt() / 2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn ar_inverse_matches_closed_entries() {
        let (a, b, c) = ar_entries_by_inversion(0.5).unwrap();
        assert!((a - 4.0 / 3.0).abs() < 1e-14 && (b + 2.0 / 3.0).abs() < 1e-14 && (c - 5.0 / 3.0).abs() < 1e-14);
        let r = ar_precision_dense(&DVector::from_element(1, 0.3), 5).unwrap();
        assert!((r - ar_precision_by_inversion(0.3, 5).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn scalar_bartlett_mean() {
        let one = DMatrix::identity(1, 1);
        let mc = mc_bartlett_expectation(&DVector::zeros(1), 3.0, &one, 4.0, &one, 200_000, 1).unwrap();
        for s in [0, 2] {
            assert!((mc.mean[s][(0, 0)] - 12.0).abs() < 3.0 * mc.se[s][(0, 0)]);
        }
        assert!(mc.mean[1][(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn standard_errors_shrink_like_root_n() {
        let one = DMatrix::identity(1, 1);
        let a = mc_bartlett_expectation(&DVector::from_element(1, 0.4), 3.0, &one, 4.0, &one, 20_000, 2).unwrap();
        let b = mc_bartlett_expectation(&DVector::from_element(1, 0.4), 3.0, &one, 4.0, &one, 80_000, 3).unwrap();
        let ratio = a.se[0][(0, 0)] / b.se[0][(0, 0)];
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn mc_is_deterministic() {
        let v = DMatrix::identity(2, 2);
        let phi = DVector::from_element(4, 0.2);
        let a = mc_bartlett_expectation(&phi, 3.0, &v, 3.5, &v, 10_000, 4).unwrap();
        let b = mc_bartlett_expectation(&phi, 3.0, &v, 3.5, &v, 10_000, 4).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn bartlett_closed_form_within_three_se() {
        let vk = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.8]);
        let vl = DMatrix::from_row_slice(2, 2, &[0.9, -0.2, 0.0, 1.2]);
        let phi = DVector::from_vec(vec![0.3, -0.5, 0.7, 0.1]);
        let mc = mc_bartlett_expectation(&phi, 2.6, &vk, 3.4, &vl, 200_000, 5).unwrap();
        let w = kron_factor(&vk, &vl);
        for (s, which) in RBlock::ALL.into_iter().enumerate() {
            let e = bartlett_quadratic_expectation(&phi, 2.6, 2, 3.4, 2, which).unwrap();
            let exact = sandwich(&w, &e);
            for i in 0..4 {
                for j in 0..4 {
                    let se = mc.se[s][(i, j)].max(1e-12);
                    assert!((exact[(i, j)] - mc.mean[s][(i, j)]).abs() < 3.5 * se, "block {s} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn dense_precision_matches_structured_operator() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 1);
        let st = toy_state(&ctx, 1);
        let dense = dense_prior_precision(&st, &ctx.design, &ctx.priors).unwrap();
        let op = assemble_expected_prior_precision(&ctx.design, &st, &ctx.priors).unwrap();
        let n = dense.nrows();
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            let col = op.matvec(&e);
            assert!((col - dense.column(j)).amax() < 1e-12);
            e[j] = 0.0;
        }
        assert!((&dense - dense.transpose()).amax() < 1e-14);
    }

    #[test]
    fn dense_precision_is_positive_definite() {
        for seed in 0..50 {
            let ctx = toy_context(Dims::new(2, 2, 2, 1, 3), seed);
            let st = toy_state(&ctx, seed);
            assert!(dense_prior_precision(&st, &ctx.design, &ctx.priors).unwrap().cholesky().is_some());
        }
    }

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_gradient(|x| x.norm_squared(), &DVector::from_vec(vec![1.0, 2.0]), 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_gradient(|x| x[0].ln(), &DVector::from_element(1, 2.0), 1e-5).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-9);
        let bad = finite_diff_gradient(|x| if x[1] > 1.0 { f64::NAN } else { 0.0 }, &DVector::from_vec(vec![0.0, 1.0]), 1e-3);
        assert_eq!(bad, Err(Error::NonFiniteEvaluation(1)));
    }

    #[test]
    fn finite_differences_match_lambda_gradient() {
        let ctx = toy_context(Dims::new(2, 2, 2, 2, 3), 2);
        let st = toy_state(&ctx, 2);
        let analytic = elbo_gradient(&st, &ctx).unwrap().lambda;
        let fd = finite_diff_gradient(
            |l| {
                let mut s = st.clone();
                s.lambda = l.clone();
                elbo_total(&s, &ctx).unwrap().total
            },
            &st.lambda,
            1e-6,
        )
        .unwrap();
        for i in 0..fd.len() {
            assert!((fd[i] - analytic[i]).abs() < 1e-5 * (1.0 + analytic[i].abs()));
        }
        // prior-only part of the λ gradient
        let pr = ctx.priors;
        let fd = finite_diff_gradient(|l| elbo_lambda_term(l, &pr), &st.lambda, 1e-6).unwrap();
        for i in 0..fd.len() {
            let exact = (pr.alpha_lambda - 1.0) / st.lambda[i] - pr.beta_lambda;
            assert!((fd[i] - exact).abs() < 1e-8 * exact.abs());
        }
    }

    #[test]
    fn joint_term_matches_monte_carlo() {
        let ctx = toy_context(Dims::new(2, 2, 2, 1, 2), 3);
        let st = toy_state(&ctx, 3);
        let analytic = elbo_joint_term(&st, &ctx).unwrap() + joint_term_constant(&ctx);
        let mc = mc_joint_term(&st, &ctx, 100_000, 7).unwrap();
        assert!(mc.z_score(analytic) < 3.0, "analytic {analytic} mc {:?}", mc);
    }

    #[test]
    fn wishart_term_matches_monte_carlo() {
        let v = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, 0.0, 0.5]);
        let (dq, d, th) = (4.5, 3.0, 1.5);
        let analytic = elbo_wishart_term(dq, &v, d, th).unwrap() + wishart_term_constant(2, d, th);
        let mc = mc_wishart_term(dq, &v, d, th, 100_000, 8).unwrap();
        assert!(mc.z_score(analytic) < 3.0, "analytic {analytic} mc {:?}", mc);
    }

    #[test]
    fn oversized_problems_are_refused() {
        let small = toy_context(Dims::new(2, 2, 2, 1, 2), 4);
        let st = toy_state(&small, 4);
        let big = toy_context(Dims::new(10, 10, 2, 1, 21), 4);
        assert!(big.design.total_dim() > DENSE_LIMIT);
        assert_eq!(
            dense_prior_precision(&st, &big.design, &big.priors),
            Err(Error::DimensionTooLarge(big.design.total_dim()))
        );
        assert!(matches!(mc_joint_term(&st, &big, 10, 0), Err(Error::DimensionTooLarge(_))));
    }
}
