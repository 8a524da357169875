//! Fast cross-checks of the engine against its independent oracles.

use dyngam_core::elbo::{elbo_gradient, elbo_total, elbo_wishart_term, wishart_term_constant};
use dyngam_core::kron::{
    ar_precision_dense, assemble_expected_prior_precision, bartlett_quadratic_expectation, kron_factor, sandwich, RBlock,
};
use dyngam_core::oracles::{
    ar_covariance_dense, dense_prior_precision, finite_diff_gradient, mc_bartlett_expectation, mc_wishart_term,
};
use dyngam_core::simulate::{simulate_dataset, SimulationConfig};
use dyngam_core::{initial_state, Context, Dims, InitStrategy, KnotConfig, Priors, Result, State};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

fn toy(dims: Dims, seed: u64) -> Result<(Context, State)> {
    let (data, _) = simulate_dataset(&SimulationConfig::new(dims, seed))?;
    let ctx = Context::new(&data, &KnotConfig::default(), Priors::for_dims(dims))?;
    let st = initial_state(&ctx, InitStrategy::Random(seed));
    Ok((ctx, st))
}

fn ar_identity() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for &phi in &[-0.9, -0.3, 0.0, 0.5, 0.95] {
        for t in 1..=6 {
            let prec = ar_precision_dense(&DVector::from_element(1, phi), t)?;
            let err = (prec * ar_covariance_dense(phi, t) - DMatrix::identity(t, t)).amax();
            worst = worst.max(err);
        }
    }
    Ok((worst < 1e-10, format!("max |QΣ − I| = {worst:.2e}")))
}

fn structured_vs_dense() -> Result<(bool, String)> {
    let (ctx, st) = toy(Dims::new(2, 2, 2, 2, 3), 1)?;
    let dense = dense_prior_precision(&st, &ctx.design, &ctx.priors)?;
    let op = assemble_expected_prior_precision(&ctx.design, &st, &ctx.priors)?;
    let err = (op.to_dense() - &dense).amax();
    Ok((err < 1e-10, format!("max entry error = {err:.2e}")))
}

fn gradients() -> Result<(bool, String)> {
    let (ctx, st) = toy(Dims::new(2, 2, 2, 2, 3), 2)?;
    let g = elbo_gradient(&st, &ctx)?;
    let total = |s: &State| elbo_total(s, &ctx).map(|b| b.total).unwrap_or(f64::NAN);
    let blocks: [(&str, DVector<f64>, DVector<f64>); 3] = [
        (
            "m",
            g.m.clone(),
            finite_diff_gradient(
                |x| {
                    let mut s = st.clone();
                    s.m = x.clone();
                    total(&s)
                },
                &st.m,
                1e-5,
            )?,
        ),
        (
            "lambda",
            g.lambda.clone(),
            finite_diff_gradient(
                |x| {
                    let mut s = st.clone();
                    s.lambda = x.clone();
                    total(&s)
                },
                &st.lambda,
                1e-6,
            )?,
        ),
        (
            "phi",
            g.phi.clone(),
            finite_diff_gradient(
                |x| {
                    let mut s = st.clone();
                    s.phi = x.clone();
                    total(&s)
                },
                &st.phi,
                1e-6,
            )?,
        ),
    ];
    let mut worst = 0.0f64;
    for (_, a, fd) in &blocks {
        let rel = (a - fd).amax() / (1.0 + a.amax());
        worst = worst.max(rel);
    }
    Ok((worst < 1e-4, format!("max relative error over m, λ, φ = {worst:.2e}")))
}

fn bartlett_mc() -> Result<(bool, String)> {
    let vk = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.8]);
    let vl = DMatrix::from_row_slice(2, 2, &[0.9, -0.2, 0.0, 1.2]);
    let phi = DVector::from_vec(vec![0.3, -0.5, 0.7, 0.1]);
    let mc = mc_bartlett_expectation(&phi, 2.6, &vk, 3.4, &vl, 40_000, 11)?;
    let w = kron_factor(&vk, &vl);
    let mut worst = 0.0f64;
    for (s, which) in RBlock::ALL.into_iter().enumerate() {
        let exact = sandwich(&w, &bartlett_quadratic_expectation(&phi, 2.6, 2, 3.4, 2, which)?);
        for i in 0..4 {
            for j in 0..4 {
                let se = mc.se[s][(i, j)];
                if se > 0.0 {
                    worst = worst.max((exact[(i, j)] - mc.mean[s][(i, j)]).abs() / se);
                }
            }
        }
    }
    Ok((worst < 4.5, format!("max |z| = {worst:.2}")))
}

fn wishart_mc() -> Result<(bool, String)> {
    let v = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.1, 0.0, 0.9, 0.3, 0.0, 0.0, 1.3]);
    let (delta_q, delta, theta) = (4.5, 3.0, 2.0);
    let mc = mc_wishart_term(delta_q, &v, delta, theta, 20_000, 3)?;
    let exact = elbo_wishart_term(delta_q, &v, delta, theta)? + wishart_term_constant(3, delta, theta);
    let z = mc.z_score(exact);
    Ok((z < 4.0, format!("|z| = {z:.2}")))
}

/// Runs every check; errors count as failures.
pub fn run_checks() -> Vec<CheckRow> {
    let checks: [(&'static str, Check); 5] = [
        ("ar precision times covariance is identity", ar_identity),
        ("structured prior precision equals dense", structured_vs_dense),
        ("analytic gradients match finite differences", gradients),
        ("bartlett expectations match monte carlo", bartlett_mc),
        ("wishart entropy term matches monte carlo", wishart_mc),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckRow { name, passed, detail },
            Err(e) => CheckRow { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

pub fn render_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    rows.iter()
        .map(|r| format!("{} {:width$}  {}\n", if r.passed { "[PASS]" } else { "[FAIL]" }, r.name, r.detail))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let rows = run_checks();
        assert_eq!(rows.len(), 5);
        for r in &rows {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(render_table(&rows).lines().count(), 5);
    }
}
