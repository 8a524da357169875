//! Coordinate-ascent driver and its sub-updates.

mod anderson;
mod gaussian;
mod latent;
mod search;
mod smoothing;
mod wishart;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use anderson::{solve_fixed_point, AndersonWorkspace, FixedPointResult};
pub use gaussian::{cov_objective, covariance_map, newton_step_dense, update_cov, update_cov_with_memory, update_m, CovUpdate};
pub use latent::{phi_objectives, update_mu_sigma, update_phi, PhiObjective};
pub use search::{backtrack, Accepted};
pub use smoothing::{smooth_objective, update_lambda};
pub use wishart::{update_wishart, wishart_step, StepKind, WishartObjective};

use crate::design::FitContext;
use crate::elbo::elbo_total;
use crate::error::{Error, Result};
use crate::model::{FitReport, VariationalState, N_SMOOTHING};
use crate::moments::Side;
use crate::scalar::{c, Scalar};

/// Optimizer settings. Inner loops share `newton_max_inner` and `inner_tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaviConfig<T: Scalar> {
    pub max_sweeps: usize,
    pub elbo_rel_tol: T,
    pub anderson_memory: usize,
    pub newton_max_inner: usize,
    pub backtrack_shrink: T,
    pub backtrack_armijo: T,
    pub projection_floor_lambda: T,
    pub phi_bound: T,
    pub seed: u64,
    pub inner_tol: T,
    pub fixed_point_tol: T,
    pub fixed_point_max_iter: usize,
    pub parallel_phi: bool,
}

impl<T: Scalar> Default for CaviConfig<T> {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            elbo_rel_tol: c(1e-8),
            anderson_memory: 5,
            newton_max_inner: 50,
            backtrack_shrink: c(0.5),
            backtrack_armijo: c(1e-4),
            projection_floor_lambda: c(1e-8),
            phi_bound: c(1.0 - 1e-6),
            seed: 0,
            inner_tol: c(1e-12),
            fixed_point_tol: c(1e-8),
            fixed_point_max_iter: 500,
            parallel_phi: false,
        }
    }
}

impl<T: Scalar> CaviConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::InvalidConfig(s.to_string()));
        let positive = [
            ("elbo_rel_tol", self.elbo_rel_tol),
            ("backtrack_armijo", self.backtrack_armijo),
            ("projection_floor_lambda", self.projection_floor_lambda),
            ("inner_tol", self.inner_tol),
            ("fixed_point_tol", self.fixed_point_tol),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.backtrack_shrink > T::zero() && self.backtrack_shrink < T::one()) {
            return bad("backtrack_shrink must lie in (0, 1)");
        }
        if !(self.backtrack_armijo < T::one()) {
            return bad("backtrack_armijo must be below 1");
        }
        if !(self.phi_bound > T::zero() && self.phi_bound < T::one()) {
            return bad("phi_bound must lie in (0, 1)");
        }
        if self.max_sweeps == 0 || self.newton_max_inner == 0 || self.fixed_point_max_iter == 0 {
            return bad("iteration limits must be positive");
        }
        Ok(())
    }
}

/// Starting point for [`run_cavi`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// Deterministic: intercept at log(Σy/Σε), everything else at a neutral value.
    #[default]
    Default,
    /// Seeded random perturbation of the default.
    Random(u64),
}

pub fn initial_state<T: Scalar>(ctx: &FitContext<T>, init: InitStrategy) -> VariationalState<T> {
    let design = &ctx.design;
    let dims = design.dims();
    let n = design.total_dim();
    let lk = dims.latent_width();
    let mut m = DVector::zeros(n);
    m[0] = (ctx.response.counts.sum().max(c(0.5)) / ctx.response.offsets.sum()).ln();
    let mut st = VariationalState {
        m,
        cov: DMatrix::identity(n, n) * c::<T>(0.1),
        lambda: DVector::from_element(N_SMOOTHING, T::one()),
        mu: DVector::zeros(lk),
        sigma2: DVector::from_element(lk, c(0.1)),
        phi: DVector::zeros(lk),
        delta_k: T::from_count(dims.causes + 1),
        v_k: DMatrix::identity(dims.causes, dims.causes),
        delta_l: T::from_count(dims.regions + 1),
        v_l: DMatrix::identity(dims.regions, dims.regions),
    };
    if let InitStrategy::Random(seed) = init {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| c::<T>(rng.random_range(lo..hi));
        for i in 1..n {
            st.m[i] = u(-0.1, 0.1);
        }
        st.m[0] += u(-0.2, 0.2);
        st.lambda.iter_mut().for_each(|l| *l = u(0.5, 2.0));
        st.mu.iter_mut().for_each(|x| *x = u(-0.1, 0.1));
        st.sigma2.iter_mut().for_each(|x| *x = u(0.05, 0.2));
        st.phi.iter_mut().for_each(|x| *x = u(-0.5, 0.5));
        st.delta_k += u(0.0, 2.0);
        st.delta_l += u(0.0, 2.0);
        for v in [&mut st.v_k, &mut st.v_l] {
            let d = v.nrows();
            for i in 0..d {
                v[(i, i)] = u(0.7, 1.3);
                for j in i + 1..d {
                    v[(i, j)] = u(-0.2, 0.2);
                }
            }
        }
    }
    st
}

/// Failures a sweep can step over: the block keeps its value and a
/// warning is recorded.
fn is_soft(e: &Error) -> bool {
    matches!(
        e,
        Error::LineSearchStall(_)
            | Error::HessianFactorizationFailure
            | Error::SingularSystem(_)
            | Error::CholeskyFailure(_)
            | Error::NumericOverflow(_)
    )
}

struct Sweep<'a, T: Scalar> {
    ctx: &'a FitContext<T>,
    state: VariationalState<T>,
    elbo: T,
    warnings: Vec<String>,
}

impl<T: Scalar> Sweep<'_, T> {
    /// Applies one block update; reverts it if the ELBO went down.
    fn apply<F>(&mut self, name: &str, update: F) -> Result<()>
    where
        F: FnOnce(&VariationalState<T>, &mut Vec<String>) -> Result<VariationalState<T>>,
    {
        let candidate = match update(&self.state, &mut self.warnings) {
            Ok(s) => s,
            Err(e) if is_soft(&e) => {
                self.warnings.push(format!("{name}: {e}; block skipped"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let value = match elbo_total(&candidate, self.ctx) {
            Ok(b) if b.total.is_finite() => b.total,
            Ok(_) => {
                self.warnings.push(format!("{name}: non-finite ELBO; block reverted"));
                return Ok(());
            }
            Err(e) if is_soft(&e) => {
                self.warnings.push(format!("{name}: {e}; block reverted"));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if value < self.elbo - c::<T>(1e-12) * (T::one() + self.elbo.abs()) {
            self.warnings.push(format!("{name}: ELBO decreased by {}; block reverted", self.elbo - value));
            return Ok(());
        }
        self.state = candidate;
        self.elbo = value;
        Ok(())
    }

    fn run(&mut self, cfg: &CaviConfig<T>) -> Result<()> {
        let ctx = self.ctx;
        self.apply("m", |s, _| {
            let mut out = s.clone();
            out.m = update_m(s, ctx, cfg)?;
            Ok(out)
        })?;
        self.apply("M", |s, w| {
            let up = update_cov(s, ctx, cfg)?;
            if !up.converged {
                w.push(format!("M: fixed point stopped at residual {} after {} iterations", up.residual, up.iterations));
            }
            let mut out = s.clone();
            out.cov = up.cov;
            Ok(out)
        })?;
        self.apply("lambda", |s, _| {
            let mut out = s.clone();
            out.lambda = update_lambda(s, ctx, cfg)?;
            Ok(out)
        })?;
        self.apply("mu/sigma2", |s, _| {
            let mut out = s.clone();
            (out.mu, out.sigma2) = update_mu_sigma(s, ctx)?;
            Ok(out)
        })?;
        self.apply("phi", |s, w| {
            let mut out = s.clone();
            let (phi, msgs) = update_phi(s, ctx, cfg)?;
            out.phi = phi;
            w.extend(msgs);
            Ok(out)
        })?;
        self.apply("Omega_l", |s, _| {
            let mut out = s.clone();
            (out.delta_l, out.v_l) = update_wishart(s, ctx, cfg, Side::Region)?;
            Ok(out)
        })?;
        self.apply("Omega_k", |s, _| {
            let mut out = s.clone();
            (out.delta_k, out.v_k) = update_wishart(s, ctx, cfg, Side::Cause)?;
            Ok(out)
        })
    }
}

/// Runs coordinate ascent to convergence or `max_sweeps`.
///
/// Structural failures abort with [`Error::FitAborted`], which carries the
/// ELBO trace recorded so far.
pub fn run_cavi<T: Scalar>(
    ctx: &FitContext<T>,
    cfg: &CaviConfig<T>,
    init: Option<VariationalState<T>>,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    ctx.priors.validate(ctx.dims())?;
    let start = Instant::now();
    let state = match init {
        Some(s) => s,
        None => initial_state(ctx, InitStrategy::Default),
    };
    state.validate(ctx.dims(), ctx.design.total_dim())?;
    let elbo = elbo_total(&state, ctx)?.total;
    if !elbo.is_finite() {
        return Err(Error::InvalidState("ELBO is not finite at the initial state".into()));
    }
    let mut sweep = Sweep {
        ctx,
        state,
        elbo,
        warnings: Vec::new(),
    };
    let mut trace = vec![elbo];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_sweeps {
        let before = sweep.elbo;
        if let Err(e) = sweep.run(cfg) {
            return Err(Error::FitAborted {
                message: e.to_string(),
                elbo_trace: trace.iter().map(|v| v.as_f64()).collect(),
            });
        }
        iterations += 1;
        trace.push(sweep.elbo);
        if (sweep.elbo - before).abs() <= cfg.elbo_rel_tol * (T::one() + sweep.elbo.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        sweep.warnings.push(format!("not converged after {} sweeps", cfg.max_sweeps));
    }
    Ok(FitReport {
        elbo_trace: trace,
        converged,
        iterations,
        final_state: sweep.state,
        wall_time: start.elapsed().as_secs_f64(),
        warnings: sweep.warnings,
    })
}
