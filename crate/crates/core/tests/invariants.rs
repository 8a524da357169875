use dyngam_core::cavi::{update_cov, update_lambda, update_m, update_mu_sigma, update_phi, update_wishart};
use dyngam_core::moments::Side;
use dyngam_core::simulate::{simulate_dataset, SimulationConfig};
use dyngam_core::{elbo_total, initial_state, CaviConfig, Dims, FitContext, InitStrategy, KnotConfig, PriorConfig, State};
use proptest::prelude::*;

fn context(seed: u64, months: usize) -> FitContext<f64> {
    let dims = Dims::new(2, 2, 3, 2, months);
    let cfg = SimulationConfig {
        knots: KnotConfig {
            stringency_knots: 4,
            ..KnotConfig::default()
        },
        ..SimulationConfig::new(dims, seed)
    };
    let (data, _) = simulate_dataset(&cfg).unwrap();
    FitContext::new(&data, &cfg.knots, PriorConfig::for_dims(dims)).unwrap()
}

fn check(st: &State, ctx: &FitContext<f64>, before: f64) -> f64 {
    st.validate(ctx.dims(), ctx.design.total_dim()).unwrap();
    assert!(st.cov.clone().cholesky().is_some());
    let after = elbo_total(st, ctx).unwrap().total;
    assert!(after >= before - 1e-9 * (1.0 + before.abs()), "{before} -> {after}");
    after
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn every_sub_update_keeps_the_state_admissible(seed in 0u64..1000, init in 0u64..1000, months in 1usize..5) {
        let ctx = context(seed, months);
        let cfg = CaviConfig::default();
        let mut st = initial_state(&ctx, InitStrategy::Random(init));
        let mut e = elbo_total(&st, &ctx).unwrap().total;
        st.m = update_m(&st, &ctx, &cfg).unwrap();
        e = check(&st, &ctx, e);
        st.cov = update_cov(&st, &ctx, &cfg).unwrap().cov;
        e = check(&st, &ctx, e);
        st.lambda = update_lambda(&st, &ctx, &cfg).unwrap();
        e = check(&st, &ctx, e);
        (st.mu, st.sigma2) = update_mu_sigma(&st, &ctx).unwrap();
        e = check(&st, &ctx, e);
        st.phi = update_phi(&st, &ctx, &cfg).unwrap().0;
        e = check(&st, &ctx, e);
        (st.delta_l, st.v_l) = update_wishart(&st, &ctx, &cfg, Side::Region).unwrap();
        e = check(&st, &ctx, e);
        (st.delta_k, st.v_k) = update_wishart(&st, &ctx, &cfg, Side::Cause).unwrap();
        check(&st, &ctx, e);
        prop_assert!(st.phi.iter().all(|p| p.abs() < 1.0));
        prop_assert!(st.lambda.iter().all(|&l| l > 0.0));
        prop_assert!(st.delta_k > 1.0 && st.delta_l > 1.0);
    }
}
