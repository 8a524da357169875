use dyngam_core::cavi::{update_cov, update_cov_with_memory, update_m};
use dyngam_core::simulate::{simulate_dataset, SimulationConfig};
use dyngam_core::{
    elbo_total, initial_state, run_cavi, validate_dataset, CaviConfig, Dims, FitContext, InitStrategy, KnotConfig, Panel, PanelDataset,
    PriorConfig, Record,
};

fn knots() -> KnotConfig {
    KnotConfig {
        stringency_knots: 5,
        ..KnotConfig::default()
    }
}

fn simulated(dims: Dims, seed: u64) -> (Panel, FitContext<f64>) {
    let cfg = SimulationConfig {
        knots: knots(),
        ..SimulationConfig::new(dims, seed)
    };
    let (data, _) = simulate_dataset(&cfg).unwrap();
    let ctx = FitContext::new(&data, &cfg.knots, PriorConfig::for_dims(dims)).unwrap();
    (data, ctx)
}

#[test]
fn simulated_fits_are_monotone_and_valid() {
    for seed in 0..3 {
        let (_, ctx) = simulated(Dims::new(3, 2, 3, 2, 6), seed);
        let report = run_cavi(&ctx, &CaviConfig::default(), None).unwrap();
        assert!(report.converged);
        assert!(report.worst_relative_decrease() <= 1e-6);
        report.final_state.validate(ctx.dims(), ctx.design.total_dim()).unwrap();
        let first = report.elbo_trace[0];
        assert!(*report.elbo_trace.last().unwrap() > first);
    }
}

#[test]
fn single_precision_fit_runs() {
    let dims = Dims::new(2, 2, 3, 1, 4);
    let (data, _) = simulated(dims, 11);
    let records: Vec<Record<f32>> = data
        .records()
        .iter()
        .map(|r| Record {
            region: r.region,
            cause: r.cause,
            age: r.age,
            gender: r.gender,
            month: r.month,
            count: r.count,
            offset: r.offset as f32,
            stringency: r.stringency as f32,
        })
        .collect();
    let data32: PanelDataset<f32> = validate_dataset(records, dims).unwrap();
    let ctx = FitContext::new(&data32, &knots(), PriorConfig::<f32>::for_dims(dims)).unwrap();
    let cfg = CaviConfig::<f32> {
        elbo_rel_tol: 1e-5,
        fixed_point_tol: 1e-4,
        max_sweeps: 200,
        ..CaviConfig::default()
    };
    let report = run_cavi(&ctx, &cfg, None).unwrap();
    let last = *report.elbo_trace.last().unwrap();
    assert!(last.is_finite() && last > report.elbo_trace[0]);
    // single precision tracks the double-precision optimum loosely
    let (_, ctx64) = simulated(dims, 11);
    let r64 = run_cavi(&ctx64, &CaviConfig::default(), None).unwrap();
    let e64 = *r64.elbo_trace.last().unwrap();
    assert!(((last as f64) - e64).abs() < 1e-3 * e64.abs(), "{last} vs {e64}");
}

#[test]
fn anderson_and_plain_iterations_agree() {
    for seed in 0..4 {
        let (_, ctx) = simulated(Dims::new(2, 2, 3, 2, 4), seed);
        let cfg = CaviConfig::default();
        let mut st = initial_state(&ctx, InitStrategy::Random(seed));
        st.m = update_m(&st, &ctx, &cfg).unwrap();
        let aa = update_cov(&st, &ctx, &cfg).unwrap();
        let plain = update_cov_with_memory(&st, &ctx, &cfg, 0).unwrap();
        assert!(aa.converged && plain.converged);
        assert!((&aa.cov - &plain.cov).norm() <= 1e-6 * (1.0 + plain.cov.norm()));
    }
}

#[test]
fn dropping_a_cause_still_fits() {
    let (data, _) = simulated(Dims::new(2, 3, 3, 1, 4), 5);
    let reduced = data.without_cause(1).unwrap();
    assert_eq!(reduced.dims().causes, 2);
    let ctx = FitContext::new(&reduced, &knots(), PriorConfig::for_dims(reduced.dims())).unwrap();
    let report = run_cavi(&ctx, &CaviConfig { max_sweeps: 20, ..CaviConfig::default() }, None).unwrap();
    assert!(elbo_total(&report.final_state, &ctx).unwrap().total.is_finite());
}
