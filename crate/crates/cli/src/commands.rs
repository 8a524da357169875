//! The `fit` and `simulate` subcommands as library calls.

use std::fs;
use std::path::{Path, PathBuf};

use dyngam_core::simulate::{simulate_dataset, GroundTruth, SimulationConfig};
use dyngam_core::{run_cavi, Context, Dims, Report};
use serde::{Deserialize, Serialize};

use crate::config::{FitConfig, InitChoice};
use crate::export::{matrix_rows, write_fit_artifacts, FitArtifacts};
use crate::io::{read_panel_csv, save_panel_csv};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub data: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub drop_cause: Option<usize>,
    /// Random initialization from this seed, overriding `init` and `seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub report: Report,
    pub artifacts: FitArtifacts,
}

pub fn fit_command(args: &FitArgs) -> Result<FitOutcome, CliError> {
    let mut cfg = match &args.config {
        Some(p) => FitConfig::load(p)?,
        None => FitConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.cavi.seed = seed;
        cfg.init = InitChoice::Random;
    }
    let mut data = read_panel_csv(&args.data)?;
    if let Some(c) = args.drop_cause {
        data = data.without_cause(c)?;
    }
    let priors = cfg.priors(data.dims())?;
    let ctx = Context::new(&data, &cfg.knots, priors)?;
    let init = dyngam_core::initial_state(&ctx, cfg.init_strategy());
    let report = run_cavi(&ctx, &cfg.cavi, Some(init))?;

    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let artifacts = write_fit_artifacts(&args.out, &report, &ctx.design, cfg.dependence_threshold, cfg.smooth_grid)?;
    let resolved = args.out.join("config_used.txt");
    fs::write(&resolved, cfg.render(&priors)).map_err(|e| CliError::io(&resolved, e))?;
    Ok(FitOutcome { report, artifacts })
}

/// Simulation parameters, serialized next to the data when requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthExport {
    pub beta_star: Vec<f64>,
    pub mu: Vec<f64>,
    pub phi: Vec<f64>,
    pub omega_k: Vec<Vec<f64>>,
    pub omega_l: Vec<Vec<f64>>,
    pub latent_path: Vec<Vec<f64>>,
}

impl From<&GroundTruth> for TruthExport {
    fn from(t: &GroundTruth) -> Self {
        Self {
            beta_star: t.beta_star.iter().copied().collect(),
            mu: t.mu.iter().copied().collect(),
            phi: t.phi.iter().copied().collect(),
            omega_k: matrix_rows(&t.omega_k),
            omega_l: matrix_rows(&t.omega_l),
            latent_path: matrix_rows(&t.latent_path),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub dims: Dims,
    pub seed: u64,
    pub out: PathBuf,
    pub truth: Option<PathBuf>,
    pub phi: Option<f64>,
}

pub fn simulate_command(args: &SimulateArgs) -> Result<GroundTruth, CliError> {
    let mut cfg = SimulationConfig::new(args.dims, args.seed);
    cfg.phi = args.phi;
    let (data, truth) = simulate_dataset(&cfg)?;
    save_panel_csv(&data, &args.out)?;
    if let Some(p) = &args.truth {
        write_truth(&truth, p)?;
    }
    Ok(truth)
}

fn write_truth(truth: &GroundTruth, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&TruthExport::from(truth)).map_err(|e| CliError::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// `L,K,A,G,T`
pub fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a count")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [l, k, a, g, t] if parts.iter().all(|&v| v > 0) => Ok(Dims::new(l, k, a, g, t)),
        [_, _, _, _, _] => Err("every dimension must be positive".into()),
        _ => Err("expected five comma-separated counts L,K,A,G,T".into()),
    }
}
