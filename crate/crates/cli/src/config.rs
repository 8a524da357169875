//! Line-oriented `key = value` fit configuration.

use std::path::Path;
use std::str::FromStr;

use dyngam_core::spline::KnotPlacement;
use dyngam_core::{CaviConfig, Dims, InitStrategy, KnotConfig, PhiPriorForm, Priors, Settings};

use crate::CliError;

/// How the optimizer starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitChoice {
    #[default]
    Default,
    /// Seeded from `seed`.
    Random,
}

/// Every setting of a fit. Prior values left unset fall back to
/// [`Priors::for_dims`] once the data dimensions are known.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub alpha_lambda: Option<f64>,
    pub beta_lambda: Option<f64>,
    pub alpha_phi: Option<f64>,
    pub beta_phi: Option<f64>,
    pub delta_k: Option<f64>,
    pub theta_k: Option<f64>,
    pub delta_l: Option<f64>,
    pub theta_l: Option<f64>,
    pub sigma2_beta: Option<f64>,
    pub sigma2_mu: Option<f64>,
    pub phi_prior_form: Option<PhiPriorForm>,
    pub cavi: Settings,
    pub knots: KnotConfig,
    pub init: InitChoice,
    pub dependence_threshold: f64,
    pub smooth_grid: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            alpha_lambda: None,
            beta_lambda: None,
            alpha_phi: None,
            beta_phi: None,
            delta_k: None,
            theta_k: None,
            delta_l: None,
            theta_l: None,
            sigma2_beta: None,
            sigma2_mu: None,
            phi_prior_form: None,
            cavi: CaviConfig::default(),
            knots: KnotConfig::default(),
            init: InitChoice::Default,
            dependence_threshold: 0.1,
            smooth_grid: 100,
        }
    }
}

/// Recognized keys, in documentation order.
pub const KEYS: [&str; 34] = [
    "alpha_lambda",
    "beta_lambda",
    "alpha_phi",
    "beta_phi",
    "delta_k",
    "theta_k",
    "delta_l",
    "theta_l",
    "sigma2_beta",
    "sigma2_mu",
    "phi_prior_form",
    "max_sweeps",
    "elbo_rel_tol",
    "anderson_memory",
    "newton_max_inner",
    "backtrack_shrink",
    "backtrack_armijo",
    "projection_floor_lambda",
    "phi_bound",
    "seed",
    "inner_tol",
    "fixed_point_tol",
    "fixed_point_max_iter",
    "parallel_phi",
    "stringency_knots",
    "stringency_placement",
    "age_knots",
    "age_placement",
    "cause_baseline",
    "gender_baseline",
    "init",
    "dependence_threshold",
    "smooth_grid",
    "drop_cause",
];

fn value<T: FromStr>(raw: &str, key: &str, line: usize) -> Result<T, CliError> {
    raw.parse().map_err(|_| CliError::Config {
        line,
        message: format!("invalid value `{raw}` for `{key}`"),
    })
}

fn placement(raw: &str, key: &str, line: usize) -> Result<KnotPlacement, CliError> {
    match raw {
        "quantile" => Ok(KnotPlacement::Quantile),
        "uniform" => Ok(KnotPlacement::Uniform),
        _ => Err(CliError::Config {
            line,
            message: format!("`{key}` must be `quantile` or `uniform`"),
        }),
    }
}

fn placement_name(p: KnotPlacement) -> &'static str {
    match p {
        KnotPlacement::Quantile => "quantile",
        KnotPlacement::Uniform => "uniform",
    }
}

impl FitConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, val) = content.split_once('=').ok_or_else(|| CliError::Config {
                line,
                message: "expected `key = value`".into(),
            })?;
            let (key, val) = (key.trim(), val.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(key, val, line)?;
        }
        cfg.cavi.validate()?;
        if !(cfg.dependence_threshold >= 0.0) {
            return Err(CliError::Config {
                line: 0,
                message: "dependence_threshold must be non-negative".into(),
            });
        }
        if cfg.smooth_grid < 2 {
            return Err(CliError::Config {
                line: 0,
                message: "smooth_grid must be at least 2".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
    }

    fn set(&mut self, key: &str, v: &str, line: usize) -> Result<(), CliError> {
        let c = &mut self.cavi;
        match key {
            "alpha_lambda" => self.alpha_lambda = Some(value(v, key, line)?),
            "beta_lambda" => self.beta_lambda = Some(value(v, key, line)?),
            "alpha_phi" => self.alpha_phi = Some(value(v, key, line)?),
            "beta_phi" => self.beta_phi = Some(value(v, key, line)?),
            "delta_k" => self.delta_k = Some(value(v, key, line)?),
            "theta_k" => self.theta_k = Some(value(v, key, line)?),
            "delta_l" => self.delta_l = Some(value(v, key, line)?),
            "theta_l" => self.theta_l = Some(value(v, key, line)?),
            "sigma2_beta" => self.sigma2_beta = Some(value(v, key, line)?),
            "sigma2_mu" => self.sigma2_mu = Some(value(v, key, line)?),
            "phi_prior_form" => {
                self.phi_prior_form = Some(match v {
                    "beta" => PhiPriorForm::BetaConsistent,
                    "printed" => PhiPriorForm::Printed,
                    _ => {
                        return Err(CliError::Config {
                            line,
                            message: "`phi_prior_form` must be `beta` or `printed`".into(),
                        })
                    }
                })
            }
            "max_sweeps" => c.max_sweeps = value(v, key, line)?,
            "elbo_rel_tol" => c.elbo_rel_tol = value(v, key, line)?,
            "anderson_memory" => c.anderson_memory = value(v, key, line)?,
            "newton_max_inner" => c.newton_max_inner = value(v, key, line)?,
            "backtrack_shrink" => c.backtrack_shrink = value(v, key, line)?,
            "backtrack_armijo" => c.backtrack_armijo = value(v, key, line)?,
            "projection_floor_lambda" => c.projection_floor_lambda = value(v, key, line)?,
            "phi_bound" => c.phi_bound = value(v, key, line)?,
            "seed" => c.seed = value(v, key, line)?,
            "inner_tol" => c.inner_tol = value(v, key, line)?,
            "fixed_point_tol" => c.fixed_point_tol = value(v, key, line)?,
            "fixed_point_max_iter" => c.fixed_point_max_iter = value(v, key, line)?,
            "parallel_phi" => c.parallel_phi = value(v, key, line)?,
            "stringency_knots" => self.knots.stringency_knots = value(v, key, line)?,
            "stringency_placement" => self.knots.stringency_placement = placement(v, key, line)?,
            "age_knots" => {
                self.knots.age_knots = if v == "auto" { None } else { Some(value(v, key, line)?) };
            }
            "age_placement" => self.knots.age_placement = placement(v, key, line)?,
            "cause_baseline" => self.knots.cause_baseline = value(v, key, line)?,
            "gender_baseline" => self.knots.gender_baseline = value(v, key, line)?,
            "init" => {
                self.init = match v {
                    "default" => InitChoice::Default,
                    "random" => InitChoice::Random,
                    _ => {
                        return Err(CliError::Config {
                            line,
                            message: "`init` must be `default` or `random`".into(),
                        })
                    }
                }
            }
            "dependence_threshold" => self.dependence_threshold = value(v, key, line)?,
            "smooth_grid" => self.smooth_grid = value(v, key, line)?,
            "drop_cause" => {
                return Err(CliError::Config {
                    line,
                    message: "`drop_cause` is a command-line flag (--drop-cause), not a config key".into(),
                })
            }
            _ => {
                return Err(CliError::Config {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Priors for a panel of the given size.
    pub fn priors(&self, dims: Dims) -> Result<Priors, CliError> {
        let mut p = Priors::for_dims(dims);
        let pick = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        pick(&mut p.alpha_lambda, self.alpha_lambda);
        pick(&mut p.beta_lambda, self.beta_lambda);
        pick(&mut p.alpha_phi, self.alpha_phi);
        pick(&mut p.beta_phi, self.beta_phi);
        pick(&mut p.delta_k, self.delta_k);
        pick(&mut p.theta_k, self.theta_k);
        pick(&mut p.delta_l, self.delta_l);
        pick(&mut p.theta_l, self.theta_l);
        pick(&mut p.sigma2_beta, self.sigma2_beta);
        pick(&mut p.sigma2_mu, self.sigma2_mu);
        if let Some(f) = self.phi_prior_form {
            p.phi_prior_form = f;
        }
        p.validate(dims)?;
        Ok(p)
    }

    pub fn init_strategy(&self) -> InitStrategy {
        match self.init {
            InitChoice::Default => InitStrategy::Default,
            InitChoice::Random => InitStrategy::Random(self.cavi.seed),
        }
    }

    /// The fully resolved configuration as config text.
    pub fn render(&self, priors: &Priors) -> String {
        let c = &self.cavi;
        let k = &self.knots;
        let form = match priors.phi_prior_form {
            PhiPriorForm::BetaConsistent => "beta",
            PhiPriorForm::Printed => "printed",
        };
        let lines = [
            format!("alpha_lambda = {}", priors.alpha_lambda),
            format!("beta_lambda = {}", priors.beta_lambda),
            format!("alpha_phi = {}", priors.alpha_phi),
            format!("beta_phi = {}", priors.beta_phi),
            format!("delta_k = {}", priors.delta_k),
            format!("theta_k = {}", priors.theta_k),
            format!("delta_l = {}", priors.delta_l),
            format!("theta_l = {}", priors.theta_l),
            format!("sigma2_beta = {}", priors.sigma2_beta),
            format!("sigma2_mu = {}", priors.sigma2_mu),
            format!("phi_prior_form = {form}"),
            format!("max_sweeps = {}", c.max_sweeps),
            format!("elbo_rel_tol = {}", c.elbo_rel_tol),
            format!("anderson_memory = {}", c.anderson_memory),
            format!("newton_max_inner = {}", c.newton_max_inner),
            format!("backtrack_shrink = {}", c.backtrack_shrink),
            format!("backtrack_armijo = {}", c.backtrack_armijo),
            format!("projection_floor_lambda = {}", c.projection_floor_lambda),
            format!("phi_bound = {}", c.phi_bound),
            format!("seed = {}", c.seed),
            format!("inner_tol = {}", c.inner_tol),
            format!("fixed_point_tol = {}", c.fixed_point_tol),
            format!("fixed_point_max_iter = {}", c.fixed_point_max_iter),
            format!("parallel_phi = {}", c.parallel_phi),
            format!("stringency_knots = {}", k.stringency_knots),
            format!("stringency_placement = {}", placement_name(k.stringency_placement)),
            format!("age_knots = {}", k.age_knots.map_or("auto".to_string(), |n| n.to_string())),
            format!("age_placement = {}", placement_name(k.age_placement)),
            format!("cause_baseline = {}", k.cause_baseline),
            format!("gender_baseline = {}", k.gender_baseline),
            format!(
                "init = {}",
                match self.init {
                    InitChoice::Default => "default",
                    InitChoice::Random => "random",
                }
            ),
            format!("dependence_threshold = {}", self.dependence_threshold),
            format!("smooth_grid = {}", self.smooth_grid),
        ];
        lines.join("\n") + "\n"
    }
}
