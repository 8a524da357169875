//! Synthetic panels drawn from the generative model with known parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::design::{build_design, KnotConfig, ModelDesign};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dims, PanelDataset, Record};

/// Largest Poisson rate the sampler accepts.
pub const MAX_RATE: f64 = 1e12;

/// Parameters a synthetic panel was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Coefficients of the design's fixed part (intercept, gender, smooths).
    pub beta_star: DVector<f64>,
    pub mu: DVector<f64>,
    pub phi: DVector<f64>,
    pub omega_k: DMatrix<f64>,
    pub omega_l: DMatrix<f64>,
    /// Row t holds z_t.
    pub latent_path: DMatrix<f64>,
}

impl GroundTruth {
    /// [β*; vec z] laid out like the variational mean.
    pub fn stacked(&self) -> DVector<f64> {
        let (t, lk) = self.latent_path.shape();
        let p = self.beta_star.len();
        let mut out = DVector::zeros(p + t * lk);
        out.rows_mut(0, p).copy_from(&self.beta_star);
        for s in 0..t {
            out.rows_mut(p + s * lk, lk).copy_from(&self.latent_path.row(s).transpose());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, &v)) = self.phi.iter().enumerate().find(|(_, v)| !(v.abs() < 1.0)) {
            return Err(Error::PhiOutOfRange { index: i, value: v });
        }
        upper_factor(&self.omega_k, "omega_k")?;
        upper_factor(&self.omega_l, "omega_l")?;
        let lk = self.omega_k.nrows() * self.omega_l.nrows();
        if self.mu.len() != lk || self.phi.len() != lk || self.latent_path.ncols() != lk {
            return Err(Error::DimensionMismatch(format!("latent width must be {lk}")));
        }
        Ok(())
    }
}

/// Upper-triangular U with UᵀU = Ω.
pub fn upper_factor(omega: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let ch = omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::CholeskyFailure(format!("{what} is not positive definite")))?;
    Ok(ch.l().transpose())
}

/// Draws z_1..z_T with z_1 from the stationary law and
/// P(z_t − μ) = Φ P(z_{t−1} − μ) + ε_t, ε_t ~ N(0, I − Φ²), P = U_k ⊗ U_l.
pub fn sample_latent_path(
    mu: &DVector<f64>,
    phi: &DVector<f64>,
    omega_k: &DMatrix<f64>,
    omega_l: &DMatrix<f64>,
    months: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let p = upper_factor(omega_k, "omega_k")?.kronecker(&upper_factor(omega_l, "omega_l")?);
    let lk = p.nrows();
    if mu.len() != lk || phi.len() != lk {
        return Err(Error::DimensionMismatch(format!("mu and phi must have length {lk}")));
    }
    if let Some((i, &v)) = phi.iter().enumerate().find(|(_, v)| !(v.abs() < 1.0)) {
        return Err(Error::PhiOutOfRange { index: i, value: v });
    }
    let p_lu = p.lu();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = DVector::from_fn(lk, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut path = DMatrix::zeros(months, lk);
    for t in 0..months {
        if t > 0 {
            for i in 0..lk {
                let e: f64 = rng.sample(StandardNormal);
                u[i] = phi[i] * u[i] + (1.0 - phi[i] * phi[i]).sqrt() * e;
            }
        }
        let z = p_lu.solve(&u).ok_or_else(|| Error::SingularSystem("latent factor P".into()))? + mu;
        path.row_mut(t).copy_from(&z.transpose());
    }
    Ok(path)
}

/// Poisson rates ε·exp(xβ* + z*) for every canonical row of `design`.
pub fn expected_rates(design: &ModelDesign<f64>, offsets: &DVector<f64>, truth: &GroundTruth) -> Result<DVector<f64>> {
    let stacked = truth.stacked();
    if stacked.len() != design.total_dim() {
        return Err(Error::DimensionMismatch(format!(
            "truth has {} coefficients, design expects {}",
            stacked.len(),
            design.total_dim()
        )));
    }
    let eta = design.mul_vec(&stacked);
    let mut rates = DVector::zeros(eta.len());
    for (i, &e) in eta.iter().enumerate() {
        let r = offsets[i] * e.exp();
        if !(r <= MAX_RATE) {
            return Err(Error::RateOverflow(r));
        }
        rates[i] = r;
    }
    Ok(rates)
}

/// Replaces the counts of `template` by Poisson draws under `truth`.
pub fn sample_counts(
    template: &PanelDataset<f64>,
    knots: &KnotConfig,
    truth: &GroundTruth,
    seed: u64,
) -> Result<PanelDataset<f64>> {
    let design = build_design(template, knots)?;
    let offsets = DVector::from_iterator(template.records().len(), template.records().iter().map(|r| r.offset));
    let rates = expected_rates(&design, &offsets, truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = template
        .records()
        .iter()
        .zip(rates.iter())
        .map(|(r, &rate)| {
            let count = if rate > 0.0 {
                Poisson::new(rate).map_err(|_| Error::RateOverflow(rate))?.sample(&mut rng) as u64
            } else {
                0
            };
            Ok(Record { count, ..*r })
        })
        .collect::<Result<Vec<_>>>()?;
    validate_dataset(records, template.dims())
}

/// Settings for [`simulate_dataset`]. Unset matrices are drawn at random.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub dims: Dims,
    pub seed: u64,
    pub knots: KnotConfig,
    /// Log of the baseline rate per unit offset.
    pub intercept: f64,
    pub offset_range: (f64, f64),
    /// Standard deviation of spline coefficients and gender effects.
    pub effect_scale: f64,
    /// Common autoregressive coefficient; `None` draws each from U(−0.9, 0.9).
    pub phi: Option<f64>,
    pub mu_scale: f64,
    pub omega_k: Option<DMatrix<f64>>,
    pub omega_l: Option<DMatrix<f64>>,
    /// Precision multiplier of the random Ω^l (larger means a smaller latent).
    pub latent_precision: f64,
}

impl SimulationConfig {
    pub fn new(dims: Dims, seed: u64) -> Self {
        Self {
            dims,
            seed,
            knots: KnotConfig::default(),
            intercept: -2.0,
            offset_range: (50.0, 200.0),
            effect_scale: 0.2,
            phi: None,
            mu_scale: 0.2,
            omega_k: None,
            omega_l: None,
            latent_precision: 4.0,
        }
    }
}

fn random_precision(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // unit diagonal with off-diagonals in ±0.4/(d−1) keeps it diagonally dominant
    let bound = if d > 1 { 0.8 / (d - 1) as f64 } else { 0.0 };
    let mut m = DMatrix::identity(d, d);
    for i in 0..d {
        for j in i + 1..d {
            let v = rng.random_range(-bound..=bound);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m * scale
}

/// A fully synthetic panel: smooth stringency paths, random offsets and
/// effects, and counts drawn from the model.
pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<(PanelDataset<f64>, GroundTruth)> {
    let d = cfg.dims;
    if d.regions == 0 || d.causes == 0 || d.ages == 0 || d.genders == 0 || d.months == 0 {
        return Err(Error::DimensionMismatch(format!("all dimensions must be positive: {d:?}")));
    }
    let (lo, hi) = cfg.offset_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidConfig("offset_range must be positive and ordered".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // stringency: a clipped random walk per region on [0, 100]
    let mut stringency = vec![0.0; d.regions * d.months];
    for l in 0..d.regions {
        let mut s: f64 = rng.random_range(10.0..90.0);
        for t in 0..d.months {
            s = (s + rng.random_range(-15.0..15.0)).clamp(0.0, 100.0);
            stringency[t * d.regions + l] = s.round();
        }
    }
    let mut records = Vec::with_capacity(d.n_rows());
    for month in 0..d.months {
        for region in 0..d.regions {
            for cause in 0..d.causes {
                for age in 0..d.ages {
                    for gender in 0..d.genders {
                        records.push(Record {
                            region,
                            cause,
                            age,
                            gender,
                            month,
                            count: 0,
                            offset: if hi > lo { rng.random_range(lo..hi) } else { lo },
                            stringency: stringency[month * d.regions + region],
                        });
                    }
                }
            }
        }
    }
    let template = validate_dataset(records, d)?;
    let design = build_design(&template, &cfg.knots)?;

    let mut beta_star = DVector::from_fn(design.beta_dim(), |_, _| cfg.effect_scale * rng.sample::<f64, _>(StandardNormal));
    beta_star[0] = cfg.intercept;
    let lk = d.latent_width();
    let mu = DVector::from_fn(lk, |_, _| cfg.mu_scale * rng.sample::<f64, _>(StandardNormal));
    let phi = match cfg.phi {
        Some(v) => DVector::from_element(lk, v),
        None => DVector::from_fn(lk, |_, _| rng.random_range(-0.9..0.9)),
    };
    let omega_k = match &cfg.omega_k {
        Some(m) => m.clone(),
        None => random_precision(d.causes, 1.0, &mut rng),
    };
    let omega_l = match &cfg.omega_l {
        Some(m) => m.clone(),
        None => random_precision(d.regions, cfg.latent_precision, &mut rng),
    };
    let path_seed = rng.random::<u64>();
    let count_seed = rng.random::<u64>();
    let latent_path = sample_latent_path(&mu, &phi, &omega_k, &omega_l, d.months, path_seed)?;
    let truth = GroundTruth {
        beta_star,
        mu,
        phi,
        omega_k,
        omega_l,
        latent_path,
    };
    truth.validate()?;
    let data = sample_counts(&template, &cfg.knots, &truth, count_seed)?;
    Ok((data, truth))
}
