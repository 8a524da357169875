//! Domain types: panel data, prior hyperparameters and the variational state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Panel dimensions: L regions, K causes, A age groups, G genders, T months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub regions: usize,
    pub causes: usize,
    pub ages: usize,
    pub genders: usize,
    pub months: usize,
}

impl Dims {
    pub fn new(regions: usize, causes: usize, ages: usize, genders: usize, months: usize) -> Self {
        Self {
            regions,
            causes,
            ages,
            genders,
            months,
        }
    }

    /// Number of latent series, L·K.
    pub fn latent_width(&self) -> usize {
        self.regions * self.causes
    }

    /// Latent columns in the design, Q = L·K·T.
    pub fn latent_dim(&self) -> usize {
        self.latent_width() * self.months
    }

    /// Cells sharing one latent coordinate at a given month, A·G.
    pub fn ones_len(&self) -> usize {
        self.ages * self.genders
    }

    /// Number of count series N = L·K·A·G.
    pub fn n_series(&self) -> usize {
        self.latent_width() * self.ones_len()
    }

    /// Number of observations N·T.
    pub fn n_rows(&self) -> usize {
        self.n_series() * self.months
    }

    /// Latent coordinate of (region, cause); regions vary fastest.
    #[inline]
    pub fn latent_index(&self, region: usize, cause: usize) -> usize {
        cause * self.regions + region
    }

    /// Inverse of [`Dims::latent_index`].
    #[inline]
    pub fn latent_coords(&self, index: usize) -> (usize, usize) {
        (index % self.regions, index / self.regions)
    }

    /// Series index n in canonical order.
    #[inline]
    pub fn series_index(&self, region: usize, cause: usize, age: usize, gender: usize) -> usize {
        (self.latent_index(region, cause) * self.ages + age) * self.genders + gender
    }

    /// Row of the design for a cell: months major, then series.
    #[inline]
    pub fn row_index(&self, region: usize, cause: usize, age: usize, gender: usize, month: usize) -> usize {
        month * self.n_series() + self.series_index(region, cause, age, gender)
    }

    fn check_nonzero(&self) -> Result<()> {
        if self.regions == 0 || self.causes == 0 || self.ages == 0 || self.genders == 0 || self.months == 0 {
            return Err(Error::DimensionMismatch(format!("all dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// One observed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record<T> {
    pub region: usize,
    pub cause: usize,
    pub age: usize,
    pub gender: usize,
    pub month: usize,
    pub count: u64,
    pub offset: T,
    pub stringency: T,
}

/// Long-format count panel. After validation the records are stored in
/// canonical row order (see [`Dims::row_index`]).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset<T> {
    dims: Dims,
    records: Vec<Record<T>>,
}

impl<T: Scalar> PanelDataset<T> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn records(&self) -> &[Record<T>] {
        &self.records
    }

    /// Record at a canonical row.
    pub fn row(&self, row: usize) -> &Record<T> {
        &self.records[row]
    }

    pub fn total_count(&self) -> f64 {
        self.records.iter().map(|r| r.count as f64).sum()
    }

    pub fn total_offset(&self) -> T {
        self.records.iter().fold(T::zero(), |acc, r| acc + r.offset)
    }

    /// Stringency for each (region, month), indexed `month * L + region`.
    pub fn stringency_grid(&self) -> Vec<T> {
        let d = self.dims;
        let mut out = vec![T::zero(); d.regions * d.months];
        for r in &self.records {
            out[r.month * d.regions + r.region] = r.stringency;
        }
        out
    }

    /// Drop every record of one cause and renumber the causes above it.
    pub fn without_cause(&self, cause: usize) -> Result<Self> {
        if cause >= self.dims.causes || self.dims.causes < 2 {
            return Err(Error::CoordOutOfRange {
                index: cause,
                size: self.dims.causes,
            });
        }
        let records = self
            .records
            .iter()
            .filter(|r| r.cause != cause)
            .map(|r| Record {
                cause: if r.cause > cause { r.cause - 1 } else { r.cause },
                ..*r
            })
            .collect();
        let dims = Dims {
            causes: self.dims.causes - 1,
            ..self.dims
        };
        validate_dataset(records, dims)
    }
}

/// Checks the panel invariants and returns the records in canonical order.
pub fn validate_dataset<T: Scalar>(records: Vec<Record<T>>, dims: Dims) -> Result<PanelDataset<T>> {
    dims.check_nonzero()?;
    let n_rows = dims.n_rows();
    let mut slots: Vec<Option<Record<T>>> = vec![None; n_rows];
    let mut stringency: Vec<Option<T>> = vec![None; dims.regions * dims.months];

    for (index, rec) in records.into_iter().enumerate() {
        let in_range = rec.region < dims.regions
            && rec.cause < dims.causes
            && rec.age < dims.ages
            && rec.gender < dims.genders
            && rec.month < dims.months;
        if !in_range {
            return Err(Error::InvalidRecord {
                index,
                what: format!("category code outside dimensions {dims:?}"),
            });
        }
        if !(rec.offset > T::zero()) || !rec.offset.is_finite() {
            return Err(Error::NonPositiveOffset { index });
        }
        if !(rec.stringency >= T::zero() && rec.stringency <= c(100.0)) {
            return Err(Error::InvalidRecord {
                index,
                what: "stringency outside [0, 100]".into(),
            });
        }
        let row = dims.row_index(rec.region, rec.cause, rec.age, rec.gender, rec.month);
        if slots[row].is_some() {
            return Err(Error::DuplicateCell {
                region: rec.region,
                cause: rec.cause,
                age: rec.age,
                gender: rec.gender,
                month: rec.month,
            });
        }
        let cell = rec.month * dims.regions + rec.region;
        match stringency[cell] {
            Some(s) if s != rec.stringency => {
                return Err(Error::StringencyMismatch {
                    region: rec.region,
                    month: rec.month,
                })
            }
            _ => stringency[cell] = Some(rec.stringency),
        }
        slots[row] = Some(rec);
    }

    let mut ordered = Vec::with_capacity(n_rows);
    for (row, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(r) => ordered.push(r),
            None => {
                let month = row / dims.n_series();
                let mut n = row % dims.n_series();
                let gender = n % dims.genders;
                n /= dims.genders;
                let age = n % dims.ages;
                let (region, cause) = dims.latent_coords(n / dims.ages);
                return Err(Error::MissingCell {
                    region,
                    cause,
                    age,
                    gender,
                    month,
                });
            }
        }
    }
    Ok(PanelDataset {
        dims,
        records: ordered,
    })
}

/// Functional form of the autoregressive-coefficient prior term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiPriorForm {
    /// (α−1)·log(1+φ) + (β−1)·log(1−φ), the Beta((φ+1)/2) log density.
    #[default]
    BetaConsistent,
    /// (α−1)·log(1+φ²) + (β−1)·log(1−φ²).
    Printed,
}

/// Fixed hyperparameters of the hierarchical model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig<T> {
    pub alpha_lambda: T,
    pub beta_lambda: T,
    pub alpha_phi: T,
    pub beta_phi: T,
    pub delta_k: T,
    pub theta_k: T,
    pub delta_l: T,
    pub theta_l: T,
    pub sigma2_beta: T,
    pub sigma2_mu: T,
    pub phi_prior_form: PhiPriorForm,
}

impl<T: Scalar> PriorConfig<T> {
    /// Recommended hyperparameters for large mortality panels: α_λ = 1,
    /// β_λ = 1000, α_φ = β_φ = 10, δ^k = K, δ^l = L, θ^k = K − 2,
    /// θ^l = L − 2, σ²_β = 10, σ²_μ = 1. Needs K, L ≥ 3.
    pub fn mortality_study(dims: Dims) -> Result<Self> {
        let p = Self {
            alpha_lambda: c(1.0),
            beta_lambda: c(1000.0),
            alpha_phi: c(10.0),
            beta_phi: c(10.0),
            delta_k: T::from_count(dims.causes),
            theta_k: T::from_count(dims.causes) - c(2.0),
            delta_l: T::from_count(dims.regions),
            theta_l: T::from_count(dims.regions) - c(2.0),
            sigma2_beta: c(10.0),
            sigma2_mu: c(1.0),
            phi_prior_form: PhiPriorForm::BetaConsistent,
        };
        p.validate(dims)?;
        Ok(p)
    }

    /// Same rule as [`PriorConfig::mortality_study`] but with θ floored at 1
    /// so that small panels (K or L ≤ 2) stay admissible.
    pub fn for_dims(dims: Dims) -> Self {
        let theta = |d: usize| if d > 3 { T::from_count(d - 2) } else { T::one() };
        Self {
            alpha_lambda: c(1.0),
            beta_lambda: c(1000.0),
            alpha_phi: c(10.0),
            beta_phi: c(10.0),
            delta_k: T::from_count(dims.causes),
            theta_k: theta(dims.causes),
            delta_l: T::from_count(dims.regions),
            theta_l: theta(dims.regions),
            sigma2_beta: c(10.0),
            sigma2_mu: c(1.0),
            phi_prior_form: PhiPriorForm::BetaConsistent,
        }
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        let named = [
            ("alpha_lambda", self.alpha_lambda),
            ("beta_lambda", self.beta_lambda),
            ("alpha_phi", self.alpha_phi),
            ("beta_phi", self.beta_phi),
            ("delta_k", self.delta_k),
            ("theta_k", self.theta_k),
            ("delta_l", self.delta_l),
            ("theta_l", self.theta_l),
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_mu", self.sigma2_mu),
        ];
        for (name, v) in named {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidPrior(format!("{name} must be positive and finite")));
            }
        }
        if self.delta_k <= T::from_count(dims.causes) - T::one() {
            return Err(Error::InvalidPrior("delta_k must exceed K - 1".into()));
        }
        if self.delta_l <= T::from_count(dims.regions) - T::one() {
            return Err(Error::InvalidPrior("delta_l must exceed L - 1".into()));
        }
        Ok(())
    }
}

/// Number of smoothing parameters (two per smooth, five smooths).
pub const N_SMOOTHING: usize = 10;

/// Every variational parameter.
///
/// `v_k` and `v_l` are upper-triangular with positive diagonals; the
/// Wishart scale matrices are D = VᵀV.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState<T: Scalar> {
    pub m: DVector<T>,
    pub cov: DMatrix<T>,
    /// Ordered (r₁, r₂, a₁, a₂, kr₁, kr₂, ka₁, ka₂, ga₁, ga₂).
    pub lambda: DVector<T>,
    pub mu: DVector<T>,
    pub sigma2: DVector<T>,
    pub phi: DVector<T>,
    pub delta_k: T,
    pub v_k: DMatrix<T>,
    pub delta_l: T,
    pub v_l: DMatrix<T>,
}

impl<T: Scalar> VariationalState<T> {
    /// D^{q,k} = (V^{q,k})ᵀ V^{q,k}.
    pub fn d_k(&self) -> DMatrix<T> {
        self.v_k.transpose() * &self.v_k
    }

    /// D^{q,l} = (V^{q,l})ᵀ V^{q,l}.
    pub fn d_l(&self) -> DMatrix<T> {
        self.v_l.transpose() * &self.v_l
    }

    /// Checks the structural invariants; `total_dim` is p + Q.
    pub fn validate(&self, dims: Dims, total_dim: usize) -> Result<()> {
        let lk = dims.latent_width();
        let bad = |s: &str| Err(Error::InvalidState(s.to_string()));
        if self.m.len() != total_dim || self.cov.nrows() != total_dim || self.cov.ncols() != total_dim {
            return bad("m / M dimensions do not match the design");
        }
        if self.lambda.len() != N_SMOOTHING || self.lambda.iter().any(|&l| !(l > T::zero())) {
            return bad("lambda must hold 10 positive values");
        }
        if self.mu.len() != lk || self.sigma2.len() != lk || self.phi.len() != lk {
            return bad("mu / sigma2 / phi must have length L*K");
        }
        if self.sigma2.iter().any(|&s| !(s > T::zero())) {
            return bad("sigma2 must be positive");
        }
        if let Some((index, &v)) = self.phi.iter().enumerate().find(|(_, &p)| !(p.abs() < T::one())) {
            return Err(Error::PhiOutOfRange {
                index,
                value: v.as_f64(),
            });
        }
        check_wishart_factor(self.delta_k, &self.v_k, dims.causes)?;
        check_wishart_factor(self.delta_l, &self.v_l, dims.regions)?;
        if nalgebra::Cholesky::new(self.cov.clone()).is_none() {
            return Err(Error::CholeskyFailure("variational covariance M".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_wishart_factor<T: Scalar>(delta: T, v: &DMatrix<T>, dim: usize) -> Result<()> {
    if v.nrows() != dim || v.ncols() != dim {
        return Err(Error::InvalidState(format!("Wishart factor must be {dim}x{dim}")));
    }
    let min = T::from_count(dim) - T::one();
    if !(delta > min) {
        return Err(Error::DegreesOfFreedomTooSmall {
            delta: delta.as_f64(),
            min: min.as_f64(),
        });
    }
    for i in 0..dim {
        if !(v[(i, i)] > T::zero()) {
            return Err(Error::InvalidState("Wishart factor diagonal must be positive".into()));
        }
        for j in 0..i {
            if v[(i, j)] != T::zero() {
                return Err(Error::InvalidState("Wishart factor must be upper triangular".into()));
            }
        }
    }
    Ok(())
}

/// Outcome of a CAVI run.
#[derive(Debug, Clone)]
pub struct FitReport<T: Scalar> {
    /// ELBO after initialization followed by one value per sweep.
    pub elbo_trace: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub final_state: VariationalState<T>,
    pub wall_time: f64,
    pub warnings: Vec<String>,
}

impl<T: Scalar> FitReport<T> {
    /// Largest ELBO decrease between consecutive entries (after the first),
    /// relative to 1 + |ELBO|. Non-positive means the trace is monotone.
    pub fn worst_relative_decrease(&self) -> f64 {
        self.elbo_trace
            .windows(2)
            .map(|w| (w[0].as_f64() - w[1].as_f64()) / (1.0 + w[0].as_f64().abs()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
