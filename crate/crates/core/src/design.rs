//! Two-block design: fixed effects and spline bases on the left, the
//! latent incidence block on the right.
//!
//! The latent block is never stored. Row `n` of month `t` touches exactly one
//! latent column, `p + t·LK + i` with `i` the (region, cause) coordinate, so
//! products with X are formed from the dense left block plus that index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Dims, PanelDataset, PriorConfig};
use crate::scalar::Scalar;
use crate::spline::{
    active_levels, interaction_blocks, penalty_pair, ByFactor, Covariate, KnotPlacement, NaturalCubicBasis,
    SmoothSpec,
};

/// The five smooth terms in design order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmoothName {
    Stringency,
    Age,
    CauseStringency,
    CauseAge,
    GenderAge,
}

impl SmoothName {
    pub const ALL: [SmoothName; 5] = [
        SmoothName::Stringency,
        SmoothName::Age,
        SmoothName::CauseStringency,
        SmoothName::CauseAge,
        SmoothName::GenderAge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SmoothName::Stringency => "r",
            SmoothName::Age => "a",
            SmoothName::CauseStringency => "kr",
            SmoothName::CauseAge => "ka",
            SmoothName::GenderAge => "ga",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.label() == s)
            .ok_or_else(|| Error::UnknownSmooth(s.to_string()))
    }

    /// Position in the smooth list; λ₁ sits at `2·ordinal`, λ₂ right after.
    pub fn ordinal(self) -> usize {
        Self::ALL.iter().position(|&n| n == self).unwrap()
    }

    pub fn covariate(self) -> Covariate {
        match self {
            SmoothName::Stringency | SmoothName::CauseStringency => Covariate::Stringency,
            _ => Covariate::Age,
        }
    }

    pub fn by_factor(self) -> Option<ByFactor> {
        match self {
            SmoothName::CauseStringency | SmoothName::CauseAge => Some(ByFactor::Cause),
            SmoothName::GenderAge => Some(ByFactor::Gender),
            _ => None,
        }
    }
}

/// Knot settings for the design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotConfig {
    pub stringency_knots: usize,
    pub stringency_placement: KnotPlacement,
    /// `None` means one knot per age group (at least 3).
    pub age_knots: Option<usize>,
    pub age_placement: KnotPlacement,
    pub cause_baseline: usize,
    pub gender_baseline: usize,
}

impl Default for KnotConfig {
    fn default() -> Self {
        Self {
            stringency_knots: 10,
            stringency_placement: KnotPlacement::Quantile,
            age_knots: None,
            age_placement: KnotPlacement::Uniform,
            cause_baseline: 0,
            gender_baseline: 0,
        }
    }
}

impl KnotConfig {
    pub fn age_knot_count(&self, dims: Dims) -> usize {
        self.age_knots.unwrap_or(dims.ages.max(3))
    }
}

/// One smooth's column block and penalties.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTerm<T: Scalar> {
    pub name: SmoothName,
    /// First column in the design.
    pub offset: usize,
    /// Zero when the smooth is absent (single-level by-factor).
    pub width: usize,
    pub s1: DMatrix<T>,
    pub s2: DMatrix<T>,
    /// Marginal basis shared by every level copy.
    pub basis: NaturalCubicBasis<T>,
    /// Factor levels of the column copies; empty for main effects.
    pub levels: Vec<usize>,
}

impl<T: Scalar> SmoothTerm<T> {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width
    }
}

/// Column counts of a design without building it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignShape {
    pub rows: usize,
    pub parametric_dim: usize,
    pub beta_dim: usize,
    pub latent_dim: usize,
    pub ones_len: usize,
}

impl DesignShape {
    pub fn new(dims: Dims, knots: &KnotConfig) -> Self {
        let jr = knots.stringency_knots;
        let ja = knots.age_knot_count(dims);
        let parametric_dim = 1 + dims.genders.saturating_sub(1);
        let beta_dim = parametric_dim
            + jr
            + ja
            + (jr + ja) * dims.causes.saturating_sub(1)
            + ja * dims.genders.saturating_sub(1);
        Self {
            rows: dims.n_rows(),
            parametric_dim,
            beta_dim,
            latent_dim: dims.latent_dim(),
            ones_len: dims.ones_len(),
        }
    }
}

/// Assembled design.
#[derive(Debug, Clone)]
pub struct ModelDesign<T: Scalar> {
    dims: Dims,
    left: DMatrix<T>,
    parametric_dim: usize,
    smooths: Vec<SmoothTerm<T>>,
}

impl<T: Scalar> ModelDesign<T> {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// p: intercept, gender dummies and spline coefficients.
    pub fn beta_dim(&self) -> usize {
        self.left.ncols()
    }

    /// Intercept plus gender dummies.
    pub fn parametric_dim(&self) -> usize {
        self.parametric_dim
    }

    /// Q = L·K·T.
    pub fn latent_dim(&self) -> usize {
        self.dims.latent_dim()
    }

    pub fn ones_len(&self) -> usize {
        self.dims.ones_len()
    }

    /// p + Q.
    pub fn total_dim(&self) -> usize {
        self.beta_dim() + self.latent_dim()
    }

    pub fn n_rows(&self) -> usize {
        self.left.nrows()
    }

    /// Dense left block (NT × p).
    pub fn left(&self) -> &DMatrix<T> {
        &self.left
    }

    pub fn smooths(&self) -> &[SmoothTerm<T>] {
        &self.smooths
    }

    pub fn smooth(&self, name: SmoothName) -> &SmoothTerm<T> {
        &self.smooths[name.ordinal()]
    }

    /// Design column of the single latent entry of `row`.
    #[inline]
    pub fn latent_column(&self, row: usize) -> usize {
        let n = self.dims.n_series();
        let t = row / n;
        let i = (row % n) / self.dims.ones_len();
        self.beta_dim() + t * self.dims.latent_width() + i
    }

    /// Materialized X, for tests and small problems.
    pub fn dense_x(&self) -> DMatrix<T> {
        let p = self.beta_dim();
        let mut x = DMatrix::zeros(self.n_rows(), self.total_dim());
        x.view_mut((0, 0), (self.n_rows(), p)).copy_from(&self.left);
        for r in 0..self.n_rows() {
            x[(r, self.latent_column(r))] = T::one();
        }
        x
    }

    /// X·v.
    pub fn mul_vec(&self, v: &DVector<T>) -> DVector<T> {
        let p = self.beta_dim();
        let mut out = &self.left * v.rows(0, p);
        for (r, o) in out.iter_mut().enumerate() {
            *o += v[self.latent_column(r)];
        }
        out
    }

    /// Xᵀ·w.
    pub fn tr_mul_vec(&self, w: &DVector<T>) -> DVector<T> {
        let p = self.beta_dim();
        let mut out = DVector::zeros(self.total_dim());
        out.rows_mut(0, p).copy_from(&self.left.tr_mul(w));
        for (r, &wr) in w.iter().enumerate() {
            out[self.latent_column(r)] += wr;
        }
        out
    }

    /// Row-wise quadratic forms xᵢᵀ·S·xᵢ for a symmetric S.
    pub fn row_quadratic_forms(&self, s: &DMatrix<T>) -> DVector<T> {
        let p = self.beta_dim();
        let s_ll = s.view((0, 0), (p, p));
        let proj = &self.left * s_ll;
        let mut out = DVector::zeros(self.n_rows());
        for r in 0..self.n_rows() {
            let c = self.latent_column(r);
            let x = self.left.row(r);
            let mut q = proj.row(r).dot(&x) + s[(c, c)];
            let mut cross = T::zero();
            for j in 0..p {
                cross += x[j] * s[(j, c)];
            }
            q += cross + cross;
            out[r] = q;
        }
        out
    }

    /// Xᵀ·diag(w)·X.
    pub fn weighted_gram(&self, w: &DVector<T>) -> DMatrix<T> {
        let p = self.beta_dim();
        let total = self.total_dim();
        let mut out = DMatrix::zeros(total, total);
        let mut scaled = self.left.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[r];
        }
        out.view_mut((0, 0), (p, p)).copy_from(&self.left.tr_mul(&scaled));
        for r in 0..self.n_rows() {
            let c = self.latent_column(r);
            out[(c, c)] += w[r];
            for j in 0..p {
                let v = scaled[(r, j)];
                out[(j, c)] += v;
                out[(c, j)] += v;
            }
        }
        out
    }
}

/// Counts and offsets in design row order.
#[derive(Debug, Clone, PartialEq)]
pub struct Response<T: Scalar> {
    pub counts: DVector<T>,
    pub offsets: DVector<T>,
}

impl<T: Scalar> Response<T> {
    pub fn from_dataset(data: &PanelDataset<T>) -> Self {
        let recs = data.records();
        Self {
            counts: DVector::from_iterator(recs.len(), recs.iter().map(|r| T::from_u64(r.count).unwrap())),
            offsets: DVector::from_iterator(recs.len(), recs.iter().map(|r| r.offset)),
        }
    }

    /// Σ (y log ε − log y!), the data-only part of the Poisson log-likelihood.
    pub fn log_likelihood_constant(&self) -> T {
        self.counts
            .iter()
            .zip(self.offsets.iter())
            .fold(T::zero(), |acc, (&y, &e)| acc + y * e.ln() - crate::special::ln_gamma(y + T::one()))
    }
}

/// Everything held fixed during a fit.
#[derive(Debug, Clone)]
pub struct FitContext<T: Scalar> {
    pub design: ModelDesign<T>,
    pub response: Response<T>,
    pub priors: PriorConfig<T>,
}

impl<T: Scalar> FitContext<T> {
    pub fn new(data: &PanelDataset<T>, knots: &KnotConfig, priors: PriorConfig<T>) -> Result<Self> {
        priors.validate(data.dims())?;
        Ok(Self {
            design: build_design(data, knots)?,
            response: Response::from_dataset(data),
            priors,
        })
    }

    pub fn dims(&self) -> Dims {
        self.design.dims()
    }
}

/// Builds X and the penalty pairs from a validated dataset.
pub fn build_design<T: Scalar>(data: &PanelDataset<T>, knots: &KnotConfig) -> Result<ModelDesign<T>> {
    let dims = data.dims();
    let recs = data.records();
    if recs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if knots.cause_baseline >= dims.causes || knots.gender_baseline >= dims.genders {
        return Err(Error::InvalidSmoothSpec("baseline level out of range".into()));
    }
    let stringency: Vec<T> = recs.iter().map(|r| r.stringency).collect();
    let age: Vec<T> = recs.iter().map(|r| T::from_count(r.age)).collect();

    let r_spec = SmoothSpec::main(Covariate::Stringency, knots.stringency_knots, knots.stringency_placement);
    let a_spec = SmoothSpec::main(Covariate::Age, knots.age_knot_count(dims), knots.age_placement);
    let r_basis = NaturalCubicBasis::from_spec(&r_spec, &stringency)?;
    let a_basis = NaturalCubicBasis::from_spec(&a_spec, &age)?;
    let r_cols = r_basis.eval(&stringency);
    let a_cols = a_basis.eval(&age);
    let r_pen = penalty_pair(&r_basis);
    let a_pen = penalty_pair(&a_basis);

    let causes: Vec<usize> = recs.iter().map(|r| r.cause).collect();
    let genders: Vec<usize> = recs.iter().map(|r| r.gender).collect();

    let parametric_dim = 1 + dims.genders - 1;
    let mut blocks: Vec<DMatrix<T>> = Vec::new();
    let mut param = DMatrix::zeros(recs.len(), parametric_dim);
    let gender_levels = active_levels(dims.genders, knots.gender_baseline);
    for (r, rec) in recs.iter().enumerate() {
        param[(r, 0)] = T::one();
        if let Some(pos) = gender_levels.iter().position(|&g| g == rec.gender) {
            param[(r, 1 + pos)] = T::one();
        }
    }
    blocks.push(param);

    let mut smooths = Vec::with_capacity(5);
    let mut offset = parametric_dim;
    for name in SmoothName::ALL {
        let (basis, cols, pen) = match name.covariate() {
            Covariate::Stringency => (&r_basis, &r_cols, &r_pen),
            Covariate::Age => (&a_basis, &a_cols, &a_pen),
        };
        let (columns, s1, s2, levels) = match name.by_factor() {
            None => (cols.clone(), pen.0.clone(), pen.1.clone(), Vec::new()),
            Some(by) => {
                let (row_levels, n_levels, baseline) = match by {
                    ByFactor::Cause => (&causes, dims.causes, knots.cause_baseline),
                    ByFactor::Gender => (&genders, dims.genders, knots.gender_baseline),
                };
                if n_levels < 2 {
                    (DMatrix::zeros(recs.len(), 0), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0), Vec::new())
                } else {
                    let b = interaction_blocks(cols, row_levels, n_levels, baseline, (&pen.0, &pen.1))?;
                    (b.columns, b.s1, b.s2, b.levels)
                }
            }
        };
        let width = columns.ncols();
        smooths.push(SmoothTerm {
            name,
            offset,
            width,
            s1,
            s2,
            basis: basis.clone(),
            levels,
        });
        offset += width;
        blocks.push(columns);
    }

    let mut left = DMatrix::zeros(recs.len(), offset);
    let mut col = 0;
    for b in blocks {
        left.view_mut((0, col), (recs.len(), b.ncols())).copy_from(&b);
        col += b.ncols();
    }
    Ok(ModelDesign {
        dims,
        left,
        parametric_dim,
        smooths,
    })
}
