//! Time-reduced second moments of the centered latent states.
//!
//! With r = m_z − 1_T ⊗ μ and Ψ = r rᵀ + M_zz + I_T ⊗ diag(σ²), every
//! latent-block trace against E_q(M₀⁻¹) collapses to three LK×LK matrices:
//! Γ₁ (end months), Γ₃ (interior months) and Γ₂ (consecutive-month pairs,
//! both orders).

use nalgebra::{DMatrix, DVector};

use crate::design::ModelDesign;
use crate::kron::{kron_factor, latent_weights, BartlettMoments, RBlock};
use crate::model::VariationalState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMoments<T: Scalar> {
    pub corner: DMatrix<T>,
    pub off: DMatrix<T>,
    pub interior: DMatrix<T>,
}

impl<T: Scalar> LatentMoments<T> {
    pub fn new(state: &VariationalState<T>, design: &ModelDesign<T>) -> Self {
        let dims = design.dims();
        let lk = dims.latent_width();
        let p = design.beta_dim();
        let months = dims.months;
        let resid: Vec<DVector<T>> = (0..months)
            .map(|t| state.m.rows(p + t * lk, lk) - &state.mu)
            .collect();
        let block = |t: usize, s: usize| -> DMatrix<T> {
            let mut b = &resid[t] * resid[s].transpose() + state.cov.view((p + t * lk, p + s * lk), (lk, lk));
            if t == s {
                for i in 0..lk {
                    b[(i, i)] += state.sigma2[i];
                }
            }
            b
        };
        let mut corner = block(0, 0);
        if months > 1 {
            corner += block(months - 1, months - 1);
        }
        let mut interior = DMatrix::zeros(lk, lk);
        for t in 1..months.saturating_sub(1) {
            interior += block(t, t);
        }
        let mut off = DMatrix::zeros(lk, lk);
        for t in 0..months.saturating_sub(1) {
            off += block(t, t + 1);
            off += block(t + 1, t);
        }
        Self { corner, off, interior }
    }

    pub fn get(&self, which: RBlock) -> &DMatrix<T> {
        match which {
            RBlock::Corner => &self.corner,
            RBlock::OffDiagonal => &self.off,
            RBlock::Interior => &self.interior,
        }
    }

    /// diag(W Γ_s Wᵀ) for each block.
    pub fn projected_diagonals(&self, w: &DMatrix<T>) -> [DVector<T>; 3] {
        RBlock::ALL.map(|s| {
            let wg = w * self.get(s);
            DVector::from_fn(w.nrows(), |a, _| wg.row(a).dot(&w.row(a)))
        })
    }

    /// Σ_s e*_s · diag(W Γ_s Wᵀ): the latent part of
    /// (m−m̄)ᵀΛ(m−m̄) + tr(ΛM) + tr(ΛC).
    pub fn latent_quadratic(&self, state: &VariationalState<T>, months: usize) -> crate::Result<T> {
        let kk = state.v_k.nrows();
        let ll = state.v_l.nrows();
        let moments = BartlettMoments::new(state.delta_k, kk, state.delta_l, ll)?;
        let weights = latent_weights(&state.phi, &moments, months)?;
        let g = self.projected_diagonals(&kron_factor(&state.v_k, &state.v_l));
        Ok(weights.corner.dot(&g[0]) + weights.off.dot(&g[1]) + weights.interior.dot(&g[2]))
    }
}

/// Which Wishart factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    /// Ω^l, L×L.
    Region,
    /// Ω^k, K×K.
    Cause,
}

impl Side {
    /// Flat latent position of (active-side index, other-side index).
    #[inline]
    pub(crate) fn pos(self, active: usize, other: usize, regions: usize) -> usize {
        match self {
            Side::Region => other * regions + active,
            Side::Cause => active * regions + other,
        }
    }
}

/// ∂/∂V_ij of Σ_s tr(E_s W Γ_s Wᵀ), upper triangle, for the chosen side.
/// `e` holds the diagonals e*_s.
pub fn latent_v_gradient<T: Scalar>(
    moments: &LatentMoments<T>,
    e: &[DVector<T>; 3],
    v_k: &DMatrix<T>,
    v_l: &DMatrix<T>,
    side: Side,
) -> DMatrix<T> {
    let w = kron_factor(v_k, v_l);
    let regions = v_l.nrows();
    // gradient with respect to W: 2 E W Γ (Γ symmetric)
    let mut gw = DMatrix::zeros(w.nrows(), w.ncols());
    for (s, which) in RBlock::ALL.into_iter().enumerate() {
        let mut ewg = &w * moments.get(which);
        for (a, mut row) in ewg.row_iter_mut().enumerate() {
            row *= e[s][a];
        }
        gw += ewg;
    }
    gw *= T::one() + T::one();
    let (v_act, v_oth) = match side {
        Side::Region => (v_l, v_k),
        Side::Cause => (v_k, v_l),
    };
    let d = v_act.nrows();
    let o = v_oth.nrows();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = T::zero();
            for o1 in 0..o {
                for o2 in 0..o {
                    let vo = v_oth[(o1, o2)];
                    if vo != T::zero() {
                        acc += vo * gw[(side.pos(i, o1, regions), side.pos(j, o2, regions))];
                    }
                }
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Upper-triangle coordinates of a d×d factor, row by row.
pub fn upper_indices(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i..d).map(move |j| (i, j))).collect()
}

/// Hessian of Σ_s tr(E_s W Γ_s Wᵀ) over the upper triangle of the chosen
/// side's V (ordered as [`upper_indices`]). W is linear in V, so only the
/// product term survives.
pub fn latent_v_hessian<T: Scalar>(
    moments: &LatentMoments<T>,
    e: &[DVector<T>; 3],
    v_k: &DMatrix<T>,
    v_l: &DMatrix<T>,
    side: Side,
) -> DMatrix<T> {
    let regions = v_l.nrows();
    let (v_act, v_oth) = match side {
        Side::Region => (v_l, v_k),
        Side::Cause => (v_k, v_l),
    };
    let d = v_act.nrows();
    let o = v_oth.nrows();
    let idx = upper_indices(d);
    let mut h = DMatrix::zeros(idx.len(), idx.len());
    for (p, &(i, j)) in idx.iter().enumerate() {
        for (q, &(i2, j2)) in idx.iter().enumerate().skip(p) {
            if i != i2 {
                continue;
            }
            let mut acc = T::zero();
            for (s, which) in RBlock::ALL.into_iter().enumerate() {
                let g = moments.get(which);
                for o1 in 0..o {
                    let ea = e[s][side.pos(i, o1, regions)];
                    if ea == T::zero() {
                        continue;
                    }
                    let mut inner = T::zero();
                    for o2 in 0..o {
                        let a = v_oth[(o1, o2)];
                        if a == T::zero() {
                            continue;
                        }
                        for o3 in 0..o {
                            let b = v_oth[(o1, o3)];
                            if b != T::zero() {
                                inner += a * b * g[(side.pos(j, o2, regions), side.pos(j2, o3, regions))];
                            }
                        }
                    }
                    acc += ea * inner;
                }
            }
            acc *= T::one() + T::one();
            h[(p, q)] = acc;
            h[(q, p)] = acc;
        }
    }
    h
}
