//! Anderson acceleration (type II) for vector fixed-point problems.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::scalar::{c, Scalar};

/// Rolling window of iterates xᵢ and their images g(xᵢ).
#[derive(Debug, Clone)]
pub struct AndersonWorkspace<T: Scalar> {
    memory: usize,
    iterates: VecDeque<DVector<T>>,
    images: VecDeque<DVector<T>>,
    gamma: DVector<T>,
}

impl<T: Scalar> AndersonWorkspace<T> {
    /// Keeps up to `memory + 1` points.
    pub fn new(memory: usize) -> Self {
        Self {
            memory,
            iterates: VecDeque::new(),
            images: VecDeque::new(),
            gamma: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn clear(&mut self) {
        self.iterates.clear();
        self.images.clear();
    }

    /// Mixing weights of the last step; they sum to one.
    pub fn gamma(&self) -> &DVector<T> {
        &self.gamma
    }

    /// Residual matrix F with columns g(xᵢ) − xᵢ.
    pub fn residuals(&self) -> DMatrix<T> {
        let n = self.iterates.front().map_or(0, |x| x.len());
        let mut f = DMatrix::zeros(n, self.len());
        for (j, (x, g)) in self.iterates.iter().zip(&self.images).enumerate() {
            f.set_column(j, &(g - x));
        }
        f
    }

    /// Records (x, g(x)) and returns Σγᵢ g(xᵢ) with γ minimizing ‖Fγ‖ subject
    /// to Σγᵢ = 1. Solved in difference form, min ‖f_k − ΔF θ‖, through a
    /// truncated SVD so nearly collinear residual histories are ignored
    /// rather than amplified.
    pub fn step(&mut self, x: DVector<T>, gx: DVector<T>) -> DVector<T> {
        self.iterates.push_back(x);
        self.images.push_back(gx);
        while self.iterates.len() > self.memory + 1 {
            self.iterates.pop_front();
            self.images.pop_front();
        }
        let k = self.len();
        if k == 1 {
            self.gamma = DVector::from_element(1, T::one());
            return self.images[0].clone();
        }
        let f = self.residuals();
        let newest = f.column(k - 1).into_owned();
        let df = DMatrix::from_fn(f.nrows(), k - 1, |r, j| f[(r, j + 1)] - f[(r, j)]);
        let svd = df.svd(true, true);
        let cutoff = svd.singular_values.max() * c::<T>(1e-10);
        let theta = if cutoff > T::zero() { svd.solve(&newest, cutoff).ok() } else { None };
        let gamma = match theta {
            Some(th) if th.iter().all(|v| v.is_finite()) => {
                // x⁺ = g_k − Σ θ_j (g_{j+1} − g_j) rewritten as weights on the images
                let mut g = DVector::zeros(k);
                for j in 0..k - 1 {
                    g[j] += th[j];
                    g[j + 1] -= th[j];
                }
                g[k - 1] += T::one();
                g
            }
            _ => {
                let mut g = DVector::zeros(k);
                g[k - 1] = T::one();
                g
            }
        };
        let mut out = DVector::zeros(self.images[0].len());
        for (w, g) in gamma.iter().zip(&self.images) {
            out.axpy(*w, g, T::one());
        }
        self.gamma = gamma;
        out
    }
}

/// Outcome of a fixed-point solve.
#[derive(Debug, Clone)]
pub struct FixedPointResult<T: Scalar> {
    pub point: DVector<T>,
    pub iterations: usize,
    pub residual: T,
    pub converged: bool,
}

/// Solves x = g(x) with optional Anderson acceleration (`memory = 0` is plain
/// iteration). Stops when ‖g(x) − x‖ ≤ tol·(1 + ‖x‖) and returns g(x).
/// `accept` can veto an extrapolated point (e.g. one that is not positive
/// definite); the plain image is used instead.
pub fn solve_fixed_point<T, G, A>(
    x0: DVector<T>,
    mut g: G,
    memory: usize,
    tol: T,
    max_iter: usize,
    accept: A,
) -> crate::Result<FixedPointResult<T>>
where
    T: Scalar,
    G: FnMut(&DVector<T>) -> crate::Result<DVector<T>>,
    A: Fn(&DVector<T>) -> bool,
{
    let mut ws = AndersonWorkspace::new(memory);
    let mut x = x0;
    let mut best = T::max_value().unwrap_or_else(|| c(f64::MAX));
    let mut last = FixedPointResult {
        point: x.clone(),
        iterations: 0,
        residual: best,
        converged: false,
    };
    for it in 1..=max_iter {
        let gx = g(&x)?;
        let res = (&gx - &x).norm();
        last = FixedPointResult {
            point: gx.clone(),
            iterations: it,
            residual: res,
            converged: false,
        };
        if res <= tol * (T::one() + x.norm()) {
            last.converged = true;
            return Ok(last);
        }
        if res > best * c::<T>(10.0) {
            // acceleration is diverging; restart from the plain image
            ws.clear();
            x = gx;
            continue;
        }
        if res < best {
            best = res;
        }
        let next = if memory == 0 { gx.clone() } else { ws.step(x, gx.clone()) };
        x = if memory == 0 || accept(&next) {
            next
        } else {
            ws.clear();
            gx
        };
    }
    Ok(last)
}
