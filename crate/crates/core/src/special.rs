//! Gamma-family special functions evaluated by recurrence plus asymptotic
//! series, generic over the scalar type.

use crate::scalar::{c, Scalar};

// Shift arguments above this point before using the asymptotic expansions.
const ASYMPTOTIC_FROM: f64 = 10.0;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    if x < c(0.5) {
        // reflection
        let pi = T::pi();
        return (pi / (pi * x).sin()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = c::<T>(LANCZOS_COEF[0]);
    for (i, &coef) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c::<T>(coef) / (x + T::from_count(i));
    }
    let t = x + c(LANCZOS_G + 0.5);
    c::<T>(0.5) * (T::two_pi()).ln() + (x + c(0.5)) * t.ln() - t + acc.ln()
}

/// Digamma function ψ(x) for `x > 0`.
pub fn digamma<T: Scalar>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    while x < c(ASYMPTOTIC_FROM) {
        acc -= x.recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv2
        * (c::<T>(1.0 / 12.0)
            - inv2
                * (c::<T>(1.0 / 120.0)
                    - inv2
                        * (c::<T>(1.0 / 252.0)
                            - inv2 * (c::<T>(1.0 / 240.0) - inv2 * c::<T>(1.0 / 132.0)))));
    acc + x.ln() - c::<T>(0.5) * inv - series
}

/// Trigamma function ψ₁(x) for `x > 0`.
pub fn trigamma<T: Scalar>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    while x < c(ASYMPTOTIC_FROM) {
        acc += (x * x).recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let tail = inv2
        * inv
        * (c::<T>(1.0 / 6.0)
            - inv2
                * (c::<T>(1.0 / 30.0)
                    - inv2
                        * (c::<T>(1.0 / 42.0)
                            - inv2 * (c::<T>(1.0 / 30.0) - inv2 * c::<T>(5.0 / 66.0)))));
    acc + inv + c::<T>(0.5) * inv2 + tail
}

/// Tetragamma function ψ₂(x) for `x > 0`.
pub fn tetragamma<T: Scalar>(x: T) -> T {
    let mut x = x;
    let mut acc = T::zero();
    while x < c(ASYMPTOTIC_FROM) {
        acc -= c::<T>(2.0) / (x * x * x);
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let tail = inv2
        * inv2
        * (c::<T>(0.5)
            - inv2
                * (c::<T>(1.0 / 6.0)
                    - inv2
                        * (c::<T>(1.0 / 6.0)
                            - inv2 * (c::<T>(3.0 / 10.0) - inv2 * c::<T>(5.0 / 6.0)))));
    acc - inv2 - inv2 * inv - tail
}

/// log Γ_d(a), the log multivariate gamma function.
pub fn ln_multigamma<T: Scalar>(a: T, dim: usize) -> T {
    let d = T::from_count(dim);
    let mut acc = d * (d - T::one()) * c::<T>(0.25) * T::pi().ln();
    for j in 0..dim {
        acc += ln_gamma(a - c::<T>(0.5) * T::from_count(j));
    }
    acc
}

/// Σ_{i=1}^{d} ψ((δ − i + 1)/2), the digamma sum in E log|Ω| under a Wishart.
pub fn wishart_digamma_sum<T: Scalar>(delta: T, dim: usize) -> T {
    (0..dim).fold(T::zero(), |acc, i| {
        acc + digamma((delta - T::from_count(i)) * c::<T>(0.5))
    })
}

/// Σ_{i=1}^{d} ψ₁((δ − i + 1)/2).
pub fn wishart_trigamma_sum<T: Scalar>(delta: T, dim: usize) -> T {
    (0..dim).fold(T::zero(), |acc, i| {
        acc + trigamma((delta - T::from_count(i)) * c::<T>(0.5))
    })
}

/// Σ_{i=1}^{d} ψ₂((δ − i + 1)/2).
pub fn wishart_tetragamma_sum<T: Scalar>(delta: T, dim: usize) -> T {
    (0..dim).fold(T::zero(), |acc, i| {
        acc + tetragamma((delta - T::from_count(i)) * c::<T>(0.5))
    })
}
