//! The entire function `f(y) = Σ yⁿ/(n!)²`, its first zero `r₀` on the negative axis
//! and the majorant sequence `xₙ` of the Picard scheme.
//!
//! `f(y) = I₀(2√y)` for `y ≥ 0` and `f(−t) = J₀(2√t)`.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Largest `|y|` accepted by the series evaluators.
pub const MAX_ARGUMENT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesConfig<T> {
    pub truncation_terms: usize,
    pub tail_tol: T,
}

impl<T: Scalar> SeriesConfig<T> {
    pub fn new(truncation_terms: usize, tail_tol: T) -> Result<Self> {
        if truncation_terms < 10 {
            return Err(invalid("series truncation needs at least 10 terms"));
        }
        if !(tail_tol >= T::zero()) {
            return Err(invalid("tail tolerance must be nonnegative"));
        }
        Ok(Self { truncation_terms, tail_tol })
    }
}

impl<T: Scalar> Default for SeriesConfig<T> {
    fn default() -> Self {
        Self { truncation_terms: 60, tail_tol: T::lit(1e-14) }
    }
}

/// `f(y)` with the default configuration.
pub fn f_series<T: Scalar>(y: T) -> Result<T> {
    f_derivative_with(&SeriesConfig::default(), 0, y)
}

pub fn f_series_with<T: Scalar>(cfg: &SeriesConfig<T>, y: T) -> Result<T> {
    f_derivative_with(cfg, 0, y)
}

/// `f⁽ᵏ⁾(y) = Σ_m y^m / ((m+k)! m!)`.
pub fn f_derivative<T: Scalar>(k: usize, y: T) -> Result<T> {
    f_derivative_with(&SeriesConfig::default(), k, y)
}

pub fn f_derivative_with<T: Scalar>(cfg: &SeriesConfig<T>, k: usize, y: T) -> Result<T> {
    if !y.is_finite() || y.abs() > T::lit(MAX_ARGUMENT) {
        return Err(invalid(format!("series argument {y} outside [-{MAX_ARGUMENT}, {MAX_ARGUMENT}]")));
    }
    let mut term = T::one();
    for i in 1..=k {
        term = term / T::from_count(i);
    }
    let mut sum = term;
    for m in 1..cfg.truncation_terms {
        term = term * y / (T::from_count(m) * T::from_count(m + k));
        sum = sum + term;
        if term.abs() < cfg.tail_tol * sum.abs() {
            break;
        }
    }
    Ok(sum)
}

/// First positive zero of `t ↦ f(−t)` by bisection on `[1, 2]`.
pub fn find_r0<T: Scalar>(tol: T) -> Result<T> {
    if !(tol > T::zero()) {
        return Err(invalid("find_r0 tolerance must be positive"));
    }
    let g = |t: T| f_series(-t);
    let (mut lo, mut hi) = (T::one(), T::lit(2.0));
    let (glo, ghi) = (g(lo)?, g(hi)?);
    if !(glo > T::zero() && ghi < T::zero()) {
        return Err(Error::BracketFailure { lo: 1.0, hi: 2.0 });
    }
    let two = T::lit(2.0);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = (lo + hi) / two;
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid)? > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / two)
}

/// `x₀ = 1`, `xₙ = −Σ_{j=1}^{n} (−1)^j/(j!)² x_{n−j}`; returns `x₀ ..= x_{n_max}`.
pub fn x_seq<T: Scalar>(n_max: usize) -> Vec<T> {
    let coef = alternating_coefficients::<T>(n_max);
    let mut xs = Vec::with_capacity(n_max + 1);
    xs.push(T::one());
    for n in 1..=n_max {
        let mut acc = T::zero();
        for j in 1..=n {
            acc = acc + coef[j] * xs[n - j];
        }
        xs.push(-acc);
    }
    xs
}

/// `(−1)^j / (j!)²` for `j = 0..=n`.
pub fn alternating_coefficients<T: Scalar>(n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n + 1);
    let mut c = T::one();
    out.push(c);
    for j in 1..=n {
        let jj = T::from_count(j);
        c = -c / (jj * jj);
        out.push(c);
    }
    out
}

/// Partial sums `S_n = Σ_{k≤n} (K·area)^{2k} x_k`, `n = 0..=n_max`.
pub fn picard_series_partial_sums<T: Scalar>(k: T, area: T, n_max: usize) -> Result<Vec<T>> {
    if !(k >= T::zero()) || !(area >= T::zero()) {
        return Err(invalid("Lipschitz constant and area must be nonnegative"));
    }
    let r = (k * area) * (k * area);
    let xs = x_seq::<T>(n_max);
    let mut pow = T::one();
    let mut sum = T::zero();
    let mut out = Vec::with_capacity(n_max + 1);
    for (n, x) in xs.into_iter().enumerate() {
        if n > 0 {
            pow = pow * r;
        }
        sum = sum + pow * x;
        out.push(sum);
    }
    Ok(out)
}

/// Behaviour of a partial-sum sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartialSumDiagnostic<T> {
    /// Some partial sum exceeded the blow-up threshold (or overflowed).
    pub diverged: bool,
    /// Index of the first partial sum past the threshold.
    pub first_exceed: Option<usize>,
    /// `|S_n − S_{n−1}|` at the last index.
    pub last_difference: T,
    /// Ratio of the last two consecutive differences.
    pub tail_ratio: T,
}

pub fn diagnose_partial_sums<T: Scalar>(sums: &[T], blow_up: T) -> PartialSumDiagnostic<T> {
    let first_exceed = sums.iter().position(|s| !s.is_finite() || s.abs() > blow_up);
    let n = sums.len();
    let diff = |i: usize| (sums[i] - sums[i - 1]).abs();
    let last_difference = if n >= 2 { diff(n - 1) } else { T::zero() };
    let tail_ratio = if n >= 3 && diff(n - 2) > T::zero() { diff(n - 1) / diff(n - 2) } else { T::zero() };
    PartialSumDiagnostic { diverged: first_exceed.is_some(), first_exceed, last_difference, tail_ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const F_ONE: f64 = 2.279585302336067;
    const R0: f64 = 1.445_796_490_736_696;

    fn factorial_sum(y: f64, terms: usize) -> f64 {
        let mut fact = 1.0f64;
        let mut s = 0.0;
        for n in 0..terms {
            if n > 0 {
                fact *= n as f64;
            }
            s += y.powi(n as i32) / (fact * fact);
        }
        s
    }

    #[test]
    fn f_values() {
        assert_eq!(f_series(0.0).unwrap(), 1.0);
        assert_relative_eq!(f_series(1.0).unwrap(), F_ONE, epsilon = 1e-10);
        assert!(f_series(-R0).unwrap().abs() < 1e-6);
        assert!(f_series(701.0).is_err());
        assert!(f_series(f64::NAN).is_err());
        assert!(SeriesConfig::new(9, 1e-14).is_err());
    }

    #[test]
    fn f_matches_factorial_summation() {
        for k in 0..=40 {
            let y = -10.0 + 0.5 * k as f64;
            let a = f_series(y).unwrap();
            let b = factorial_sum(y, 60);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "y={y}: {a} vs {b}");
        }
    }

    #[test]
    fn derivative_relations() {
        // y f'' + f' = f, and f' via central differences
        for y in [-3.0, -0.7, 0.0, 0.4, 2.5, 8.0] {
            let (f0, f1, f2) = (f_series(y).unwrap(), f_derivative(1, y).unwrap(), f_derivative(2, y).unwrap());
            assert_relative_eq!(y * f2 + f1, f0, epsilon = 1e-12, max_relative = 1e-12);
            let h = 1e-5;
            let fd = (f_series(y + h).unwrap() - f_series(y - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(fd, f1, epsilon = 1e-8, max_relative = 1e-8);
        }
        assert_eq!(f_derivative(3, 0.0).unwrap(), 1.0 / 6.0);
    }

    #[test]
    fn f32_evaluation() {
        assert!((f_series(1.0f32).unwrap() - F_ONE as f32).abs() < 1e-6);
        assert!((find_r0(1e-5f32).unwrap() - R0 as f32).abs() < 1e-4);
    }

    #[test]
    fn r0_recovery() {
        let r: f64 = find_r0(1e-6).unwrap();
        assert!((r - 1.4458).abs() < 5e-4);
        assert!((1.4453..=1.4463).contains(&r));
        let tight: f64 = find_r0(1e-10).unwrap();
        assert!(f_series(-tight).unwrap().abs() < 1e-8);
        assert!((tight - R0).abs() < 1e-10);
        assert!(find_r0(0.0f64).is_err());
    }

    #[test]
    fn r0_tolerance_nesting() {
        let tols = [1e-2f64, 1e-4, 1e-6, 1e-8, 1e-12];
        let roots: Vec<f64> = tols.iter().map(|&t| find_r0(t).unwrap()).collect();
        for w in 0..tols.len() - 1 {
            assert!((roots[w] - roots[w + 1]).abs() <= tols[w]);
        }
    }

    #[test]
    fn x_sequence_values() {
        let xs = x_seq::<f64>(60);
        assert_eq!(xs.len(), 61);
        assert_eq!(xs[0], 1.0);
        assert_eq!(xs[1], 1.0);
        assert_eq!(xs[2], 0.75);
        assert_relative_eq!(xs[3], 0.527_777_777_777_777_8, epsilon = 1e-15);
        assert!(xs.iter().all(|&x| x > 0.0));
        assert!(x_seq::<f64>(0) == vec![1.0]);
    }

    #[test]
    fn cauchy_product_is_delta() {
        let n = 60;
        let xs = x_seq::<f64>(n);
        let c = alternating_coefficients::<f64>(n);
        for k in 0..=n {
            let conv: f64 = (0..=k).map(|j| c[j] * xs[k - j]).sum();
            let expect = if k == 0 { 1.0 } else { 0.0 };
            assert!((conv - expect).abs() < 1e-12, "k={k}: {conv}");
        }
    }

    #[test]
    fn picard_partial_sums() {
        let zero = picard_series_partial_sums(0.0, 1.0, 20).unwrap();
        assert!(zero.iter().all(|&s| s == 1.0));
        assert!(picard_series_partial_sums(-1.0, 1.0, 5).is_err());

        let below = picard_series_partial_sums(0.9 * R0.sqrt(), 1.0, 60).unwrap();
        let d = diagnose_partial_sums(&below, 1e6);
        assert!(!d.diverged);
        assert!(d.last_difference < 1e-5, "{d:?}");
        assert!(d.tail_ratio < 1.0);
        assert_relative_eq!(below[60], 7.676113869, epsilon = 1e-6);

        let above = picard_series_partial_sums(1.2 * R0.sqrt(), 1.0, 60).unwrap();
        let d = diagnose_partial_sums(&above, 1e6);
        assert!(d.diverged);
        assert_eq!(d.first_exceed, Some(34));

        let far = picard_series_partial_sums(0.5 * R0.sqrt(), 1.0, 60).unwrap();
        assert!(diagnose_partial_sums(&far, 1e6).last_difference < 1e-30);
    }

    proptest! {
        #[test]
        fn f_positive_and_increasing(a in 0.0..50.0f64, b in 0.0..50.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (flo, fhi) = (f_series(lo).unwrap(), f_series(hi).unwrap());
            prop_assert!(flo > 0.0);
            prop_assert!(fhi >= flo);
        }

        #[test]
        fn f_positive_before_r0(t in 0.0..1.44f64) {
            prop_assert!(f_series(-t).unwrap() > 0.0);
        }
    }
}
