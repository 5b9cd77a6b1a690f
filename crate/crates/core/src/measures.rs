//! Weighted sample clouds on ℝⁿ, their Fourier transforms and the Gaussian-weighted
//! `M`-norm `‖μ‖²_M = ∫ |μ̂(y)|² e^{−|y|²} dy` (one realisation; callers average over
//! common-noise replicates).

use std::io::{Read, Write};
use std::sync::OnceLock;

use num_complex::Complex;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct EmpiricalMeasure<T> {
    dim: usize,
    samples: Vec<T>,
    weights: Vec<T>,
    mean: OnceLock<Vec<T>>,
}

impl<T: Scalar> PartialEq for EmpiricalMeasure<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.samples == other.samples && self.weights == other.weights
    }
}

impl<T: Scalar> EmpiricalMeasure<T> {
    /// `samples` is row-major `M x dim`; weights must be nonnegative and sum to 1.
    pub fn new(dim: usize, samples: Vec<T>, weights: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("measure dimension must be positive"));
        }
        if weights.is_empty() {
            return Err(invalid("measure needs at least one atom"));
        }
        if samples.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch { expected: weights.len() * dim, got: samples.len() });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid("non-finite sample"));
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(invalid("weights must be nonnegative"));
        }
        let total = weights.iter().fold(T::zero(), |a, &b| a + b);
        let tol = T::lit(1e-12).max(T::epsilon() * T::from_count(4 * weights.len()));
        if (total - T::one()).abs() > tol {
            return Err(invalid(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { dim, samples, weights, mean: OnceLock::new() })
    }

    /// Equal weights `1/M`.
    pub fn uniform(dim: usize, samples: Vec<T>) -> Result<Self> {
        if dim == 0 || samples.is_empty() || !samples.len().is_multiple_of(dim) {
            return Err(invalid("sample buffer is not a nonempty multiple of the dimension"));
        }
        let m = samples.len() / dim;
        let w = T::one() / T::from_count(m);
        Self::new(dim, samples, vec![w; m])
    }

    /// Equal-weight cloud of scalars.
    pub fn from_scalars(values: &[T]) -> Result<Self> {
        Self::uniform(1, values.to_vec())
    }

    pub fn dirac(point: &[T]) -> Result<Self> {
        Self::new(point.len(), point.to_vec(), vec![T::one()])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sample(&self, k: usize) -> &[T] {
        &self.samples[k * self.dim..(k + 1) * self.dim]
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// Weighted mean vector (computed once).
    pub fn mean(&self) -> &[T] {
        self.mean.get_or_init(|| {
            let mut m = vec![T::zero(); self.dim];
            for (k, &w) in self.weights.iter().enumerate() {
                for (acc, &s) in m.iter_mut().zip(self.sample(k)) {
                    *acc = *acc + w * s;
                }
            }
            m
        })
    }

    /// `∫ g dμ`.
    pub fn integrate(&self, mut g: impl FnMut(&[T]) -> T) -> T {
        self.weights.iter().enumerate().fold(T::zero(), |acc, (k, &w)| acc + w * g(self.sample(k)))
    }

    fn all_weights_equal(&self) -> bool {
        let w = T::one() / T::from_count(self.len());
        self.weights.iter().all(|&v| (v - w).abs() <= T::lit(1e-12))
    }

    /// Writes one row per atom: coordinates, then the weight.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("y{i}")).collect();
        header.push("weight".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row: Vec<String> = self.sample(k).iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.weights[k]));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`EmpiricalMeasure::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let cols = r.headers()?.len();
        if cols < 2 {
            return Err(invalid("measure CSV needs at least one coordinate and a weight column"));
        }
        let (mut samples, mut weights) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| invalid(format!("bad number {field:?}")))?;
                let v = T::from_f64(v).ok_or_else(|| invalid("value not representable"))?;
                if c + 1 == cols {
                    weights.push(v);
                } else {
                    samples.push(v);
                }
            }
        }
        Self::new(cols - 1, samples, weights)
    }
}

/// `μ̂(w) = Σ_k weight_k · exp(−i⟨w, sample_k⟩)`.
pub fn fourier<T: Scalar>(mu: &EmpiricalMeasure<T>, w: &[T]) -> Result<Complex<T>> {
    if w.len() != mu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: w.len() });
    }
    let mut acc = Complex::new(T::zero(), T::zero());
    for k in 0..mu.len() {
        let phase = mu.sample(k).iter().zip(w).fold(T::zero(), |a, (&s, &wi)| a + s * wi);
        let (sin, cos) = phase.sin_cos();
        acc = acc + Complex::new(cos, -sin) * mu.weights[k];
    }
    Ok(acc)
}

/// Tensor Gauss–Hermite rule for `∫_{ℝⁿ} g(y) e^{−|y|²} dy`.
#[derive(Clone, Debug)]
pub struct MQuadrature<T> {
    dim: usize,
    order: usize,
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> MQuadrature<T> {
    pub const DEFAULT_ORDER: usize = 40;

    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(invalid("quadrature dimension and order must be positive"));
        }
        let total = order.checked_pow(dim as u32).filter(|&n| n <= 10_000_000).ok_or_else(|| invalid("tensor quadrature too large"))?;
        let (x1, w1) = gauss_hermite(order);
        let mut nodes = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut w = 1.0;
            for &i in &idx {
                nodes.push(T::lit(x1[i]));
                w *= w1[i];
            }
            weights.push(T::lit(w));
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < order {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self { dim, order, nodes, weights })
    }

    pub fn with_default_order(dim: usize) -> Result<Self> {
        Self::new(dim, Self::DEFAULT_ORDER)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn integrate(&self, mut g: impl FnMut(&[T]) -> T) -> T {
        let mut acc = T::zero();
        for (q, &w) in self.weights.iter().enumerate() {
            acc = acc + w * g(&self.nodes[q * self.dim..(q + 1) * self.dim]);
        }
        acc
    }

    fn check(&self, dim: usize) -> Result<()> {
        if dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: dim });
        }
        Ok(())
    }
}

/// Nodes and weights of the `n`-point Gauss–Hermite rule (weight `e^{−y²}`), by Newton
/// iteration on the orthonormal Hermite recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut z: f64 = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// `∫ |μ̂(y)|² e^{−|y|²} dy`.
pub fn m_norm_sq<T: Scalar>(mu: &EmpiricalMeasure<T>, quad: &MQuadrature<T>) -> Result<T> {
    quad.check(mu.dim())?;
    Ok(quad.integrate(|y| fourier(mu, y).map(|c| c.norm_sqr()).unwrap_or_else(|_| T::nan())))
}

/// `‖μ₁ − μ₂‖²_M` for the signed difference.
pub fn m_dist_sq<T: Scalar>(mu1: &EmpiricalMeasure<T>, mu2: &EmpiricalMeasure<T>, quad: &MQuadrature<T>) -> Result<T> {
    same_dim(mu1, mu2)?;
    quad.check(mu1.dim())?;
    Ok(quad.integrate(|y| match (fourier(mu1, y), fourier(mu2, y)) {
        (Ok(a), Ok(b)) => (a - b).norm_sqr(),
        _ => T::nan(),
    }))
}

/// `∫ Re(conj(μ̂) η̂) e^{−|y|²} dy`.
pub fn m_inner<T: Scalar>(mu: &EmpiricalMeasure<T>, eta: &EmpiricalMeasure<T>, quad: &MQuadrature<T>) -> Result<T> {
    same_dim(mu, eta)?;
    quad.check(mu.dim())?;
    Ok(quad.integrate(|y| match (fourier(mu, y), fourier(eta, y)) {
        (Ok(a), Ok(b)) => (a.conj() * b).re,
        _ => T::nan(),
    }))
}

fn same_dim<T: Scalar>(a: &EmpiricalMeasure<T>, b: &EmpiricalMeasure<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between equal-size, equal-weight clouds on ℝ.
pub fn wasserstein2_sq_1d<T: Scalar>(mu1: &EmpiricalMeasure<T>, mu2: &EmpiricalMeasure<T>) -> Result<T> {
    if mu1.dim() != 1 || mu2.dim() != 1 {
        return Err(invalid("wasserstein2_sq_1d needs one-dimensional measures"));
    }
    if mu1.len() != mu2.len() {
        return Err(Error::DimensionMismatch { expected: mu1.len(), got: mu2.len() });
    }
    if !mu1.all_weights_equal() || !mu2.all_weights_equal() {
        return Err(invalid("wasserstein2_sq_1d needs equal weights; resample first"));
    }
    let sorted = |m: &EmpiricalMeasure<T>| {
        let mut v = m.samples().to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
        v
    };
    let (a, b) = (sorted(mu1), sorted(mu2));
    let s = a.iter().zip(&b).fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q));
    Ok(s / T::from_count(a.len()))
}

/// Two measures whose atoms are coupled index by index (same count, same weights).
#[derive(Clone, Debug)]
pub struct CoupledPair<T> {
    pub first: EmpiricalMeasure<T>,
    pub second: EmpiricalMeasure<T>,
}

impl<T: Scalar> CoupledPair<T> {
    pub fn new(first: EmpiricalMeasure<T>, second: EmpiricalMeasure<T>) -> Result<Self> {
        same_dim(&first, &second)?;
        if first.len() != second.len() {
            return Err(Error::DimensionMismatch { expected: first.len(), got: second.len() });
        }
        if first.weights().iter().zip(second.weights()).any(|(a, b)| (*a - *b).abs() > T::lit(1e-12)) {
            return Err(invalid("coupled measures need identical weights"));
        }
        Ok(Self { first, second })
    }

    /// `E|Y₁ − Y₂|²` under the index coupling.
    pub fn mean_sq_gap(&self) -> T {
        (0..self.first.len()).fold(T::zero(), |acc, k| {
            let d = self.first.sample(k).iter().zip(self.second.sample(k)).fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
            acc + self.first.weights()[k] * d
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstReport<T> {
    /// Replicate average of `‖μ₁ − μ₂‖²_M`.
    pub lhs: T,
    /// `π` times the replicate average of `E|Y₁ − Y₂|²`.
    pub rhs: T,
    pub holds: bool,
}

/// Compares `‖μ₁ − μ₂‖²_M` with `π E|Y₁ − Y₂|²`, allowing a relative slack.
pub fn est_inequality_check<T: Scalar>(pairs: &[CoupledPair<T>], quad: &MQuadrature<T>, slack: T) -> Result<EstReport<T>> {
    if pairs.is_empty() {
        return Err(invalid("est_inequality_check needs at least one coupled pair"));
    }
    let count = T::from_count(pairs.len());
    let mut lhs = T::zero();
    let mut gap = T::zero();
    for p in pairs {
        lhs = lhs + m_dist_sq(&p.first, &p.second, quad)?;
        gap = gap + p.mean_sq_gap();
    }
    let (lhs, rhs) = (lhs / count, T::PI() * gap / count);
    Ok(EstReport { lhs, rhs, holds: lhs <= rhs * (T::one() + slack) })
}
