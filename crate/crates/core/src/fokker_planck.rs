//! Fourier-side weak form of the conditional law of a particle ensemble, and the scalar
//! differentiation identity for quarter-order double integrals.
//!
//! For `ψ(y) = exp(−i w·y)` the Itô expansion of `ψ(Y(z)) − ψ(Y(0))`, conditioned on the
//! common channel `B₁`, keeps five kernels (`wα = w·α`, `wQw = wᵀββᵀw`, `wβ₁ = w·β_{·,1}`;
//! primes mark the paired point `ζ'`):
//!
//! * `a₁ = −i wα − ½ wQw` against `dζ`,
//! * `a₂ = −i wβ₁` against `B₁(dζ)`,
//! * `a₃ = −wβ₁ · wβ₁'` against `B₁(dζ) B₁(dζ')`,
//! * `a₄ = wβ₁' (−wα + ½ i wQw)` against `dζ B₁(dζ')` plus the mirrored `B₁(dζ) dζ'` half,
//! * `a₅ = I(ζ ∧̄ ζ') [−wα' wα + ½ i (wα' wQw + wα wQw') + ¼ wQw' wQw]` against `dζ dζ'`,
//!
//! the pair terms running over `I(ζ ∧̄ ζ')` with `ψ` read at `Y(ζ ∨ ζ')`.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::CellNoise;
use crate::plane::{mixed_partial, quarter_indicator, quarter_separable_integral, CellSample};
use crate::solver::{solve_conditional_mkv_on, Coefficients, NoiseBank, ParticleEnsemble};
use crate::stats::{derive_seed, mean, std_error};
use crate::{Grid, Point};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Test frequencies for weak-form checks.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    freqs: Vec<Vec<f64>>,
}

impl FrequencyGrid {
    pub fn new(freqs: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = freqs.first() else {
            return Err(invalid("frequency grid must be nonempty"));
        };
        let n = first.len();
        if n == 0 || freqs.iter().any(|w| w.len() != n) {
            return Err(invalid("frequencies must share a positive dimension"));
        }
        Ok(Self { freqs })
    }

    /// `{0, ±w₁, ±w₂, …}` on the real line.
    pub fn symmetric_1d(magnitudes: &[f64]) -> Result<Self> {
        let mut freqs = vec![vec![0.0]];
        for &w in magnitudes {
            freqs.push(vec![w]);
            freqs.push(vec![-w]);
        }
        Self::new(freqs)
    }

    pub fn dim(&self) -> usize {
        self.freqs[0].len()
    }

    pub fn contains_origin(&self) -> bool {
        self.freqs.iter().any(|w| w.iter().all(|&v| v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.freqs.iter().map(|w| w.as_slice())
    }

    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }
}

/// Coefficients `α(ζ) ∈ ℝⁿ`, `β(ζ) ∈ ℝ^{n x m}` (row-major) at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeCoefficients {
    pub zeta: Point,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NodeCoefficients {
    fn channels(&self) -> usize {
        self.beta.len() / self.alpha.len()
    }

    fn w_alpha(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.alpha).map(|(a, b)| a * b).sum()
    }

    /// `w·β_{·,1}`.
    fn w_beta1(&self, w: &[f64]) -> f64 {
        let m = self.channels();
        w.iter().enumerate().map(|(k, wk)| wk * self.beta[k * m]).sum()
    }

    /// `wᵀ β βᵀ w = |βᵀ w|²`.
    fn w_q_w(&self, w: &[f64]) -> f64 {
        let m = self.channels();
        (0..m).map(|c| w.iter().enumerate().map(|(k, wk)| wk * self.beta[k * m + c]).sum::<f64>().powi(2)).sum()
    }
}

/// Coefficients at `ζ`, optionally with the paired point `ζ'`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelContext {
    pub at: NodeCoefficients,
    pub pair: Option<NodeCoefficients>,
}

/// Kernel `a_idx(w)`, `idx ∈ 1..=5`; `a₄` is the sum of its two halves and `a₅` carries
/// the quarter indicator.
pub fn kernel_a(idx: usize, w: &[f64], ctx: &KernelContext) -> Result<Complex64> {
    let c = &ctx.at;
    if w.len() != c.alpha.len() || c.alpha.is_empty() || !c.beta.len().is_multiple_of(c.alpha.len()) {
        return Err(Error::DimensionMismatch { expected: c.alpha.len(), got: w.len() });
    }
    let (wa, wb, wq) = (c.w_alpha(w), c.w_beta1(w), c.w_q_w(w));
    match idx {
        1 => return Ok(-I * wa - 0.5 * wq),
        2 => return Ok(-I * wb),
        3..=5 => {}
        _ => return Err(invalid(format!("kernel index {idx} not in 1..=5"))),
    }
    let p = ctx.pair.as_ref().ok_or(Error::MissingPairContext(idx))?;
    if p.alpha.len() != c.alpha.len() || p.beta.len() != c.beta.len() {
        return Err(Error::DimensionMismatch { expected: c.beta.len(), got: p.beta.len() });
    }
    let (pa, pb, pq) = (p.w_alpha(w), p.w_beta1(w), p.w_q_w(w));
    Ok(match idx {
        3 => Complex64::new(-wb * pb, 0.0),
        4 => pb * (-wa + 0.5 * I * wq) + wb * (-pa + 0.5 * I * pq),
        _ => {
            if !quarter_indicator(c.zeta, p.zeta) {
                return Ok(Complex64::default());
            }
            -pa * wa + 0.5 * I * (pa * wq + wa * pq) + 0.25 * pq * wq
        }
    })
}

/// `LHS − RHS` of the weak form at one frequency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakResidual {
    /// `μ̂_z(w) − μ̂_0(w)` for the empirical measures.
    pub lhs: Complex64,
    /// The five kernel terms.
    pub terms: [Complex64; 5],
    pub residual: Complex64,
}

/// Weak-form residual of the ensemble's empirical conditional law at `z`.
///
/// Coefficients are read along each trajectory with the ensemble's own empirical measure
/// at every node; integrands are particle averages of kernel `· ψ(Y_p(·))`.
pub fn weak_residual<C: Coefficients + ?Sized>(ensemble: &ParticleEnsemble, coeffs: &C, w: &[f64], z: Point) -> Result<WeakResidual> {
    let n = ensemble.dim();
    if w.len() != n || coeffs.state_dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.len() });
    }
    if coeffs.channels() != ensemble.bank().channels() {
        return Err(Error::DimensionMismatch { expected: ensemble.bank().channels(), got: coeffs.channels() });
    }
    let grid = *ensemble.grid();
    let (iz, jz) = grid.node_index(z)?;
    let m = coeffs.channels();
    let area = grid.cell_area();
    let cells = iz * jz;
    let common = ensemble.bank().common();
    let db1: Vec<f64> = (0..iz).flat_map(|i| (0..jz).map(move |j| (i, j))).map(|(i, j)| common.increment(0, i, j)).collect();

    // per cell and particle: (wα·A, wQw·A, wβ₁·ΔB₁)
    let measures: Vec<_> = if coeffs.depends_on_measure() {
        (0..iz).flat_map(|i| (0..jz).map(move |j| (i, j))).map(|(i, j)| Some(ensemble.measure(i, j))).collect()
    } else {
        vec![None; cells]
    };
    let particles = ensemble.len();
    let per_particle: Vec<[Complex64; 5]> = (0..particles)
        .into_par_iter()
        .map(|pidx| {
            let (mut a, mut b) = (vec![0.0; n], vec![0.0; n * m]);
            let mut ga = vec![0.0; cells];
            let mut gq = vec![0.0; cells];
            let mut u = vec![0.0; cells];
            for i in 0..iz {
                for j in 0..jz {
                    let k = i * jz + j;
                    let y = ensemble.state(pidx, i, j);
                    coeffs.drift(grid.node(i, j), y, measures[k].as_ref(), &mut a);
                    coeffs.diffusion(grid.node(i, j), y, measures[k].as_ref(), &mut b);
                    let nc = NodeCoefficients { zeta: grid.node(i, j), alpha: a.clone(), beta: b.clone() };
                    ga[k] = nc.w_alpha(w) * area;
                    gq[k] = nc.w_q_w(w) * area;
                    u[k] = nc.w_beta1(w) * db1[k];
                }
            }
            let psi = |i: usize, j: usize| {
                let phase: f64 = w.iter().zip(ensemble.state(pidx, i, j)).map(|(a, b)| a * b).sum();
                Complex64::from_polar(1.0, -phase)
            };
            prefix_terms(iz, jz, &ga, &gq, &u, psi)
        })
        .collect();

    let mut terms = [Complex64::default(); 5];
    for t in &per_particle {
        for k in 0..5 {
            terms[k] += t[k];
        }
    }
    let inv = 1.0 / particles as f64;
    for t in terms.iter_mut() {
        *t *= inv;
    }
    let cf = |i: usize, j: usize| -> Complex64 {
        (0..particles)
            .map(|pidx| {
                let phase: f64 = w.iter().zip(ensemble.state(pidx, i, j)).map(|(a, b)| a * b).sum();
                Complex64::from_polar(1.0, -phase)
            })
            .sum::<Complex64>()
            * inv
    };
    let lhs = cf(iz, jz) - cf(0, 0);
    let rhs: Complex64 = terms.iter().sum();
    Ok(WeakResidual { lhs, terms, residual: lhs - rhs })
}

/// Per-particle five-term sums from per-cell scalars, pair sums through column/row prefixes.
fn prefix_terms(iz: usize, jz: usize, ga: &[f64], gq: &[f64], u: &[f64], psi: impl Fn(usize, usize) -> Complex64) -> [Complex64; 5] {
    let mut t = [Complex64::default(); 5];
    let cells = iz * jz;
    let mut col = vec![[0.0f64; 3]; cells];
    let mut row = vec![[0.0f64; 3]; cells];
    for i in 0..iz {
        for j in 0..jz {
            let k = i * jz + j;
            let rec = [ga[k], gq[k], u[k]];
            let p = psi(i, j);
            t[0] += p * (-I * ga[k] - 0.5 * gq[k]);
            t[1] += p * (-I * u[k]);
            for r in 0..3 {
                col[k][r] = rec[r] + if i > 0 { col[k - jz][r] } else { 0.0 };
                row[k][r] = rec[r] + if j > 0 { row[k - 1][r] } else { 0.0 };
            }
        }
    }
    for i in 0..iz {
        for j in 0..jz {
            let k = i * jz + j;
            let [ca, cq, cu] = col[k];
            let [ra, rq, ru] = row[k];
            let p = psi(i, j);
            t[2] += p * -(cu * ru - u[k] * u[k]);
            t[3] += p * (ru * (-ca + 0.5 * I * cq) + cu * (-ra + 0.5 * I * rq));
            t[4] += p * (-ra * ca + 0.5 * I * (ra * cq + ca * rq) + 0.25 * rq * cq);
        }
    }
    t
}

/// One row of a replicate study.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualRow {
    pub w: Vec<f64>,
    pub mean_re: f64,
    pub mean_im: f64,
    /// Mean of `|residual|` over replicates.
    pub mean_abs: f64,
    pub stderr: f64,
    pub particles: usize,
    pub nt: usize,
    pub nx: usize,
}

/// Weak residuals averaged over common-noise replicates.
///
/// Replicate `r` uses common seed `derive_seed(seed, 2r)` and private seed base
/// `derive_seed(seed, 2r + 1)`; the common sheet is sampled on `fine` and restricted to
/// `grid`, so studies on nested grids and different `M` share their noise.
#[allow(clippy::too_many_arguments)]
pub fn residual_study<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    particles: usize,
    grid: Grid,
    fine: Grid,
    freqs: &FrequencyGrid,
    z: Point,
    replicates: usize,
    seed: u64,
) -> Result<Vec<ResidualRow>> {
    if replicates == 0 {
        return Err(invalid("residual study needs at least one replicate"));
    }
    if fine.horizon() != grid.horizon()
        || !fine.nt().is_multiple_of(grid.nt())
        || !fine.nx().is_multiple_of(grid.nx())
        || fine.nt() / grid.nt() != fine.nx() / grid.nx()
    {
        return Err(invalid("noise grid must refine the study grid uniformly"));
    }
    let factor = fine.nt() / grid.nt();
    let per_rep: Vec<Vec<Complex64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let bank = NoiseBank::sample_with_common(
                fine,
                coeffs.channels(),
                particles,
                derive_seed(seed, 2 * r as u64),
                derive_seed(seed, 2 * r as u64 + 1),
            )?;
            let bank = if factor == 1 { bank } else { coarsen_bank(&bank, factor)? };
            let ens = solve_conditional_mkv_on(coeffs, y0, &bank)?;
            freqs.iter().map(|w| Ok(weak_residual(&ens, coeffs, w, z)?.residual)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(freqs
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let abs: Vec<f64> = per_rep.iter().map(|r| r[k].norm()).collect();
            let re: Vec<f64> = per_rep.iter().map(|r| r[k].re).collect();
            let im: Vec<f64> = per_rep.iter().map(|r| r[k].im).collect();
            ResidualRow {
                w: w.to_vec(),
                mean_re: mean(&re),
                mean_im: mean(&im),
                mean_abs: mean(&abs),
                stderr: std_error(&abs),
                particles,
                nt: grid.nt(),
                nx: grid.nx(),
            }
        })
        .collect())
}

fn coarsen_bank(bank: &NoiseBank, factor: usize) -> Result<NoiseBank> {
    let common = bank.common().coarsen(factor)?;
    let particles = (0..).take_while(|&p| bank.particle_noise(p).private.is_some()).count();
    let private = (0..particles).map(|p| bank.particle_noise(p).private.expect("counted").coarsen(factor)).collect::<Result<Vec<_>>>()?;
    NoiseBank::from_parts(common, private, particles.max(1))
}

pub fn write_residual_csv<W: Write>(rows: &[ResidualRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["w", "re_residual", "im_residual", "mean_abs", "stderr", "M", "nt", "nx"])?;
    for r in rows {
        let wtxt = r.w.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";");
        w.write_record([
            wtxt,
            format!("{:e}", r.mean_re),
            format!("{:e}", r.mean_im),
            format!("{:e}", r.mean_abs),
            format!("{:e}", r.stderr),
            r.particles.to_string(),
            r.nt.to_string(),
            r.nx.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuarterIdentityReport {
    /// Mixed difference quotient of `G(z) = ∬ I(ζ ∧̄ ζ') f(ζ) g(ζ')`.
    pub lhs: f64,
    /// `∫₀ᵗ f((s, x)) ds · ∫₀ˣ g((t, a)) da`.
    pub rhs: f64,
    pub residual: f64,
}

/// Scalar check of `∂²/∂t∂x ∬_{R_z x R_z} I(ζ ∧̄ ζ') f(ζ) g(ζ') = ∫₀ᵗ∫₀ˣ f((s, x)) g((t, a)) ds da`.
///
/// `G` is evaluated with midpoint sampling and ½-weighted ties on `cells x cells` per
/// stencil corner; the right side uses a `16·cells`-point midpoint rule per axis.
pub fn quarter_identity_check(
    f: impl Fn(Point) -> f64,
    g: impl Fn(Point) -> f64,
    z: Point,
    cells: usize,
    h: f64,
) -> Result<QuarterIdentityReport> {
    if cells == 0 {
        return Err(invalid("quarter identity check needs at least one cell"));
    }
    if !(z.t > 0.0 && z.x > 0.0) {
        return Err(invalid("quarter identity check needs an interior point"));
    }
    let big_g = |q: Point| quarter_separable_integral(&f, &g, q, cells, CellSample::Midpoint).expect("positive corner");
    let lhs = mixed_partial(big_g, z, h)?;
    let k = 16 * cells;
    let (ds, da) = (z.t / k as f64, z.x / k as f64);
    let fi: f64 = (0..k).map(|r| f(Point { t: (r as f64 + 0.5) * ds, x: z.x })).sum::<f64>() * ds;
    let gi: f64 = (0..k).map(|r| g(Point { t: z.t, x: (r as f64 + 0.5) * da })).sum::<f64>() * da;
    let rhs = fi * gi;
    Ok(QuarterIdentityReport { lhs, rhs, residual: (lhs - rhs).abs() })
}
