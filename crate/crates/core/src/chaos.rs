//! Linear `N`-particle Ornstein-Uhlenbeck systems in the plane,
//!
//! `Y^i(t,x) = y + ∫∫ ((1/N) Σ_j a_j Y^j − Y^i) dζ + B_i(t,x)`,
//!
//! their closed form through `f` and the rank-one structure of `A` (every row equal to
//! `(a_1, …, a_N)`), the remainder that separates them from the mean-field limit, and the
//! limit `Y = f(tx(a−1)) y + ∫∫ f(−(t−u)(x−v)) dB*(u,v)`.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::{CellNoise, SheetPath};
use crate::plane::rect_integral;
use crate::series::{f_derivative, f_series};
use crate::solver::{solve_goursat, Coefficients, StateField};
use crate::stats::{derive_seed, mean, stream_rng, Estimate};
use crate::{EmpiricalMeasure, Grid, Point};

/// Law of the coefficients `a_j`, drawn once per replicate and independent of the sheets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ADistribution {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
}

impl ADistribution {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match *self {
            Self::Constant(c) => Ok(vec![c; n]),
            Self::Uniform { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(invalid("uniform a-distribution needs finite lo < hi"));
                }
                let mut rng = stream_rng(seed, u64::MAX);
                Ok((0..n).map(|_| rng.random_range(lo..hi)).collect())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChaosConfig {
    a_values: Vec<f64>,
    y0: f64,
    grid: Grid,
    seed: u64,
}

impl ChaosConfig {
    /// Requires `(1/N) Σ a_j ≥ q > 0`.
    pub fn new(a_values: Vec<f64>, y0: f64, grid: Grid, seed: u64, q: f64) -> Result<Self> {
        if a_values.is_empty() {
            return Err(invalid("particle system needs at least one particle"));
        }
        if !(q > 0.0) {
            return Err(invalid("lower bound q must be positive"));
        }
        if a_values.iter().any(|a| !a.is_finite()) {
            return Err(invalid("coefficients a_j must be finite"));
        }
        let avg = a_values.iter().sum::<f64>() / a_values.len() as f64;
        if avg < q {
            return Err(invalid(format!("(1/N)·‖A‖ = {avg} is below q = {q}")));
        }
        Ok(Self { a_values, y0, grid, seed })
    }

    pub fn particles(&self) -> usize {
        self.a_values.len()
    }

    pub fn a_values(&self) -> &[f64] {
        &self.a_values
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `‖A‖ = Σ_j a_j`.
    pub fn norm_a(&self) -> f64 {
        self.a_values.iter().sum()
    }

    /// `‖A‖/N − 1`.
    fn growth(&self) -> f64 {
        self.norm_a() / self.particles() as f64 - 1.0
    }

    /// The `N`-channel sheet for this configuration.
    pub fn sheet(&self) -> Result<SheetPath> {
        SheetPath::sample(self.grid, self.particles(), self.seed)
    }
}

/// Coefficients `α(Y) = (A/N − I) Y`, `β = I`.
struct LinearSystem<'a> {
    a: &'a [f64],
}

impl Coefficients for LinearSystem<'_> {
    fn state_dim(&self) -> usize {
        self.a.len()
    }
    fn channels(&self) -> usize {
        self.a.len()
    }
    fn drift(&self, _: Point, y: &[f64], _: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        let n = self.a.len() as f64;
        let avg: f64 = self.a.iter().zip(y).map(|(a, v)| a * v).sum::<f64>() / n;
        for (o, v) in out.iter_mut().zip(y) {
            *o = avg - v;
        }
    }
    fn diffusion(&self, _: Point, _: &[f64], _: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        let n = self.a.len();
        out.fill(0.0);
        for k in 0..n {
            out[k * n + k] = 1.0;
        }
    }
}

/// Goursat solution of the `N`-particle system on an `N`-channel sheet.
pub fn simulate_particle_system(cfg: &ChaosConfig, sheet: &SheetPath) -> Result<StateField> {
    if sheet.channels() != cfg.particles() {
        return Err(Error::DimensionMismatch { expected: cfg.particles(), got: sheet.channels() });
    }
    solve_goursat(&LinearSystem { a: &cfg.a_values }, &vec![cfg.y0; cfg.particles()], sheet, None)
}

/// `(A/N − I)ⁿ = (−1)ⁿ (I − A/‖A‖) + (‖A‖/N − 1)ⁿ A/‖A‖`, assembled from the right side.
pub fn matrix_power_decomposition(a_values: &[f64], n: u32) -> Result<DMatrix<f64>> {
    let big_n = a_values.len();
    let norm: f64 = a_values.iter().sum();
    if big_n == 0 || norm == 0.0 || !norm.is_finite() {
        return Err(invalid("rank-one decomposition needs ‖A‖ ≠ 0"));
    }
    let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    let growth = (norm / big_n as f64 - 1.0).powi(n as i32);
    Ok(DMatrix::from_fn(big_n, big_n, |i, j| {
        let p = a_values[j] / norm;
        let id = if i == j { 1.0 } else { 0.0 };
        sign * (id - p) + growth * p
    }))
}

/// Table of `f` over lattice offsets `(di, dj)`: `f(s · di Δt · dj Δx)`.
fn f_table(grid: &Grid, iz: usize, jz: usize, s: f64) -> Result<Vec<f64>> {
    let mut t = Vec::with_capacity((iz + 1) * (jz + 1));
    for di in 0..=iz {
        for dj in 0..=jz {
            t.push(f_series(s * di as f64 * grid.dt() * dj as f64 * grid.dx())?);
        }
    }
    Ok(t)
}

/// Closed-form solution on the grid:
/// `Y(t,x) = f(−tx)(I − A/‖A‖) y + f(tx(‖A‖/N − 1)) A y/‖A‖ + ∫∫ {f(−τ)(I − A/‖A‖) + f(τ(‖A‖/N − 1)) A/‖A‖} B(du,dv)`
/// with `τ = (t−u)(x−v)` read at cell lower corners.
pub fn closed_form_solution(cfg: &ChaosConfig, sheet: &SheetPath) -> Result<StateField> {
    let n = cfg.particles();
    if sheet.channels() != n {
        return Err(Error::DimensionMismatch { expected: n, got: sheet.channels() });
    }
    let norm = cfg.norm_a();
    if norm.abs() < f64::EPSILON {
        return Err(invalid("closed form needs ‖A‖ ≠ 0"));
    }
    let grid = *sheet.grid();
    let (nt, nx) = (grid.nt(), grid.nx());
    let growth = cfg.growth();
    let decay = f_table(&grid, nt, nx, -1.0)?;
    let grow = f_table(&grid, nt, nx, growth)?;
    let at = |tab: &[f64], di: usize, dj: usize| tab[di * (nx + 1) + dj];
    let p: Vec<f64> = cfg.a_values.iter().map(|a| a / norm).collect();
    // per cell: ΔB_i and S = Σ_j (a_j/‖A‖) ΔB_j
    let mut db = vec![0.0; nt * nx * n];
    let mut s = vec![0.0; nt * nx];
    for i in 0..nt {
        for j in 0..nx {
            let k = i * nx + j;
            for c in 0..n {
                db[k * n + c] = sheet.increment(c, i, j);
            }
            s[k] = (0..n).map(|c| p[c] * db[k * n + c]).sum();
        }
    }
    let y = vec![cfg.y0; n];
    let py: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
    let rows: Vec<Vec<f64>> = (0..=nt)
        .into_par_iter()
        .map(|bi| {
            let mut out = Vec::with_capacity((nx + 1) * n);
            for bj in 0..=nx {
                let det_decay = at(&decay, bi, bj);
                let det_grow = at(&grow, bi, bj);
                let mut comp: Vec<f64> = y.iter().map(|&yi| det_decay * (yi - py) + det_grow * py).collect();
                for i in 0..bi {
                    for j in 0..bj {
                        let k = i * nx + j;
                        let (fd, fg) = (at(&decay, bi - i, bj - j), at(&grow, bi - i, bj - j));
                        for (c, v) in comp.iter_mut().enumerate() {
                            *v += fd * (db[k * n + c] - s[k]) + fg * s[k];
                        }
                    }
                }
                out.extend(comp);
            }
            out
        })
        .collect();
    StateField::from_values(grid, n, rows.concat())
}

/// `I_{i,N}(z) = Σ_j (‖A‖/N − 2)(a_j/‖A‖) ∫∫ f(−(t−u)(x−v)) dB_j(u,v)` on one sheet
/// (the same for every particle index `i`).
pub fn remainder(cfg: &ChaosConfig, sheet: &SheetPath, z: Point) -> Result<f64> {
    let n = cfg.particles();
    if sheet.channels() < n {
        return Err(Error::DimensionMismatch { expected: n, got: sheet.channels() });
    }
    let norm = cfg.norm_a();
    let grid = *sheet.grid();
    let (iz, jz) = grid.node_index(z)?;
    let decay = f_table(&grid, iz, jz, -1.0)?;
    let factor = norm / n as f64 - 2.0;
    let mut acc = 0.0;
    for i in 0..iz {
        for j in 0..jz {
            let f = decay[(iz - i) * (jz + 1) + (jz - j)];
            let s: f64 = (0..n).map(|c| cfg.a_values[c] / norm * sheet.increment(c, i, j)).sum();
            acc += f * s;
        }
    }
    Ok(factor * acc)
}

/// Monte Carlo estimate of `E|I_{i,N}(z)|²` over `replicates` sheets; replicate `r` uses
/// seed `derive_seed(seed, r)` and, for random `a_j`, draws them from `dist` with that seed.
pub fn remainder_variance(
    particles: usize,
    dist: ADistribution,
    q: f64,
    grid: Grid,
    z: Point,
    replicates: usize,
    seed: u64,
) -> Result<Estimate> {
    if replicates < 2 {
        return Err(invalid("remainder_variance needs at least two replicates"));
    }
    let samples: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let s = derive_seed(seed, r as u64);
            let cfg = ChaosConfig::new(dist.sample(particles, s)?, 0.0, grid, s, q)?;
            Ok(remainder(&cfg, &cfg.sheet()?, z)?.powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// `E|I|²` for constant `a_j ≡ a`: `(a − 2)² / N · Σ_cells f(−τ)² ΔtΔx`, lower-corner.
pub fn remainder_variance_exact(particles: usize, a: f64, grid: &Grid, z: Point) -> Result<f64> {
    let (iz, jz) = grid.node_index(z)?;
    let s = rect_integral(grid, z, |i, j| {
        let tau = (iz - i) as f64 * grid.dt() * (jz - j) as f64 * grid.dx();
        f_series(-tau).map(|v| v * v).unwrap_or(f64::NAN)
    })?;
    Ok((a - 2.0).powi(2) / particles as f64 * s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateRow {
    pub particles: usize,
    pub estimate: f64,
    pub stderr: f64,
}

pub fn write_rate_csv<W: Write>(rows: &[RateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["N", "estimate", "stderr"])?;
    for r in rows {
        w.write_record([r.particles.to_string(), format!("{:e}", r.estimate), format!("{:e}", r.stderr)])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean-field limit `f(tx(a−1)) y + Σ_cells f(−(t−u)(x−v)) ΔB*` on a one-channel sheet.
pub fn limit_solution(a: f64, y0: f64, sheet_star: &SheetPath) -> Result<StateField> {
    if sheet_star.channels() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: sheet_star.channels() });
    }
    let grid = *sheet_star.grid();
    let (nt, nx) = (grid.nt(), grid.nx());
    let decay = f_table(&grid, nt, nx, -1.0)?;
    let det = f_table(&grid, nt, nx, a - 1.0)?;
    let mut values = Vec::with_capacity(grid.node_count());
    for bi in 0..=nt {
        for bj in 0..=nx {
            let mut v = det[bi * (nx + 1) + bj] * y0;
            for i in 0..bi {
                for j in 0..bj {
                    v += decay[(bi - i) * (nx + 1) + (bj - j)] * sheet_star.increment(0, i, j);
                }
            }
            values.push(v);
        }
    }
    StateField::from_values(grid, 1, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitSpdeReport {
    /// Sup over nodes of the RMS (over replicates) residual of
    /// `Y = y + Σ (a Ē[Y] − Y) ΔtΔx + B*` with `Ē` the replicate average.
    pub sup_residual: f64,
    /// Sup over nodes of `|∂²u/∂t∂x − (a−1)u|` for `u = f(tx(a−1)) y`, from series derivatives.
    pub deterministic_residual: f64,
}

pub fn verify_limit_spde(a: f64, y0: f64, grid: Grid, replicates: usize, seed: u64) -> Result<LimitSpdeReport> {
    if replicates < 2 {
        return Err(invalid("verify_limit_spde needs at least two replicates"));
    }
    let paths: Vec<(SheetPath, StateField)> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let s = SheetPath::sample(grid, 1, derive_seed(seed, r as u64))?;
            let y = limit_solution(a, y0, &s)?;
            Ok((s, y))
        })
        .collect::<Result<_>>()?;
    let nodes = grid.node_count();
    let mean_field: Vec<f64> = (0..nodes).map(|k| mean(&paths.iter().map(|(_, y)| y.values()[k]).collect::<Vec<_>>())).collect();
    let area = grid.cell_area();
    let (nt, nx) = (grid.nt(), grid.nx());
    let mut sq = vec![0.0; nodes];
    for (sheet, y) in &paths {
        // running discrete integral of (a Ē − Y), accumulated like the Goursat recursion
        let mut integ = vec![0.0; nodes];
        for i in 0..nt {
            for j in 0..nx {
                let k = grid.flat((i, j));
                let v = integ[grid.flat((i + 1, j))] + integ[grid.flat((i, j + 1))] - integ[k] + (a * mean_field[k] - y.values()[k]) * area;
                integ[grid.flat((i + 1, j + 1))] = v;
            }
        }
        for i in 0..=nt {
            for j in 0..=nx {
                let k = grid.flat((i, j));
                let r = y.values()[k] - y0 - integ[k] - sheet.value(0, i, j);
                sq[k] += r * r;
            }
        }
    }
    let sup_residual = sq.iter().map(|s| (s / replicates as f64).sqrt()).fold(0.0, f64::max);
    let c = a - 1.0;
    let mut det = 0.0f64;
    for i in 0..=nt {
        for j in 0..=nx {
            let tx = grid.node(i, j).area();
            let s = c * tx;
            let mixed = c * f_derivative(1, s)? + c * c * tx * f_derivative(2, s)?;
            det = det.max(((mixed - c * f_series(s)?) * y0).abs());
        }
    }
    Ok(LimitSpdeReport { sup_residual, deterministic_residual: det })
}

/// Sup over nodes of the RMS-over-particles gap between two `N`-dimensional fields.
pub fn sup_rms_gap(a: &StateField, b: &StateField) -> Result<f64> {
    if a.grid() != b.grid() || a.dim() != b.dim() {
        return Err(invalid("fields differ in shape"));
    }
    let n = a.dim();
    Ok(a.values()
        .chunks(n)
        .zip(b.values().chunks(n))
        .map(|(u, v)| (u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64).sqrt())
        .fold(0.0, f64::max))
}

/// Closed form against simulation on nested grids: each replicate samples one sheet on the
/// finest grid and restricts it; returns the replicate-mean sup-grid RMS gap per grid.
pub fn closed_form_gap_study(a_values: &[f64], y0: f64, grids: &[Grid], replicates: usize, seed: u64, q: f64) -> Result<Vec<f64>> {
    let finest = *grids.last().ok_or_else(|| invalid("need at least one grid"))?;
    let factors: Vec<usize> = grids
        .iter()
        .map(|g| {
            if g.horizon() != finest.horizon() || finest.nt() % g.nt() != 0 || finest.nx() % g.nx() != 0 {
                Err(invalid("grids must nest into the last grid"))
            } else {
                Ok(finest.nt() / g.nt())
            }
        })
        .collect::<Result<_>>()?;
    let per: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let cfg = ChaosConfig::new(a_values.to_vec(), y0, finest, derive_seed(seed, r as u64), q)?;
            let sheet = cfg.sheet()?;
            factors
                .iter()
                .map(|&fac| {
                    let s = sheet.coarsen(fac)?;
                    let c = ChaosConfig { grid: *s.grid(), ..cfg.clone() };
                    sup_rms_gap(&simulate_particle_system(&c, &s)?, &closed_form_solution(&c, &s)?)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..grids.len()).map(|k| mean(&per.iter().map(|r| r[k]).collect::<Vec<_>>())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Point as P;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(t: f64, x: f64) -> Point {
        P::new(t, x).unwrap()
    }

    #[test]
    fn config_checks() {
        let g = Grid::unit(4).unwrap();
        assert!(ChaosConfig::new(vec![], 1.0, g, 0, 0.1).is_err());
        assert!(ChaosConfig::new(vec![0.05, 0.05], 1.0, g, 0, 0.1).is_err());
        assert!(ChaosConfig::new(vec![1.0], 1.0, g, 0, 0.0).is_err());
        let c = ChaosConfig::new(vec![1.0, 2.0, 3.0], 1.0, g, 0, 0.1).unwrap();
        assert_eq!(c.norm_a(), 6.0);
        let u = ADistribution::Uniform { lo: 0.5, hi: 1.5 }.sample(100, 3).unwrap();
        assert!(u.iter().all(|v| (0.5..1.5).contains(v)));
        assert_eq!(u, ADistribution::Uniform { lo: 0.5, hi: 1.5 }.sample(100, 3).unwrap());
        assert!(ADistribution::Uniform { lo: 1.0, hi: 1.0 }.sample(3, 0).is_err());
    }

    #[test]
    fn single_particle_is_shifted_sheet() {
        let g = Grid::unit(8).unwrap();
        let cfg = ChaosConfig::new(vec![1.0], 0.7, g, 4, 0.5).unwrap();
        let s = cfg.sheet().unwrap();
        let y = simulate_particle_system(&cfg, &s).unwrap();
        for i in 0..=8 {
            for j in 0..=8 {
                assert_relative_eq!(y.get(i, j)[0], 0.7 + s.value(0, i, j), epsilon = 1e-13);
            }
        }
        assert!(simulate_particle_system(&cfg, &SheetPath::sample(g, 2, 0).unwrap()).is_err());
    }

    #[test]
    fn zero_coefficients_mean_revert() {
        let g = Grid::unit(6).unwrap();
        let s = SheetPath::sample(g, 2, 1).unwrap();
        let lin = LinearSystem { a: &[0.0, 0.0] };
        let mut o = [0.0; 2];
        lin.drift(p(0.1, 0.1), &[1.5, -2.0], None, &mut o);
        assert_eq!(o, [-1.5, 2.0]);
        // without noise the recursion gives Σ_k C(i,k) C(j,k) (−h²)^k
        let quiet = SheetPath::from_increments(g, 2, 0, &vec![0.0; 72]).unwrap();
        let cfg = ChaosConfig { a_values: vec![0.0, 0.0], y0: 1.0, grid: g, seed: 0 };
        let y = simulate_particle_system(&cfg, &quiet).unwrap();
        let binom = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];
        let h2: f64 = g.cell_area();
        let discrete: f64 = (0..=6).map(|k| binom[k] * binom[k] * (-h2).powi(k as i32)).sum();
        assert_relative_eq!(y.get(6, 6)[0], discrete, epsilon = 1e-13);
        assert!((discrete - f_series(-1.0).unwrap()).abs() < 0.1);
        let noisy = simulate_particle_system(&cfg, &s).unwrap();
        assert!(noisy.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decomposition_examples() {
        let a = [1.0, 2.0, 3.0];
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_power_decomposition(&a, 0).unwrap() - &id).amax() < 1e-14);
        let am = DMatrix::from_fn(3, 3, |_, j| a[j]);
        let base = &am / 3.0 - &id;
        assert!((matrix_power_decomposition(&a, 1).unwrap() - &base).amax() < 1e-14);
        let p4 = &base * &base * &base * &base;
        assert!((matrix_power_decomposition(&a, 4).unwrap() - p4).amax() < 1e-10);
        assert!(matrix_power_decomposition(&[1.0, -1.0], 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn decomposition_matches_dense_powers(a in prop::collection::vec(0.1..3.0f64, 1..=6), n in 0u32..=12) {
            let k = a.len();
            let base = DMatrix::from_fn(k, k, |i, j| a[j] / k as f64 - if i == j { 1.0 } else { 0.0 });
            let mut dense = DMatrix::<f64>::identity(k, k);
            for _ in 0..n {
                dense = &dense * &base;
            }
            let fast = matrix_power_decomposition(&a, n).unwrap();
            prop_assert!((fast - dense).amax() < 1e-9);
        }
    }

    #[test]
    fn closed_form_boundary_and_unit_coefficients() {
        let g = Grid::unit(8).unwrap();
        let cfg = ChaosConfig::new(vec![1.0; 4], 1.3, g, 2, 0.5).unwrap();
        let s = cfg.sheet().unwrap();
        let y = closed_form_solution(&cfg, &s).unwrap();
        for k in 0..=8 {
            assert!(y.get(0, k).iter().chain(y.get(k, 0)).all(|&v| (v - 1.3).abs() < 1e-14));
        }
        // a ≡ 1: deterministic part is y everywhere
        let quiet = SheetPath::from_increments(g, 4, 0, &vec![0.0; 4 * 64]).unwrap();
        let yq = closed_form_solution(&cfg, &quiet).unwrap();
        assert!(yq.values().iter().all(|&v| (v - 1.3).abs() < 1e-14));
    }

    #[test]
    fn closed_form_converges_to_simulation() {
        let grids: Vec<Grid> = [8, 16, 32].iter().map(|&n| Grid::unit(n).unwrap()).collect();
        let gaps = closed_form_gap_study(&[1.0, 0.5, 1.5, 2.0], 1.0, &grids, 4, 3, 0.1).unwrap();
        assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    }

    #[test]
    fn remainder_for_one_particle() {
        let g = Grid::unit(8).unwrap();
        let z = p(0.5, 0.5);
        let est = remainder_variance(1, ADistribution::Constant(1.0), 0.5, g, z, 4000, 7).unwrap();
        let exact = remainder_variance_exact(1, 1.0, &g, z).unwrap();
        assert!(est.within(exact, 3.0), "{est:?} vs {exact}");
    }

    #[test]
    fn remainder_decays_like_one_over_n() {
        let g = Grid::unit(8).unwrap();
        let z = p(0.5, 0.5);
        let est: Vec<f64> =
            [4usize, 16].iter().map(|&n| remainder_variance(n, ADistribution::Constant(1.0), 0.5, g, z, 2000, 11).unwrap().mean).collect();
        let r = est[0] / est[1];
        assert!((3.0..5.3).contains(&r), "{est:?}");
        let mut buf = Vec::new();
        write_rate_csv(&[RateRow { particles: 4, estimate: est[0], stderr: 0.0 }], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("N,estimate,stderr"));
    }

    #[test]
    fn exchangeable_marginals() {
        let g = Grid::unit(6).unwrap();
        let a = vec![0.8, 1.2, 1.0];
        let mut by_particle = vec![Vec::new(); 3];
        for r in 0..2000u64 {
            let cfg = ChaosConfig::new(a.clone(), 0.5, g, derive_seed(5, r), 0.1).unwrap();
            let y = simulate_particle_system(&cfg, &cfg.sheet().unwrap()).unwrap();
            for (i, v) in y.get(6, 6).iter().enumerate() {
                by_particle[i].push(v * v);
            }
        }
        let e: Vec<Estimate> = by_particle.iter().map(|v| Estimate::from_samples(v)).collect();
        for w in e.windows(2) {
            assert!((w[0].mean - w[1].mean).abs() < 2.0 * w[0].stderr.hypot(w[1].stderr) + 0.05, "{e:?}");
        }
    }

    #[test]
    fn limit_solution_examples() {
        let g = Grid::unit(8).unwrap();
        let quiet = SheetPath::from_increments(g, 1, 0, &[0.0; 64]).unwrap();
        let y = limit_solution(1.0, 2.0, &quiet).unwrap();
        assert!(y.values().iter().all(|&v| (v - 2.0).abs() < 1e-14));
        let y = limit_solution(0.3, 2.0, &quiet).unwrap();
        for j in 0..=8 {
            assert_eq!(y.get(0, j)[0], 2.0);
        }
        assert_relative_eq!(y.get(8, 8)[0], 2.0 * f_series(-0.7).unwrap(), epsilon = 1e-14);
        let s = SheetPath::sample(g, 1, 1).unwrap();
        let y = limit_solution(1.0, 0.0, &s).unwrap();
        assert_eq!(y.get(0, 5)[0], 0.0);
        assert!(limit_solution(1.0, 0.0, &SheetPath::sample(g, 2, 1).unwrap()).is_err());
    }

    #[test]
    fn limit_variance_matches_isometry() {
        let g = Grid::unit(16).unwrap();
        let vals: Vec<f64> = (0..10_000u64)
            .into_par_iter()
            .map(|r| limit_solution(1.0, 0.0, &SheetPath::sample(g, 1, derive_seed(8, r)).unwrap()).unwrap().get(16, 16)[0].powi(2))
            .collect();
        let exact = remainder_variance_exact(1, 1.0, &g, p(1.0, 1.0)).unwrap();
        assert!(Estimate::from_samples(&vals).within(exact, 3.0));
        assert!((exact - 0.63635380317).abs() < 0.05);
    }

    #[test]
    fn limit_spde_residuals() {
        let rep = verify_limit_spde(0.6, 1.5, Grid::unit(128).unwrap(), 2, 1).unwrap();
        assert!(rep.deterministic_residual < 1e-6, "{rep:?}");
        let coarse = verify_limit_spde(1.0, 0.0, Grid::unit(8).unwrap(), 200, 2).unwrap();
        let fine = verify_limit_spde(1.0, 0.0, Grid::unit(32).unwrap(), 200, 2).unwrap();
        assert!(fine.sup_residual < coarse.sup_residual, "{coarse:?} {fine:?}");
    }
}
