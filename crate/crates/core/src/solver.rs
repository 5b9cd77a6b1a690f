//! Explicit Goursat recursion for planar systems, the conditional McKean-Vlasov particle
//! method with a shared common-noise channel, and Picard iteration diagnostics.
//!
//! Every scheme here uses lower-left evaluation: the cell `(i, j)` update reads states,
//! measures and coefficients at node `(i, j)` only.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::{CellNoise, SheetPath, StackedNoise};
use crate::plane::NodeIndex;
use crate::series::find_r0;
use crate::stats::derive_seed;
use crate::{EmpiricalMeasure, Grid, Point};

/// Drift `α(z, y, μ) ∈ ℝⁿ` and diffusion `β(z, y, μ) ∈ ℝ^{n x m}` (row-major).
pub trait Coefficients: Sync {
    fn state_dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn drift(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]);
    fn diffusion(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]);

    fn depends_on_state(&self) -> bool {
        true
    }

    fn depends_on_measure(&self) -> bool {
        false
    }

    /// Joint Lipschitz constant `K` in `(y, μ)`, when known.
    fn lipschitz_hint(&self) -> Option<f64> {
        None
    }
}

type DriftFn = dyn Fn(Point, &[f64], Option<&EmpiricalMeasure>, &mut [f64]) + Send + Sync;

/// Coefficients assembled from closures.
pub struct CoefficientField {
    n: usize,
    m: usize,
    drift: Box<DriftFn>,
    diffusion: Box<DriftFn>,
    state: bool,
    measure: bool,
    lipschitz: Option<f64>,
}

impl CoefficientField {
    pub fn new(
        n: usize,
        m: usize,
        drift: impl Fn(Point, &[f64], Option<&EmpiricalMeasure>, &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(Point, &[f64], Option<&EmpiricalMeasure>, &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(invalid("state dimension and channel count must be positive"));
        }
        Ok(Self { n, m, drift: Box::new(drift), diffusion: Box::new(diffusion), state: true, measure: false, lipschitz: None })
    }

    /// Constant drift vector and diffusion matrix.
    pub fn constant(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = alpha.len();
        if n == 0 || beta.is_empty() || !beta.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch { expected: n, got: beta.len() });
        }
        let m = beta.len() / n;
        Ok(Self::new(n, m, move |_, _, _, o| o.copy_from_slice(&alpha), move |_, _, _, o| o.copy_from_slice(&beta))?
            .with_flags(false, false)
            .with_lipschitz(0.0))
    }

    pub fn with_flags(mut self, depends_on_state: bool, depends_on_measure: bool) -> Self {
        self.state = depends_on_state;
        self.measure = depends_on_measure;
        self
    }

    pub fn with_lipschitz(mut self, k: f64) -> Self {
        self.lipschitz = Some(k);
        self
    }
}

impl Coefficients for CoefficientField {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn channels(&self) -> usize {
        self.m
    }
    fn drift(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        (self.drift)(z, y, mu, out)
    }
    fn diffusion(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        (self.diffusion)(z, y, mu, out)
    }
    fn depends_on_state(&self) -> bool {
        self.state
    }
    fn depends_on_measure(&self) -> bool {
        self.measure
    }
    fn lipschitz_hint(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Scalar conditional Ornstein-Uhlenbeck field
/// `α = a·mean(μ) − κ y`, `β = (σ₁, …, σ_m)` (constant row).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalOu {
    pub a: f64,
    pub kappa: f64,
    pub sigma: Vec<f64>,
}

impl ConditionalOu {
    pub fn new(a: f64, kappa: f64, sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(invalid("diffusion row needs at least one channel"));
        }
        Ok(Self { a, kappa, sigma })
    }
}

impl Coefficients for ConditionalOu {
    fn state_dim(&self) -> usize {
        1
    }
    fn channels(&self) -> usize {
        self.sigma.len()
    }
    fn drift(&self, _: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        let mean = mu.map_or(y[0], |m| m.mean()[0]);
        out[0] = self.a * mean - self.kappa * y[0];
    }
    fn diffusion(&self, _: Point, _: &[f64], _: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
    fn depends_on_measure(&self) -> bool {
        self.a != 0.0
    }
    fn lipschitz_hint(&self) -> Option<f64> {
        Some(self.a.abs() + self.kappa.abs())
    }
}

/// States on every node of a grid: layout `[node][component]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateField {
    grid: Grid,
    n: usize,
    values: Vec<f64>,
}

/// A grid line of a [`StateField`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Line {
    /// All nodes with time index `i`.
    FixedT(usize),
    /// All nodes with space index `j`.
    FixedX(usize),
}

impl StateField {
    pub fn constant(grid: Grid, y0: &[f64]) -> Self {
        let mut values = Vec::with_capacity(grid.node_count() * y0.len());
        for _ in 0..grid.node_count() {
            values.extend_from_slice(y0);
        }
        Self { grid, n: y0.len(), values }
    }

    pub fn from_values(grid: Grid, n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() * n {
            return Err(Error::DimensionMismatch { expected: grid.node_count() * n, got: values.len() });
        }
        Ok(Self { grid, n, values })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = self.grid.flat((i, j)) * self.n;
        &self.values[k..k + self.n]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let k = self.grid.flat((i, j)) * self.n;
        &mut self.values[k..k + self.n]
    }

    pub fn at(&self, z: Point) -> Result<&[f64]> {
        let (i, j) = self.grid.node_index(z)?;
        Ok(self.get(i, j))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV rows `t, x, y1..yn` along a grid line.
    pub fn write_line_csv<W: Write>(&self, line: Line, writer: W) -> Result<()> {
        let nodes: Vec<NodeIndex> = match line {
            Line::FixedT(i) if i <= self.grid.nt() => (0..=self.grid.nx()).map(|j| (i, j)).collect(),
            Line::FixedX(j) if j <= self.grid.nx() => (0..=self.grid.nt()).map(|i| (i, j)).collect(),
            _ => return Err(invalid("line index outside the grid")),
        };
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend((1..=self.n).map(|k| format!("y{k}")));
        w.write_record(&header)?;
        for (i, j) in nodes {
            let z = self.grid.node(i, j);
            let mut row = vec![format!("{:e}", z.t), format!("{:e}", z.x)];
            row.extend(self.get(i, j).iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_shapes<C: Coefficients + ?Sized>(coeffs: &C, y0: &[f64], channels: usize) -> Result<()> {
    if y0.len() != coeffs.state_dim() {
        return Err(Error::DimensionMismatch { expected: coeffs.state_dim(), got: y0.len() });
    }
    if channels != coeffs.channels() {
        return Err(Error::DimensionMismatch { expected: coeffs.channels(), got: channels });
    }
    Ok(())
}

/// Scratch buffers for one coefficient evaluation.
struct Scratch {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    db: Vec<f64>,
}

impl Scratch {
    fn new(n: usize, m: usize) -> Self {
        Self { alpha: vec![0.0; n], beta: vec![0.0; n * m], db: vec![0.0; m] }
    }

    /// `α ΔtΔx + β ΔB` for cell `(i, j)`, coefficients read at `(z, y, μ)`.
    #[allow(clippy::too_many_arguments)]
    fn step<C: Coefficients + ?Sized>(
        &mut self,
        coeffs: &C,
        noise: &impl CellNoise,
        (i, j): NodeIndex,
        z: Point,
        y: &[f64],
        mu: Option<&EmpiricalMeasure>,
        area: f64,
        out: &mut [f64],
    ) {
        let m = self.db.len();
        coeffs.drift(z, y, mu, &mut self.alpha);
        coeffs.diffusion(z, y, mu, &mut self.beta);
        for (c, d) in self.db.iter_mut().enumerate() {
            *d = noise.increment(c, i, j);
        }
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.beta[k * m..(k + 1) * m];
            *o = self.alpha[k] * area + row.iter().zip(&self.db).map(|(b, d)| b * d).sum::<f64>();
        }
    }
}

/// Goursat recursion `Y_{i+1,j+1} = Y_{i+1,j} + Y_{i,j+1} − Y_{i,j} + α Δt Δx + β ΔB`
/// with `Y = y0` on both axes.
///
/// `measures`, when given, holds one measure per node (row-major, as `Grid::flat`).
pub fn solve_goursat<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    noise: &impl CellNoise,
    measures: Option<&[EmpiricalMeasure]>,
) -> Result<StateField> {
    check_shapes(coeffs, y0, noise.channels())?;
    let grid = *noise.grid();
    if coeffs.depends_on_measure() {
        match measures {
            None => return Err(Error::MissingMeasure),
            Some(ms) if ms.len() != grid.node_count() => {
                return Err(Error::DimensionMismatch { expected: grid.node_count(), got: ms.len() })
            }
            _ => {}
        }
    }
    let n = y0.len();
    let mut field = StateField::constant(grid, y0);
    let mut scratch = Scratch::new(n, coeffs.channels());
    let mut inc = vec![0.0; n];
    let area = grid.cell_area();
    for i in 0..grid.nt() {
        for j in 0..grid.nx() {
            let mu = measures.map(|ms| &ms[grid.flat((i, j))]);
            scratch.step(coeffs, noise, (i, j), grid.node(i, j), field.get(i, j), mu, area, &mut inc);
            for (k, d) in inc.iter().enumerate() {
                let v = field.get(i + 1, j)[k] + field.get(i, j + 1)[k] - field.get(i, j)[k] + d;
                field.get_mut(i + 1, j + 1)[k] = v;
            }
        }
    }
    Ok(field)
}

/// Common one-channel sheet plus one private sheet (channels 2..m) per particle.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    grid: Grid,
    channels: usize,
    common: SheetPath,
    private: Vec<SheetPath>,
}

impl NoiseBank {
    /// Common sheet from `derive_seed(seed, 0)`, particle `p` from `derive_seed(seed, p + 1)`.
    /// Particle `p`'s noise therefore does not depend on the ensemble size.
    pub fn sample(grid: Grid, channels: usize, particles: usize, seed: u64) -> Result<Self> {
        Self::sample_with_common(grid, channels, particles, derive_seed(seed, 0), seed)
    }

    /// Common sheet from `common_seed`; particle `p` from `derive_seed(private_seed, p + 1)`.
    pub fn sample_with_common(grid: Grid, channels: usize, particles: usize, common_seed: u64, private_seed: u64) -> Result<Self> {
        if particles == 0 {
            return Err(invalid("ensemble needs at least one particle"));
        }
        let common = SheetPath::sample(grid, 1, common_seed)?;
        let private = if channels > 1 {
            (0..particles)
                .into_par_iter()
                .map(|p| SheetPath::sample(grid, channels - 1, derive_seed(private_seed, p as u64 + 1)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Self::from_parts(common, private, particles)
    }

    /// Assembles a bank; private sheets must have pairwise distinct seeds.
    pub fn from_parts(common: SheetPath, private: Vec<SheetPath>, particles: usize) -> Result<Self> {
        if common.channels() != 1 {
            return Err(invalid("common sheet must have exactly one channel"));
        }
        let grid = *common.grid();
        let channels = if private.is_empty() {
            1
        } else {
            if private.len() != particles {
                return Err(Error::DimensionMismatch { expected: particles, got: private.len() });
            }
            let ch = private[0].channels();
            if private.iter().any(|s| s.channels() != ch || *s.grid() != grid) {
                return Err(invalid("private sheets differ in shape"));
            }
            let seeds: HashSet<u64> = private.iter().map(|s| s.seed()).collect();
            if seeds.len() != private.len() {
                return Err(invalid("private sheets must have distinct seeds"));
            }
            ch + 1
        };
        Ok(Self { grid, channels, common, private })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn common(&self) -> &SheetPath {
        &self.common
    }

    pub fn particle_noise(&self, p: usize) -> StackedNoise<'_> {
        StackedNoise { common: &self.common, private: self.private.get(p) }
    }
}

/// `M` trajectories sharing the common channel; states stored node-major
/// (`[node][particle][component]`) so each node's empirical measure is contiguous.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    bank: NoiseBank,
    n: usize,
    particles: usize,
    states: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &Grid {
        &self.bank.grid
    }

    pub fn bank(&self) -> &NoiseBank {
        &self.bank
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.particles
    }

    pub fn is_empty(&self) -> bool {
        self.particles == 0
    }

    fn stride(&self) -> usize {
        self.particles * self.n
    }

    /// States of all particles at node `(i, j)`, `M x n`.
    pub fn node_states(&self, i: usize, j: usize) -> &[f64] {
        let k = self.bank.grid.flat((i, j)) * self.stride();
        &self.states[k..k + self.stride()]
    }

    pub fn state(&self, p: usize, i: usize, j: usize) -> &[f64] {
        &self.node_states(i, j)[p * self.n..(p + 1) * self.n]
    }

    /// Equal-weight empirical measure of the particles at node `(i, j)`.
    pub fn measure(&self, i: usize, j: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.n, self.node_states(i, j).to_vec()).expect("nonempty ensemble")
    }

    pub fn measure_at(&self, z: Point) -> Result<EmpiricalMeasure> {
        let (i, j) = self.bank.grid.node_index(z)?;
        Ok(self.measure(i, j))
    }

    /// Trajectory of particle `p` as its own state field.
    pub fn particle_field(&self, p: usize) -> StateField {
        let g = self.bank.grid;
        let mut values = Vec::with_capacity(g.node_count() * self.n);
        for i in 0..=g.nt() {
            for j in 0..=g.nx() {
                values.extend_from_slice(self.state(p, i, j));
            }
        }
        StateField { grid: g, n: self.n, values }
    }

    /// Largest node-wise mean-square distance to another ensemble on the same grid.
    pub fn sup_mean_sq_gap(&self, other: &Self) -> f64 {
        let s = self.stride() as f64 / self.n as f64;
        self.states
            .chunks(self.stride())
            .zip(other.states.chunks(other.stride()))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / s)
            .fold(0.0, f64::max)
    }
}

/// Runs the particle recursion. With `source = None` coefficients read the ensemble being
/// built (the McKean-Vlasov scheme); otherwise they read the frozen `source` ensemble.
fn advance_ensemble<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    bank: &NoiseBank,
    source: Option<&ParticleEnsemble>,
) -> Result<ParticleEnsemble> {
    check_shapes(coeffs, y0, bank.channels())?;
    let grid = bank.grid;
    let n = y0.len();
    let particles = bank.private.len().max(1);
    let particles = if bank.private.is_empty() { source.map_or(particles, |s| s.particles) } else { particles };
    let stride = particles * n;
    let mut states = Vec::with_capacity(grid.node_count() * stride);
    for _ in 0..grid.node_count() * particles {
        states.extend_from_slice(y0);
    }
    let area = grid.cell_area();
    let wants_measure = coeffs.depends_on_measure();
    let parallel = stride >= 4096;
    for i in 0..grid.nt() {
        for j in 0..grid.nx() {
            let (lo, hi) = states.split_at_mut(grid.flat((i + 1, j + 1)) * stride);
            let target = &mut hi[..stride];
            let read = |node: NodeIndex| {
                let k = grid.flat(node) * stride;
                &lo[k..k + stride]
            };
            let (a, b, c) = (read((i + 1, j)), read((i, j + 1)), read((i, j)));
            let coeff_states: &[f64] = match source {
                Some(s) => s.node_states(i, j),
                None => c,
            };
            let mu = if wants_measure { Some(EmpiricalMeasure::uniform(n, coeff_states.to_vec())?) } else { None };
            let z = grid.node(i, j);
            let work = |p: usize, out: &mut [f64], scratch: &mut Scratch, inc: &mut [f64]| {
                let noise = bank.particle_noise(p);
                let y = &coeff_states[p * n..(p + 1) * n];
                scratch.step(coeffs, &noise, (i, j), z, y, mu.as_ref(), area, inc);
                for k in 0..n {
                    let q = p * n + k;
                    out[k] = a[q] + b[q] - c[q] + inc[k];
                }
            };
            if parallel {
                target.par_chunks_mut(n).enumerate().for_each_init(
                    || (Scratch::new(n, bank.channels), vec![0.0; n]),
                    |(scratch, inc), (p, out)| work(p, out, scratch, inc),
                );
            } else {
                let mut scratch = Scratch::new(n, bank.channels);
                let mut inc = vec![0.0; n];
                for (p, out) in target.chunks_mut(n).enumerate() {
                    work(p, out, &mut scratch, &mut inc);
                }
            }
        }
    }
    Ok(ParticleEnsemble { bank: bank.clone(), n, particles, states })
}

/// Conditional McKean-Vlasov particle system on the noise bank drawn from `seed`.
pub fn solve_conditional_mkv<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    particles: usize,
    grid: Grid,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if particles == 0 {
        return Err(invalid("ensemble needs at least one particle"));
    }
    if coeffs.depends_on_measure() && coeffs.channels() < 2 {
        return Err(invalid("conditional dynamics need a common channel plus at least one idiosyncratic channel"));
    }
    let bank = NoiseBank::sample(grid, coeffs.channels(), particles, seed)?;
    solve_conditional_mkv_on(coeffs, y0, &bank)
}

/// As [`solve_conditional_mkv`] on a prepared noise bank.
pub fn solve_conditional_mkv_on<C: Coefficients + ?Sized>(coeffs: &C, y0: &[f64], bank: &NoiseBank) -> Result<ParticleEnsemble> {
    if bank.private.is_empty() && coeffs.depends_on_measure() {
        return Err(invalid("conditional dynamics need idiosyncratic channels"));
    }
    advance_ensemble(coeffs, y0, bank, None)
}

#[derive(Clone, Debug)]
pub struct PicardReport {
    pub ensemble: ParticleEnsemble,
    /// `sup_z mean_p |Y^{n+1}_p(z) − Y^n_p(z)|²` for `n = 0, 1, …`.
    pub gaps: Vec<f64>,
    pub converged: bool,
    /// Gaps grew on three consecutive iterations.
    pub diverged: bool,
}

/// Picard iteration from `Y⁰ ≡ y0`, every iterate driven by the same noise bank.
pub fn picard_solve<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    particles: usize,
    grid: Grid,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<PicardReport> {
    let bank = NoiseBank::sample(grid, coeffs.channels(), particles, seed)?;
    picard_solve_on(coeffs, y0, &bank, particles, max_iter, tol)
}

pub fn picard_solve_on<C: Coefficients + ?Sized>(
    coeffs: &C,
    y0: &[f64],
    bank: &NoiseBank,
    particles: usize,
    max_iter: usize,
    tol: f64,
) -> Result<PicardReport> {
    if max_iter == 0 {
        return Err(invalid("picard_solve needs max_iter >= 1"));
    }
    if particles == 0 {
        return Err(invalid("ensemble needs at least one particle"));
    }
    check_shapes(coeffs, y0, bank.channels())?;
    let grid = bank.grid;
    let mut states = Vec::with_capacity(grid.node_count() * particles * y0.len());
    for _ in 0..grid.node_count() * particles {
        states.extend_from_slice(y0);
    }
    let mut current = ParticleEnsemble { bank: bank.clone(), n: y0.len(), particles, states };
    let mut gaps = Vec::new();
    let (mut converged, mut diverged) = (false, false);
    let mut growth = 0;
    for _ in 0..max_iter {
        let next = advance_ensemble(coeffs, y0, bank, Some(&current))?;
        let gap = next.sup_mean_sq_gap(&current);
        growth = match gaps.last() {
            Some(&prev) if gap > prev => growth + 1,
            _ => 0,
        };
        gaps.push(gap);
        current = next;
        if !gap.is_finite() || growth >= 3 {
            diverged = true;
            break;
        }
        if gap <= tol {
            converged = true;
            break;
        }
    }
    Ok(PicardReport { ensemble: current, gaps, converged, diverged })
}

/// Horizon check against the two contraction thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusReport {
    pub lipschitz: f64,
    /// `|z| = T·X`.
    pub area: f64,
    pub r0: f64,
    /// Largest `|z|` with `K|z| ≤ r₀` (Gronwall lemma regime).
    pub gronwall_threshold: f64,
    /// Supremum of `|z|` with `K|z| < √r₀` (Picard majorant regime).
    pub picard_threshold: f64,
    pub gronwall_ok: bool,
    pub picard_ok: bool,
}

pub fn convergence_radius_report<C: Coefficients + ?Sized>(coeffs: &C, grid: &Grid) -> Result<RadiusReport> {
    let k = coeffs.lipschitz_hint().ok_or_else(|| invalid("coefficients carry no Lipschitz hint"))?;
    radius_report(k, grid.horizon().area())
}

pub fn radius_report(lipschitz: f64, area: f64) -> Result<RadiusReport> {
    if !(lipschitz >= 0.0) || !(area >= 0.0) {
        return Err(invalid("Lipschitz constant and area must be nonnegative"));
    }
    let r0 = find_r0(1e-12)?;
    let (gronwall_threshold, picard_threshold) =
        if lipschitz == 0.0 { (f64::INFINITY, f64::INFINITY) } else { (r0 / lipschitz, r0.sqrt() / lipschitz) };
    Ok(RadiusReport {
        lipschitz,
        area,
        r0,
        gronwall_threshold,
        picard_threshold,
        gronwall_ok: lipschitz * area <= r0,
        picard_ok: lipschitz * area < r0.sqrt(),
    })
}
