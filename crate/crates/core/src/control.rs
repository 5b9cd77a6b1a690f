//! Partial-observation control of conditional McKean-Vlasov dynamics.
//!
//! The observation is the common-noise channel, so an admissible policy sees the common
//! sheet on the rectangle `R_z` and the empirical conditional measure at `z`, nothing else.
//! The performance functional
//! `J(u) = E[∫∫ ℓ(ζ, Y(ζ), u(ζ)) dζ + k(Y(T,X))]`
//! is estimated along trajectories, and its measure form
//! `J̃(u) = E[∫∫∫ ℓ(ζ, y, u(ζ)) μ_ζ(dy) dζ + ∫ k(y) μ_{(T,X)}(dy)]`
//! is estimated against the ensemble's conditional measures.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::{CellNoise, SheetPath};
use crate::plane::NodeIndex;
use crate::solver::{solve_conditional_mkv_on, Coefficients, NoiseBank, ParticleEnsemble};
use crate::stats::{derive_seed, Estimate};
use crate::{EmpiricalMeasure, Grid, Point};

/// Largest control dimension a policy may declare.
pub const MAX_CONTROL_DIM: usize = 8;

/// The common-noise path restricted to `R_z`, the only pathwise input a policy receives.
#[derive(Clone, Copy, Debug)]
pub struct CommonPath<'a> {
    sheet: &'a SheetPath,
    corner: NodeIndex,
}

impl<'a> CommonPath<'a> {
    pub fn new(sheet: &'a SheetPath, corner: NodeIndex) -> Result<Self> {
        if sheet.channels() != 1 {
            return Err(invalid("the observed path has exactly one channel"));
        }
        if corner.0 > sheet.grid().nt() || corner.1 > sheet.grid().nx() {
            return Err(invalid("observation corner lies outside the grid"));
        }
        Ok(Self { sheet, corner })
    }

    pub fn corner(&self) -> NodeIndex {
        self.corner
    }

    /// `B₁` at node `(i, j)`, or `None` when the node lies outside `R_z`.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        (i <= self.corner.0 && j <= self.corner.1).then(|| self.sheet.value(0, i, j))
    }

    /// `B₁(z)`.
    pub fn current(&self) -> f64 {
        self.sheet.value(0, self.corner.0, self.corner.1)
    }
}

pub trait ControlPolicy: Sync {
    /// Label of the policy inside its finite family.
    fn theta(&self) -> f64;
    fn control_dim(&self) -> usize;
    fn control(&self, z: Point, observed: &CommonPath<'_>, mu: &EmpiricalMeasure, out: &mut [f64]);
}

/// `u = θ · mean(μ_z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanFeedback {
    pub theta: f64,
    pub dim: usize,
}

impl ControlPolicy for MeanFeedback {
    fn theta(&self) -> f64 {
        self.theta
    }
    fn control_dim(&self) -> usize {
        self.dim
    }
    fn control(&self, _: Point, _: &CommonPath<'_>, mu: &EmpiricalMeasure, out: &mut [f64]) {
        for (o, m) in out.iter_mut().zip(mu.mean()) {
            *o = self.theta * m;
        }
    }
}

/// Open-loop constant control `u ≡ value`, labelled by `value`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPolicy {
    pub value: f64,
}

impl ControlPolicy for ConstantPolicy {
    fn theta(&self) -> f64 {
        self.value
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control(&self, _: Point, _: &CommonPath<'_>, _: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(self.value);
    }
}

/// `u = θ · B₁(z)`: feedback on the observation itself.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObservationFeedback {
    pub theta: f64,
}

impl ControlPolicy for ObservationFeedback {
    fn theta(&self) -> f64 {
        self.theta
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn control(&self, _: Point, observed: &CommonPath<'_>, _: &EmpiricalMeasure, out: &mut [f64]) {
        out.fill(self.theta * observed.current());
    }
}

/// Signal coefficients with the control argument: `α(ζ, y, μ, u)`, `β(ζ, y, μ, u)`.
pub trait ControlledDynamics: Sync {
    fn state_dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, z: Point, y: &[f64], mu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
    fn diffusion(&self, z: Point, y: &[f64], mu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]);
}

/// Scalar linear dynamics `α = a·mean(μ) − κy + b·u`, `β = (σ₁, …, σ_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearControlled {
    pub a: f64,
    pub kappa: f64,
    pub b: f64,
    pub sigma: Vec<f64>,
}

impl LinearControlled {
    pub fn new(a: f64, kappa: f64, b: f64, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() < 2 {
            return Err(invalid("controlled dynamics need a common and an idiosyncratic channel"));
        }
        if ![a, kappa, b].iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(invalid("coefficients must be finite"));
        }
        Ok(Self { a, kappa, b, sigma })
    }
}

impl ControlledDynamics for LinearControlled {
    fn state_dim(&self) -> usize {
        1
    }
    fn channels(&self) -> usize {
        self.sigma.len()
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn drift(&self, _: Point, y: &[f64], mu: &EmpiricalMeasure, u: &[f64], out: &mut [f64]) {
        out[0] = self.a * mu.mean()[0] - self.kappa * y[0] + self.b * u[0];
    }
    fn diffusion(&self, _: Point, _: &[f64], _: &EmpiricalMeasure, _: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
}

/// Dynamics with the policy curried in, so the uncontrolled solver runs unchanged.
struct Curried<'a, D: ?Sized, P: ?Sized> {
    dynamics: &'a D,
    policy: &'a P,
    common: &'a SheetPath,
}

impl<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized> Curried<'_, D, P> {
    fn with_control<R>(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, k: impl FnOnce(&EmpiricalMeasure, &[f64]) -> R) -> R {
        let own;
        let mu = match mu {
            Some(m) => m,
            None => {
                own = EmpiricalMeasure::dirac(y).expect("finite state");
                &own
            }
        };
        let grid = self.common.grid();
        let corner = ((z.t / grid.dt()).round() as usize, (z.x / grid.dx()).round() as usize);
        let observed = CommonPath { sheet: self.common, corner };
        let mut u = [0.0; MAX_CONTROL_DIM];
        let u = &mut u[..self.policy.control_dim()];
        self.policy.control(z, &observed, mu, u);
        k(mu, u)
    }
}

impl<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized> Coefficients for Curried<'_, D, P> {
    fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }
    fn channels(&self) -> usize {
        self.dynamics.channels()
    }
    fn drift(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        self.with_control(z, y, mu, |m, u| self.dynamics.drift(z, y, m, u, out))
    }
    fn diffusion(&self, z: Point, y: &[f64], mu: Option<&EmpiricalMeasure>, out: &mut [f64]) {
        self.with_control(z, y, mu, |m, u| self.dynamics.diffusion(z, y, m, u, out))
    }
    fn depends_on_measure(&self) -> bool {
        true
    }
}

type RunningCost = dyn Fn(Point, &[f64], &[f64]) -> f64 + Send + Sync;
type TerminalCost = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Running reward `ℓ(ζ, y, u)`, terminal reward `k(y)` and the horizon `(T, X)`.
pub struct CostSpec {
    running: Box<RunningCost>,
    terminal: Box<TerminalCost>,
    horizon: Point,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec").field("horizon", &self.horizon).finish_non_exhaustive()
    }
}

impl CostSpec {
    pub fn new(
        running: impl Fn(Point, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        horizon: Point,
    ) -> Self {
        Self { running: Box::new(running), terminal: Box::new(terminal), horizon }
    }

    /// `ℓ = −(|y|² + λ|u|²)`, `k = −|y|²`.
    pub fn lq(lambda: f64, horizon: Point) -> Self {
        Self::new(
            move |_, y, u| -(y.iter().map(|v| v * v).sum::<f64>() + lambda * u.iter().map(|v| v * v).sum::<f64>()),
            |y| -y.iter().map(|v| v * v).sum::<f64>(),
            horizon,
        )
    }

    /// Pollution-style tracking: `ℓ = −((y₁ − target)² + λ|u|²)`, `k = −(y₁ − target)²`.
    pub fn tracking(target: f64, lambda: f64, horizon: Point) -> Self {
        Self::new(
            move |_, y, u| -((y[0] - target).powi(2) + lambda * u.iter().map(|v| v * v).sum::<f64>()),
            move |y| -(y[0] - target).powi(2),
            horizon,
        )
    }

    /// `ℓ ≡ running`, `k ≡ terminal`.
    pub fn constant(running: f64, terminal: f64, horizon: Point) -> Self {
        Self::new(move |_, _, _| running, move |_| terminal, horizon)
    }

    /// The same cost with `shift` added to `ℓ`.
    pub fn shifted(self, shift: f64) -> Self {
        let Self { running, terminal, horizon } = self;
        Self { running: Box::new(move |z, y, u| running(z, y, u) + shift), terminal, horizon }
    }

    pub fn horizon(&self) -> Point {
        self.horizon
    }

    pub fn running(&self, z: Point, y: &[f64], u: &[f64]) -> f64 {
        (self.running)(z, y, u)
    }

    pub fn terminal(&self, y: &[f64]) -> f64 {
        (self.terminal)(y)
    }
}

/// Simulation settings shared by every policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSetup {
    pub y0: Vec<f64>,
    pub particles: usize,
    pub grid: Grid,
    pub replicates: usize,
    pub seed: u64,
}

impl ControlSetup {
    fn check(&self) -> Result<()> {
        if self.particles == 0 || self.replicates < 2 {
            return Err(invalid("control estimates need ≥ 1 particle and ≥ 2 replicates"));
        }
        Ok(())
    }

    /// Noise bank of replicate `r`; shared by all policies (common random numbers).
    pub fn bank(&self, channels: usize, r: usize) -> Result<NoiseBank> {
        NoiseBank::sample(self.grid, channels, self.particles, derive_seed(self.seed, r as u64))
    }
}

/// Both estimators of one policy on the same replicates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub theta: f64,
    pub direct: Estimate,
    pub measure: Estimate,
}

impl PolicyEvaluation {
    /// `|J − J̃| ≤ k·√(se_J² + se_J̃²)`.
    pub fn agrees(&self, k: f64) -> bool {
        (self.direct.mean - self.measure.mean).abs() <= k * self.direct.stderr.hypot(self.measure.stderr)
    }
}

fn check_dims<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized>(policy: &P, dynamics: &D, setup: &ControlSetup) -> Result<()> {
    setup.check()?;
    if policy.control_dim() != dynamics.control_dim() {
        return Err(Error::DimensionMismatch { expected: dynamics.control_dim(), got: policy.control_dim() });
    }
    if policy.control_dim() > MAX_CONTROL_DIM {
        return Err(invalid(format!("control dimension above {MAX_CONTROL_DIM}")));
    }
    if setup.y0.len() != dynamics.state_dim() {
        return Err(Error::DimensionMismatch { expected: dynamics.state_dim(), got: setup.y0.len() });
    }
    Ok(())
}

/// Simulates one replicate under `policy` and returns `(direct, measure-based)` rewards.
fn replicate_rewards<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized>(
    policy: &P,
    dynamics: &D,
    cost: &CostSpec,
    setup: &ControlSetup,
    r: usize,
) -> Result<(f64, f64)> {
    let bank = setup.bank(dynamics.channels(), r)?;
    let curried = Curried { dynamics, policy, common: bank.common() };
    let ens = solve_conditional_mkv_on(&curried, &setup.y0, &bank)?;
    Ok(rewards(&ens, policy, cost))
}

fn rewards<P: ControlPolicy + ?Sized>(ens: &ParticleEnsemble, policy: &P, cost: &CostSpec) -> (f64, f64) {
    let grid = ens.grid();
    let (it, jx) = grid.node_index(cost.horizon()).unwrap_or((grid.nt(), grid.nx()));
    let area = grid.cell_area();
    let n = ens.dim();
    let particles = ens.len();
    let mut u = [0.0; MAX_CONTROL_DIM];
    let u = &mut u[..policy.control_dim()];
    let (mut direct, mut measure) = (0.0, 0.0);
    for i in 0..it {
        for j in 0..jx {
            let z = grid.node(i, j);
            let mu = ens.measure(i, j);
            policy.control(z, &CommonPath { sheet: ens.bank().common(), corner: (i, j) }, &mu, u);
            let states = ens.node_states(i, j);
            direct += states.chunks(n).map(|y| cost.running(z, y, u)).sum::<f64>() / particles as f64 * area;
            measure += mu.integrate(|y| cost.running(z, y, u)) * area;
        }
    }
    let states = ens.node_states(it, jx);
    direct += states.chunks(n).map(|y| cost.terminal(y)).sum::<f64>() / particles as f64;
    measure += ens.measure(it, jx).integrate(|y| cost.terminal(y));
    (direct, measure)
}

/// `J(u)` and `J̃(u)` on the same replicate banks.
pub fn evaluate_policy<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized>(
    policy: &P,
    dynamics: &D,
    cost: &CostSpec,
    setup: &ControlSetup,
) -> Result<PolicyEvaluation> {
    check_dims(policy, dynamics, setup)?;
    setup.grid.node_index(cost.horizon())?;
    let pairs: Vec<(f64, f64)> =
        (0..setup.replicates).into_par_iter().map(|r| replicate_rewards(policy, dynamics, cost, setup, r)).collect::<Result<_>>()?;
    let (d, m): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(PolicyEvaluation { theta: policy.theta(), direct: Estimate::from_samples(&d), measure: Estimate::from_samples(&m) })
}

/// Trajectory estimate of `J(u)`: replicates × particles, stderr across replicates.
pub fn performance_direct<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized>(
    policy: &P,
    dynamics: &D,
    cost: &CostSpec,
    setup: &ControlSetup,
) -> Result<Estimate> {
    Ok(evaluate_policy(policy, dynamics, cost, setup)?.direct)
}

/// Estimate of `J̃(u)` through the empirical conditional measures.
pub fn performance_measure_based<D: ControlledDynamics + ?Sized, P: ControlPolicy + ?Sized>(
    policy: &P,
    dynamics: &D,
    cost: &CostSpec,
    setup: &ControlSetup,
) -> Result<Estimate> {
    Ok(evaluate_policy(policy, dynamics, cost, setup)?.measure)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub best: usize,
    pub best_theta: f64,
    pub table: Vec<PolicyEvaluation>,
}

/// Maximises `J̃` over a finite family on common random numbers; ties keep the lowest index.
pub fn grid_search<D: ControlledDynamics + ?Sized, P: ControlPolicy>(
    policies: &[P],
    dynamics: &D,
    cost: &CostSpec,
    setup: &ControlSetup,
) -> Result<SearchResult> {
    if policies.is_empty() {
        return Err(invalid("grid search needs at least one policy"));
    }
    let table: Vec<PolicyEvaluation> = policies.iter().map(|p| evaluate_policy(p, dynamics, cost, setup)).collect::<Result<_>>()?;
    let mut best = 0;
    for (k, row) in table.iter().enumerate().skip(1) {
        if row.measure.mean > table[best].measure.mean {
            best = k;
        }
    }
    Ok(SearchResult { best, best_theta: table[best].theta, table })
}

pub fn write_control_csv<W: Write>(rows: &[PolicyEvaluation], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["theta", "J_direct", "J_measure", "stderr_direct", "stderr_measure"])?;
    for r in rows {
        w.write_record([
            r.theta.to_string(),
            format!("{:e}", r.direct.mean),
            format!("{:e}", r.measure.mean),
            format!("{:e}", r.direct.stderr),
            format!("{:e}", r.measure.stderr),
        ])?;
    }
    w.flush()?;
    Ok(())
}
