//! The named experiments. Each returns a table whose `pass` column encodes its thresholds.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sheetlab::chaos::{closed_form_gap_study, remainder_variance, ADistribution};
use sheetlab::control::{evaluate_policy, grid_search, ControlSetup, CostSpec, LinearControlled, MeanFeedback};
use sheetlab::fokker_planck::{quarter_identity_check, residual_study, FrequencyGrid};
use sheetlab::ito_check::{ito_refinement_study, Cosine1D, Linear, Polynomial1D, TestFunction};
use sheetlab::measures::{est_inequality_check, m_dist_sq, CoupledPair};
use sheetlab::noise::SheetPath;
use sheetlab::series::{diagnose_partial_sums, find_r0, picard_series_partial_sums};
use sheetlab::solver::{picard_solve, CoefficientField, ConditionalOu};
use sheetlab::stats::{derive_seed, stream_rng, Estimate};
use sheetlab::{EmpiricalMeasure, Grid, MQuadrature, Point};

use crate::config::{ConfigError, ExperimentConfig};
use crate::table::{num, Table};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numerical(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

impl From<sheetlab::Error> for RunError {
    fn from(e: sheetlab::Error) -> Self {
        use sheetlab::Error as E;
        match e {
            E::OffGrid { .. }
            | E::OutsideHorizon { .. }
            | E::DimensionMismatch { .. }
            | E::InvalidArgument(_)
            | E::DerivativeOrder { .. } => Self::Config(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

type Run = Result<Table, RunError>;

fn point(t: f64, x: f64) -> Result<Point, RunError> {
    Ok(Point::new(t, x)?)
}

pub fn run(cfg: &ExperimentConfig) -> Run {
    match cfg.experiment.as_str() {
        "sheet-stats" => sheet_stats(cfg),
        "ito-check" => ito_check(cfg),
        "est-check" => est_check(cfg),
        "chaos-rate" => chaos_rate(cfg),
        "chaos-closed-form" => chaos_closed_form(cfg),
        "picard" => picard(cfg),
        "fokker-planck" => fokker_planck(cfg),
        "lemma61" => quarter_identities(cfg),
        "control-equiv" => control_equiv(cfg),
        "control-search" => control_search(cfg),
        other => Err(RunError::Config(format!("unknown experiment '{other}'"))),
    }
}

fn sheet_stats(cfg: &ExperimentConfig) -> Run {
    let n: usize = cfg.get("n")?;
    let reps: usize = cfg.get("reps")?;
    let seed: u64 = cfg.get("seed")?;
    let g = Grid::unit(n)?;
    let a = g.node_index(point(0.5, 1.0)?)?;
    let b = g.node_index(point(1.0, 0.5)?)?;
    let draws: Vec<(f64, f64)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let s = SheetPath::sample(g, 1, derive_seed(seed, r))?;
            Ok((s.value(0, n, n).powi(2), s.value(0, a.0, a.1) * s.value(0, b.0, b.1)))
        })
        .collect::<Result<_, sheetlab::Error>>()?;
    let var = Estimate::from_samples(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
    let cov = Estimate::from_samples(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
    let mut t = Table::new(&["quantity", "estimate", "stderr", "target"]);
    t.push(vec!["var_B_1_1".into(), num(var.mean), num(var.stderr), num(1.0)], (0.95..=1.05).contains(&var.mean));
    t.push(vec!["cov_B_0.5_1_B_1_0.5".into(), num(cov.mean), num(cov.stderr), num(0.25)], cov.within(0.25, 3.0));
    Ok(t)
}

fn ito_check(cfg: &ExperimentConfig) -> Run {
    let f: Box<dyn TestFunction> = match cfg.raw("f") {
        "square" => Box::new(Polynomial1D::monomial(2)),
        "cube" => Box::new(Polynomial1D::monomial(3)),
        "linear" => Box::new(Linear { coef: vec![1.0] }),
        "cos" => Box::new(Cosine1D { w: 1.0 }),
        other => return Err(RunError::Config(format!("f must be square, cube, linear or cos, got '{other}'"))),
    };
    let grids: Vec<Grid> = cfg.list::<usize>("grids")?.into_iter().map(Grid::unit).collect::<Result<_, _>>()?;
    let min_ratio: f64 = cfg.get("min_ratio")?;
    let bm = CoefficientField::constant(vec![0.0], vec![1.0])?;
    let st = ito_refinement_study(f.as_ref(), &bm, &[0.0], point(1.0, 1.0)?, &grids, cfg.get("reps")?, cfg.get("seed")?)?;
    let linear = cfg.raw("f") == "linear";
    let mut t = Table::new(&["nt", "nx", "mean_residual", "stderr", "ratio"]);
    for (k, row) in st.rows.iter().enumerate() {
        let ratio = (k > 0).then(|| st.rows[k - 1].mean_residual / row.mean_residual);
        let pass = if linear { row.mean_residual < 1e-10 } else { ratio.is_none_or(|r| r >= min_ratio) };
        t.push(
            vec![row.nt.to_string(), row.nx.to_string(), num(row.mean_residual), num(row.stderr), ratio.map(num).unwrap_or_default()],
            pass,
        );
    }
    Ok(t)
}

fn est_check(cfg: &ExperimentConfig) -> Run {
    let pairs: usize = cfg.get("pairs")?;
    let atoms: usize = cfg.get("atoms")?;
    let shift: f64 = cfg.get("shift")?;
    let spread: f64 = cfg.get("spread")?;
    let slack: f64 = cfg.get("slack")?;
    let mut rng = stream_rng(cfg.get("seed")?, 0);
    let coupled: Vec<CoupledPair<f64>> = (0..pairs)
        .map(|_| {
            let (mut a, mut b) = (Vec::with_capacity(atoms), Vec::with_capacity(atoms));
            for _ in 0..atoms {
                let y: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                a.push(y);
                b.push(y + spread * e + shift);
            }
            CoupledPair::new(EmpiricalMeasure::from_scalars(&a)?, EmpiricalMeasure::from_scalars(&b)?)
        })
        .collect::<Result<_, _>>()?;
    let quad = MQuadrature::new(1, cfg.get("order")?)?;
    let rep = est_inequality_check(&coupled, &quad, slack)?;
    let mut t = Table::new(&["case", "m_dist_sq", "bound", "analytic"]);
    t.push(vec!["gaussian_pairs".into(), num(rep.lhs), num(rep.rhs * (1.0 + slack)), String::new()], rep.holds);
    let fine = MQuadrature::new(1, cfg.get("delta_order")?)?;
    for c in [0.1, 1.0, 10.0] {
        let (d0, dc) = (EmpiricalMeasure::dirac(&[0.0])?, EmpiricalMeasure::dirac(&[c])?);
        let dist = m_dist_sq(&d0, &dc, &fine)?;
        let exact = 2.0 * PI.sqrt() * (1.0 - (-c * c / 4.0f64).exp());
        let holds = est_inequality_check(&[CoupledPair::new(d0, dc)?], &fine, slack)?.holds;
        t.push(
            vec![format!("delta_0_vs_{c}"), num(dist), num(PI * c * c * (1.0 + slack)), num(exact)],
            holds && (dist - exact).abs() < 1e-6,
        );
    }
    Ok(t)
}

fn chaos_rate(cfg: &ExperimentConfig) -> Run {
    let a: f64 = cfg.get("a")?;
    let spread: f64 = cfg.get("a_spread")?;
    let dist = if spread > 0.0 { ADistribution::Uniform { lo: a - spread, hi: a + spread } } else { ADistribution::Constant(a) };
    let g = Grid::unit(cfg.get("n")?)?;
    let z = point(cfg.get("t")?, cfg.get("x")?)?;
    let (reps, seed, q): (usize, u64, f64) = (cfg.get("reps")?, cfg.get("seed")?, cfg.get("q")?);
    let mut t = Table::new(&["N", "estimate", "stderr", "ratio"]);
    let mut prev: Option<f64> = None;
    for n in cfg.list::<usize>("particles")? {
        let e = remainder_variance(n, dist, q, g, z, reps, seed)?;
        let ratio = prev.map(|p| p / e.mean);
        t.push(
            vec![n.to_string(), num(e.mean), num(e.stderr), ratio.map(num).unwrap_or_default()],
            ratio.is_none_or(|r| (1.4..=2.8).contains(&r)),
        );
        prev = Some(e.mean);
    }
    Ok(t)
}

fn chaos_closed_form(cfg: &ExperimentConfig) -> Run {
    let sizes: Vec<usize> = cfg.list("grids")?;
    let grids: Vec<Grid> = sizes.iter().map(|&n| Grid::unit(n)).collect::<Result<_, _>>()?;
    let a = vec![cfg.get::<f64>("a")?; cfg.get("particles")?];
    let gaps = closed_form_gap_study(&a, cfg.get("y0")?, &grids, cfg.get("reps")?, cfg.get("seed")?, 1e-3)?;
    let mut t = Table::new(&["n", "sup_rms_gap"]);
    for (k, (n, gap)) in sizes.iter().zip(&gaps).enumerate() {
        t.push(vec![n.to_string(), num(*gap)], k == 0 || *gap < gaps[k - 1]);
    }
    Ok(t)
}

fn picard(cfg: &ExperimentConfig) -> Run {
    let r0: f64 = find_r0(1e-12)?;
    let k = cfg.get::<f64>("scale")? * r0.sqrt();
    let ou = ConditionalOu::new(k / 2.0, k / 2.0, vec![0.5, 0.5])?;
    let rep = picard_solve(&ou, &[1.0], cfg.get("m")?, Grid::unit(cfg.get("n")?)?, cfg.get("seed")?, cfg.get("max_iter")?, 1e-14)?;
    let mut t = Table::new(&["kind", "index", "value", "ratio"]);
    for (i, gap) in rep.gaps.iter().enumerate() {
        let ratio = (i > 0).then(|| gap / rep.gaps[i - 1]);
        let pass = !rep.diverged && (i < 2 || ratio.is_some_and(|r| r < 1.0));
        t.push(vec!["gap".into(), i.to_string(), num(*gap), ratio.map(num).unwrap_or_default()], pass);
    }
    let terms: usize = cfg.get("terms")?;
    for (label, s, want_divergence) in [("series_0.9", 0.9, false), ("series_1.2", 1.2, true)] {
        let d = diagnose_partial_sums(&picard_series_partial_sums(s * r0.sqrt(), 1.0, terms)?, 1e6);
        let index = d.first_exceed.map(|n| n.to_string()).unwrap_or_default();
        t.push(vec![label.into(), index, num(d.last_difference), num(d.tail_ratio)], d.diverged == want_divergence);
    }
    Ok(t)
}

fn fokker_planck(cfg: &ExperimentConfig) -> Run {
    let ou = ConditionalOu::new(cfg.get("a")?, cfg.get("kappa")?, vec![cfg.get("sigma1")?, cfg.get("sigma2")?])?;
    let y0 = [cfg.get::<f64>("y0")?];
    let coarse = Grid::unit(cfg.get("n")?)?;
    let fine = Grid::unit(cfg.get("fine")?)?;
    let freqs = FrequencyGrid::symmetric_1d(&cfg.list::<f64>("freqs")?)?;
    let z = point(1.0, 1.0)?;
    let (reps, seed): (usize, u64) = (cfg.get("reps")?, cfg.get("seed")?);
    let stages = [(cfg.get::<usize>("m_small")?, coarse), (cfg.get("m")?, coarse), (cfg.get("m")?, fine)];
    let results: Vec<_> =
        stages.iter().map(|&(m, g)| residual_study(&ou, &y0, m, g, fine, &freqs, z, reps, seed)).collect::<Result<_, _>>()?;
    let mut t = Table::new(&["stage", "particles", "nt", "w", "mean_abs", "stderr", "mean_re", "mean_im"]);
    for (s, rows) in results.iter().enumerate() {
        for (k, row) in rows.iter().enumerate() {
            let at_origin = row.w.iter().all(|v| *v == 0.0);
            let pass = if at_origin { row.mean_abs == 0.0 } else { s == 0 || row.mean_abs < results[s - 1][k].mean_abs };
            t.push(
                vec![
                    s.to_string(),
                    row.particles.to_string(),
                    row.nt.to_string(),
                    num(row.w[0]),
                    num(row.mean_abs),
                    num(row.stderr),
                    num(row.mean_re),
                    num(row.mean_im),
                ],
                pass,
            );
        }
    }
    Ok(t)
}

fn quarter_identities(cfg: &ExperimentConfig) -> Run {
    let cells: usize = cfg.get("cells")?;
    let h: f64 = cfg.get("h")?;
    let z = point(1.0, 1.0)?;
    let mut t = Table::new(&["case", "lhs", "rhs", "residual", "tolerance"]);
    let constants = quarter_identity_check(|_| 1.0, |_| 1.0, z, cells, h)?;
    let poly = quarter_identity_check(|q| q.t, |q| q.x, z, cells, h)?;
    for (name, r, tol) in [("constants", constants, cfg.get::<f64>("tol_const")?), ("polynomial", poly, cfg.get("tol_poly")?)] {
        t.push(vec![name.into(), num(r.lhs), num(r.rhs), num(r.residual), num(tol)], r.residual < tol);
    }
    Ok(t)
}

struct ControlCase {
    dynamics: LinearControlled,
    cost: CostSpec,
    first: ControlSetup,
    second: ControlSetup,
    policies: Vec<MeanFeedback>,
}

fn control_case(cfg: &ExperimentConfig) -> Result<ControlCase, RunError> {
    let dynamics = LinearControlled::new(cfg.get("a")?, cfg.get("kappa")?, cfg.get("b")?, vec![cfg.get("sigma1")?, cfg.get("sigma2")?])?;
    let horizon = point(1.0, 1.0)?;
    let lambda: f64 = cfg.get("lambda")?;
    let cost = match cfg.raw("cost") {
        "lq" => CostSpec::lq(lambda, horizon),
        "tracking" => CostSpec::tracking(cfg.get("target")?, lambda, horizon),
        other => return Err(RunError::Config(format!("cost must be lq or tracking, got '{other}'"))),
    };
    let first = ControlSetup {
        y0: vec![cfg.get("y0")?],
        particles: cfg.get("m")?,
        grid: Grid::unit(cfg.get("n")?)?,
        replicates: cfg.get("reps")?,
        seed: cfg.get("seed")?,
    };
    let second = ControlSetup { seed: cfg.get("seed2")?, ..first.clone() };
    let policies = cfg.list::<f64>("thetas")?.into_iter().map(|theta| MeanFeedback { theta, dim: 1 }).collect();
    Ok(ControlCase { dynamics, cost, first, second, policies })
}

fn control_equiv(cfg: &ExperimentConfig) -> Run {
    let c = control_case(cfg)?;
    let mut t = Table::new(&["theta", "J_direct", "J_measure", "stderr_direct", "stderr_measure", "J_measure_indep", "stderr_indep"]);
    for p in &c.policies {
        let a = evaluate_policy(p, &c.dynamics, &c.cost, &c.first)?;
        let b = evaluate_policy(p, &c.dynamics, &c.cost, &c.second)?;
        let cross = (a.direct.mean - b.measure.mean).abs() <= 3.0 * a.direct.stderr.hypot(b.measure.stderr);
        t.push(
            vec![
                num(p.theta),
                num(a.direct.mean),
                num(a.measure.mean),
                num(a.direct.stderr),
                num(a.measure.stderr),
                num(b.measure.mean),
                num(b.measure.stderr),
            ],
            a.agrees(3.0) && cross,
        );
    }
    Ok(t)
}

fn control_search(cfg: &ExperimentConfig) -> Run {
    let c = control_case(cfg)?;
    let first = grid_search(&c.policies, &c.dynamics, &c.cost, &c.first)?;
    let second = grid_search(&c.policies, &c.dynamics, &c.cost, &c.second)?;
    let stable = first.best == second.best;
    let mut t = Table::new(&["seed_set", "theta", "J_direct", "J_measure", "stderr_direct", "stderr_measure", "best"]);
    for (set, res) in [(1, &first), (2, &second)] {
        for (k, row) in res.table.iter().enumerate() {
            t.push(
                vec![
                    set.to_string(),
                    num(row.theta),
                    num(row.direct.mean),
                    num(row.measure.mean),
                    num(row.direct.stderr),
                    num(row.measure.stderr),
                    (k == res.best).to_string(),
                ],
                stable,
            );
        }
    }
    Ok(t)
}
