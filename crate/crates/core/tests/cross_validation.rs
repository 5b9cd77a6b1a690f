//! Cross-module checks: the same quantity computed through two independent routes.

use approx::assert_relative_eq;
use sheetlab::chaos::{closed_form_solution, limit_solution, simulate_particle_system, ChaosConfig};
use sheetlab::control::{evaluate_policy, ConstantPolicy, ControlSetup, CostSpec, LinearControlled};
use sheetlab::fokker_planck::weak_residual;
use sheetlab::ito_check::{ito_terms, ExpFourier};
use sheetlab::measures::fourier;
use sheetlab::noise::{double_ito_integral, ito_integral, CellNoise, SheetPath};
use sheetlab::plane::rect_integral;
use sheetlab::series::f_series;
use sheetlab::solver::{solve_conditional_mkv_on, solve_goursat, CoefficientField, ConditionalOu, NoiseBank};
use sheetlab::stats::{derive_seed, Estimate};
use sheetlab::{Grid, Point};

fn p(t: f64, x: f64) -> Point {
    Point::new(t, x).unwrap()
}

#[test]
fn goursat_with_constant_coefficients_is_an_ito_integral() {
    let g = Grid::unit(12).unwrap();
    let s = SheetPath::sample(g, 2, 1).unwrap();
    let c = CoefficientField::constant(vec![0.4], vec![0.7, -0.2]).unwrap();
    let field = solve_goursat(&c, &[1.0], &s, None).unwrap();
    let z = p(0.75, 0.5);
    let drift = rect_integral(&g, z, |_, _| 0.4).unwrap();
    let noise = 0.7 * ito_integral(|_, _| 1.0, &s, 0, z).unwrap() - 0.2 * ito_integral(|_, _| 1.0, &s, 1, z).unwrap();
    assert_relative_eq!(field.at(z).unwrap()[0], 1.0 + drift + noise, epsilon = 1e-13);
}

#[test]
fn double_integral_of_product_splits_off_the_diagonal() {
    // Σ_{c≠c'} ΔB_c ΔB_c' = B(z)² − Σ_c ΔB_c²
    let g = Grid::unit(6).unwrap();
    let s = SheetPath::sample(g, 1, 4).unwrap();
    let z = p(1.0, 1.0);
    let double = double_ito_integral(|_, _| 1.0, &s, 0, 0, z).unwrap();
    let diag: f64 = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| s.increment(0, i, j).powi(2)).sum();
    assert_relative_eq!(double, s.value(0, 6, 6).powi(2) - diag, epsilon = 1e-12);
}

#[test]
fn weak_residual_of_one_particle_is_the_ito_residual() {
    let g = Grid::unit(8).unwrap();
    // a silent private channel: the particle then carries no noise the weak form averages out
    let ou = ConditionalOu::new(0.0, 0.8, vec![0.5, 0.0]).unwrap();
    let bank = NoiseBank::sample(g, 2, 1, 3).unwrap();
    let ens = solve_conditional_mkv_on(&ou, &[0.2], &bank).unwrap();
    let z = p(1.0, 1.0);
    let w = 1.3;
    let fp = weak_residual(&ens, &ou, &[w], z).unwrap();
    let field = ens.particle_field(0);
    let ito = ito_terms(&ExpFourier { w: vec![w] }, &ou, &field, &bank.particle_noise(0), z, None).unwrap();
    let rhs: num_complex::Complex64 = fp.terms.iter().sum();
    assert!((rhs - ito.sum).norm() < 1e-10, "{rhs} vs {}", ito.sum);
    assert!((fp.lhs - ito.lhs).norm() < 1e-12);
    let mu = ens.measure_at(z).unwrap();
    assert_relative_eq!(fourier(&mu, &[w]).unwrap().re, (-w * field.at(z).unwrap()[0]).cos(), epsilon = 1e-14);
}

#[test]
fn uncontrolled_dynamics_match_the_plain_solver() {
    let g = Grid::unit(8).unwrap();
    let setup = ControlSetup { y0: vec![0.5], particles: 7, grid: g, replicates: 3, seed: 9 };
    let controlled = LinearControlled::new(0.4, 1.0, 2.0, vec![0.6, 0.8]).unwrap();
    let cost = CostSpec::new(|_, y, _| y[0], |y| 2.0 * y[0], p(1.0, 1.0));
    let e = evaluate_policy(&ConstantPolicy { value: 0.0 }, &controlled, &cost, &setup).unwrap();
    let ou = ConditionalOu::new(0.4, 1.0, vec![0.6, 0.8]).unwrap();
    let by_hand: Vec<f64> = (0..3)
        .map(|r| {
            let ens = solve_conditional_mkv_on(&ou, &[0.5], &setup.bank(2, r).unwrap()).unwrap();
            let running = rect_integral(&g, p(1.0, 1.0), |i, j| ens.measure(i, j).mean()[0]).unwrap();
            running + 2.0 * ens.measure(8, 8).mean()[0]
        })
        .collect();
    assert_relative_eq!(e.direct.mean, Estimate::from_samples(&by_hand).mean, epsilon = 1e-12);
}

#[test]
fn chaos_routes_agree_for_one_unit_particle() {
    // N = 1, a = 1: the drift vanishes, so simulation, closed form and y + B coincide
    let g = Grid::unit(10).unwrap();
    let cfg = ChaosConfig::new(vec![1.0], 0.3, g, 5, 0.5).unwrap();
    let s = cfg.sheet().unwrap();
    let sim = simulate_particle_system(&cfg, &s).unwrap();
    let closed = closed_form_solution(&cfg, &s).unwrap();
    for (i, j) in [(10, 10), (3, 7), (0, 4)] {
        assert_relative_eq!(sim.get(i, j)[0], 0.3 + s.value(0, i, j), epsilon = 1e-13);
        assert_relative_eq!(closed.get(i, j)[0], 0.3 + s.value(0, i, j), epsilon = 1e-13);
    }
}

#[test]
fn limit_solution_mean_follows_the_series() {
    let g = Grid::unit(8).unwrap();
    let a = 0.4;
    let vals: Vec<f64> =
        (0..4000u64).map(|r| limit_solution(a, 1.0, &SheetPath::sample(g, 1, derive_seed(12, r)).unwrap()).unwrap().get(8, 8)[0]).collect();
    let e = Estimate::from_samples(&vals);
    assert!(e.within(f_series(a - 1.0).unwrap(), 3.0), "{e:?}");
}

#[test]
fn sheets_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sheet.bin");
    let s = SheetPath::sample(Grid::new(p(2.0, 0.5), 6, 3).unwrap(), 3, 77).unwrap();
    s.save(&path).unwrap();
    assert_eq!(SheetPath::load(&path).unwrap(), s);
    let mut buf = Vec::new();
    let field = solve_goursat(&CoefficientField::constant(vec![0.1, 0.2, 0.3], vec![1.0; 9]).unwrap(), &[0.0; 3], &s, None).unwrap();
    field.write_line_csv(sheetlab::solver::Line::FixedT(6), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("t,x,y1,y2,y3"));
}
