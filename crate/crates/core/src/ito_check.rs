//! Term-by-term discrete check of the planar Itô formula for `f(Y(z)) − f(Y(0))`.
//!
//! With `A = ΔtΔx`, `s_c = β_c ΔB_c` and `Q_c = β_c β_cᵀ` for a cell `c`, the seven terms are
//!
//! * `T1 = Σ_c A ∇f·α_c`, `T2 = Σ_c ∇f·s_c`, `T3 = ½ Σ_c A D²f : Q_c` (read at `Y(c)`);
//! * over pairs `(c, c')` with `I(c ∧̄ c')`, tensors read at `Y(c ∨ c')`:
//!   `T4 = Σ_{c≠c'} D²f(s_c, s_c')`,
//!   `T5 = Σ A [D²f(s_c', α_c) + ½ D³f(s_c', Q_c)]`,
//!   `T6 = Σ A [D²f(s_c, α_c') + ½ D³f(s_c, Q_c')]`,
//!   `T7 = Σ A² [D²f(α_c', α_c) + ½ D³f(α_c', Q_c) + ½ D³f(α_c, Q_c') + ¼ D⁴f(Q_c', Q_c)]`.
//!
//! For cells `c = (i, j)`, `c' = (i', j')` in quarter order the join is node `(i', j)`, so
//! the pair sums factor through column prefixes (over `c`) and row prefixes (over `c'`)
//! at each join node and cost `O(cells)` instead of `O(cells²)`.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::noise::{CellNoise, SheetPath};
use crate::solver::{solve_goursat, Coefficients, StateField};
use crate::stats::{derive_seed, mean, std_error};
use crate::{EmpiricalMeasure, Grid, Point};

/// Smooth `f: ℝⁿ → ℂ` with analytic derivative tensors.
pub trait TestFunction: Sync {
    fn dim(&self) -> usize;

    /// Highest derivative order available.
    fn max_order(&self) -> usize;

    fn value(&self, y: &[f64]) -> Complex64;

    /// Writes the order-`k` derivative tensor, flattened row-major (`n^k` entries).
    fn derivative(&self, order: usize, y: &[f64], out: &mut [Complex64]);
}

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// `f(y) = c·y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub coef: Vec<f64>,
}

impl TestFunction for Linear {
    fn dim(&self) -> usize {
        self.coef.len()
    }
    fn max_order(&self) -> usize {
        usize::MAX
    }
    fn value(&self, y: &[f64]) -> Complex64 {
        c(self.coef.iter().zip(y).map(|(a, b)| a * b).sum())
    }
    fn derivative(&self, order: usize, _: &[f64], out: &mut [Complex64]) {
        out.fill(Complex64::default());
        if order == 1 {
            for (o, &a) in out.iter_mut().zip(&self.coef) {
                *o = c(a);
            }
        }
    }
}

/// A constant on ℝⁿ.
#[derive(Clone, Debug, PartialEq)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl TestFunction for Constant {
    fn dim(&self) -> usize {
        self.dim
    }
    fn max_order(&self) -> usize {
        usize::MAX
    }
    fn value(&self, _: &[f64]) -> Complex64 {
        c(self.value)
    }
    fn derivative(&self, _: usize, _: &[f64], out: &mut [Complex64]) {
        out.fill(Complex64::default());
    }
}

/// Scalar polynomial `Σ_k coef[k] y^k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial1D {
    pub coef: Vec<f64>,
}

impl Polynomial1D {
    pub fn monomial(degree: usize) -> Self {
        let mut coef = vec![0.0; degree + 1];
        coef[degree] = 1.0;
        Self { coef }
    }

    fn eval_derivative(&self, order: usize, y: f64) -> f64 {
        let shifted: Vec<f64> =
            self.coef.iter().enumerate().skip(order).map(|(k, &a)| a * (0..order).map(|r| (k - r) as f64).product::<f64>()).collect();
        shifted.iter().rev().fold(0.0, |s, &b| s * y + b)
    }
}

impl TestFunction for Polynomial1D {
    fn dim(&self) -> usize {
        1
    }
    fn max_order(&self) -> usize {
        usize::MAX
    }
    fn value(&self, y: &[f64]) -> Complex64 {
        c(self.eval_derivative(0, y[0]))
    }
    fn derivative(&self, order: usize, y: &[f64], out: &mut [Complex64]) {
        out[0] = c(self.eval_derivative(order, y[0]));
    }
}

/// `f(y) = cos(w y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine1D {
    pub w: f64,
}

impl TestFunction for Cosine1D {
    fn dim(&self) -> usize {
        1
    }
    fn max_order(&self) -> usize {
        usize::MAX
    }
    fn value(&self, y: &[f64]) -> Complex64 {
        c((self.w * y[0]).cos())
    }
    fn derivative(&self, order: usize, y: &[f64], out: &mut [Complex64]) {
        let (s, co) = (self.w * y[0]).sin_cos();
        let base = [co, -s, -co, s][order % 4];
        out[0] = c(base * self.w.powi(order as i32));
    }
}

/// `ψ(y) = exp(−i w·y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpFourier {
    pub w: Vec<f64>,
}

impl TestFunction for ExpFourier {
    fn dim(&self) -> usize {
        self.w.len()
    }
    fn max_order(&self) -> usize {
        usize::MAX
    }
    fn value(&self, y: &[f64]) -> Complex64 {
        let phase: f64 = self.w.iter().zip(y).map(|(a, b)| a * b).sum();
        Complex64::from_polar(1.0, -phase)
    }
    fn derivative(&self, order: usize, y: &[f64], out: &mut [Complex64]) {
        let n = self.w.len();
        let mut scale = self.value(y);
        for _ in 0..order {
            scale *= Complex64::new(0.0, -1.0);
        }
        for (idx, o) in out.iter_mut().enumerate() {
            let mut r = idx;
            let mut prod = 1.0;
            for _ in 0..order {
                prod *= self.w[r % n];
                r /= n;
            }
            *o = scale * prod;
        }
    }
}

/// The seven terms, their sum, `f(Y(z)) − f(Y(0))` and `|lhs − sum|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItoTermReport {
    pub terms: [Complex64; 7],
    pub sum: Complex64,
    pub lhs: Complex64,
    pub residual: f64,
}

/// Per-node derivative tensors of `f` along a state field.
struct Tensors {
    n: usize,
    d: [Vec<Complex64>; 4],
}

impl Tensors {
    fn new(f: &dyn TestFunction, field: &StateField, iz: usize, jz: usize) -> Self {
        let n = field.dim();
        let nodes = (iz + 1) * (jz + 1);
        let mut d: [Vec<Complex64>; 4] = Default::default();
        for (k, buf) in d.iter_mut().enumerate() {
            let len = n.pow(k as u32 + 1);
            buf.resize(nodes * len, Complex64::default());
            for i in 0..=iz {
                for j in 0..=jz {
                    let at = (i * (jz + 1) + j) * len;
                    f.derivative(k + 1, field.get(i, j), &mut buf[at..at + len]);
                }
            }
        }
        Self { n, d }
    }

    fn get(&self, order: usize, node: usize) -> &[Complex64] {
        let len = self.n.pow(order as u32);
        &self.d[order - 1][node * len..(node + 1) * len]
    }
}

fn dot1(d: &[Complex64], a: &[f64]) -> Complex64 {
    d.iter().zip(a).map(|(x, y)| x * y).sum()
}

/// `Σ d[k,l] a_k b_l` (also used for `D³(a, Q)` and `D⁴(Q, Q')` by flattening).
fn dot2(d: &[Complex64], a: &[f64], b: &[f64]) -> Complex64 {
    let nb = b.len();
    let mut acc = Complex64::default();
    for (k, &ak) in a.iter().enumerate() {
        if ak != 0.0 {
            acc += d[k * nb..(k + 1) * nb].iter().zip(b).map(|(x, y)| x * y).sum::<Complex64>() * ak;
        }
    }
    acc
}

/// Per-cell quantities `α A`, `s = βΔB`, `Q A` flattened to one record per cell.
struct CellData {
    n: usize,
    alpha: Vec<f64>,
    s: Vec<f64>,
    q: Vec<f64>,
}

impl CellData {
    fn width(&self) -> usize {
        2 * self.n + self.n * self.n
    }
}

/// Discrete Itô terms at `z` for a solved field.
///
/// `measures`, if the coefficients need one, holds one measure per grid node.
pub fn ito_terms<C: Coefficients + ?Sized>(
    f: &dyn TestFunction,
    coeffs: &C,
    field: &StateField,
    noise: &impl CellNoise,
    z: Point,
    measures: Option<&[EmpiricalMeasure]>,
) -> Result<ItoTermReport> {
    if f.max_order() < 4 {
        return Err(Error::DerivativeOrder { provided: f.max_order(), required: 4 });
    }
    let n = field.dim();
    if f.dim() != n || coeffs.state_dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: f.dim() });
    }
    if coeffs.channels() != noise.channels() {
        return Err(Error::DimensionMismatch { expected: coeffs.channels(), got: noise.channels() });
    }
    if field.grid() != noise.grid() {
        return Err(invalid("state field and noise live on different grids"));
    }
    if coeffs.depends_on_measure() && measures.is_none() {
        return Err(Error::MissingMeasure);
    }
    let grid = *field.grid();
    let (iz, jz) = grid.node_index(z)?;
    let m = coeffs.channels();
    let area = grid.cell_area();

    // per-cell α, s = βΔB, Q (row-major cells over R_z)
    let cd = {
        let mut cd = CellData { n, alpha: Vec::new(), s: Vec::new(), q: Vec::new() };
        let (mut a, mut b, mut db) = (vec![0.0; n], vec![0.0; n * m], vec![0.0; m]);
        for i in 0..iz {
            for j in 0..jz {
                let y = field.get(i, j);
                let mu = measures.map(|ms| &ms[grid.flat((i, j))]);
                coeffs.drift(grid.node(i, j), y, mu, &mut a);
                coeffs.diffusion(grid.node(i, j), y, mu, &mut b);
                for (ch, d) in db.iter_mut().enumerate() {
                    *d = noise.increment(ch, i, j);
                }
                cd.alpha.extend_from_slice(&a);
                for k in 0..n {
                    cd.s.push((0..m).map(|ch| b[k * m + ch] * db[ch]).sum());
                }
                for k in 0..n {
                    for l in 0..n {
                        cd.q.push((0..m).map(|ch| b[k * m + ch] * b[l * m + ch]).sum());
                    }
                }
            }
        }
        cd
    };
    let tensors = Tensors::new(f, field, iz, jz);
    let node = |i: usize, j: usize| i * (jz + 1) + j;
    let cell = |i: usize, j: usize| i * jz + j;

    let mut t = [Complex64::default(); 7];
    for i in 0..iz {
        for j in 0..jz {
            let k = cell(i, j);
            let (a, s, q) = (&cd.alpha[k * n..(k + 1) * n], &cd.s[k * n..(k + 1) * n], &cd.q[k * n * n..(k + 1) * n * n]);
            let v = node(i, j);
            t[0] += dot1(tensors.get(1, v), a) * area;
            t[1] += dot1(tensors.get(1, v), s);
            t[2] += dot1(tensors.get(2, v), q) * (0.5 * area);
        }
    }

    // prefix sums: col[I][J] = Σ_{i≤I} x(i, J), row[I][J] = Σ_{j≤J} x(I, j), record = (α, s, Q)
    let w = cd.width();
    let record = |k: usize, out: &mut [f64]| {
        out[..n].copy_from_slice(&cd.alpha[k * n..(k + 1) * n]);
        out[n..2 * n].copy_from_slice(&cd.s[k * n..(k + 1) * n]);
        out[2 * n..].copy_from_slice(&cd.q[k * n * n..(k + 1) * n * n]);
    };
    let mut col = vec![0.0; iz * jz * w];
    let mut row = vec![0.0; iz * jz * w];
    let mut tmp = vec![0.0; w];
    for i in 0..iz {
        for j in 0..jz {
            let k = cell(i, j);
            record(k, &mut tmp);
            for r in 0..w {
                let up = if i > 0 { col[cell(i - 1, j) * w + r] } else { 0.0 };
                let left = if j > 0 { row[cell(i, j - 1) * w + r] } else { 0.0 };
                col[k * w + r] = up + tmp[r];
                row[k * w + r] = left + tmp[r];
            }
        }
    }
    for big_i in 0..iz {
        for big_j in 0..jz {
            let k = cell(big_i, big_j);
            let v = node(big_i, big_j);
            let (d2, d3, d4) = (tensors.get(2, v), tensors.get(3, v), tensors.get(4, v));
            let cs = &col[k * w..(k + 1) * w];
            let rs = &row[k * w..(k + 1) * w];
            let (ca, cs_s, cq) = (&cs[..n], &cs[n..2 * n], &cs[2 * n..]);
            let (ra, rs_s, rq) = (&rs[..n], &rs[n..2 * n], &rs[2 * n..]);
            let s_diag = &cd.s[k * n..(k + 1) * n];
            t[3] += dot2(d2, cs_s, rs_s) - dot2(d2, s_diag, s_diag);
            t[4] += (dot2(d2, rs_s, ca) + dot2(d3, rs_s, cq) * 0.5) * area;
            t[5] += (dot2(d2, cs_s, ra) + dot2(d3, cs_s, rq) * 0.5) * area;
            t[6] += (dot2(d2, ra, ca) + dot2(d3, ra, cq) * 0.5 + dot2(d3, ca, rq) * 0.5 + dot2(d4, rq, cq) * 0.25) * (area * area);
        }
    }
    let sum: Complex64 = t.iter().sum();
    let lhs = f.value(field.get(iz, jz)) - f.value(field.get(0, 0));
    Ok(ItoTermReport { terms: t, sum, lhs, residual: (lhs - sum).norm() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementRow {
    pub nt: usize,
    pub nx: usize,
    pub mean_residual: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementStudy {
    pub rows: Vec<RefinementRow>,
    /// Mean residual strictly decreases from each grid to the next.
    pub monotone: bool,
}

impl RefinementStudy {
    /// Successive ratios `mean[k] / mean[k+1]`.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].mean_residual / w[1].mean_residual).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["nt", "nx", "mean_residual", "stderr"])?;
        for r in &self.rows {
            w.write_record([r.nt.to_string(), r.nx.to_string(), format!("{:e}", r.mean_residual), format!("{:e}", r.stderr)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean `|residual|` per grid over `replications` sheets. Each replicate samples one sheet on
/// the finest grid and restricts it to the coarser ones, so the grids see the same noise.
pub fn ito_refinement_study<C: Coefficients + ?Sized>(
    f: &dyn TestFunction,
    coeffs: &C,
    y0: &[f64],
    z: Point,
    grids: &[Grid],
    replications: usize,
    seed: u64,
) -> Result<RefinementStudy> {
    if grids.len() < 2 {
        return Err(invalid("refinement study needs at least two grids"));
    }
    if replications == 0 {
        return Err(invalid("refinement study needs at least one replication"));
    }
    if coeffs.depends_on_measure() {
        return Err(Error::MissingMeasure);
    }
    let finest = *grids.last().expect("nonempty");
    let mut factors = Vec::with_capacity(grids.len());
    for g in grids {
        if g.horizon() != finest.horizon() || !finest.nt().is_multiple_of(g.nt()) || !finest.nx().is_multiple_of(g.nx()) {
            return Err(invalid("grids must share the horizon and nest into the last grid"));
        }
        let (ft, fx) = (finest.nt() / g.nt(), finest.nx() / g.nx());
        if ft != fx {
            return Err(invalid("grids must refine both axes by the same factor"));
        }
        factors.push(ft);
    }
    let per_rep: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let sheet = SheetPath::sample(finest, coeffs.channels(), derive_seed(seed, r as u64))?;
            factors
                .iter()
                .map(|&fac| {
                    let s = sheet.coarsen(fac)?;
                    let field = solve_goursat(coeffs, y0, &s, None)?;
                    Ok(ito_terms(f, coeffs, &field, &s, z, None)?.residual)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<RefinementRow> = grids
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let col: Vec<f64> = per_rep.iter().map(|r| r[k]).collect();
            RefinementRow { nt: g.nt(), nx: g.nx(), mean_residual: mean(&col), stderr: std_error(&col) }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].mean_residual < w[0].mean_residual);
    Ok(RefinementStudy { rows, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{double_ito_integral, ito_integral};
    use crate::plane::{double_rect_integral, quarter_indicator_index, rect_integral, sup_join};
    use crate::solver::{CoefficientField, ConditionalOu};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p(t: f64, x: f64) -> Point {
        Point::new(t, x).unwrap()
    }

    fn bm() -> CoefficientField {
        CoefficientField::constant(vec![0.0], vec![1.0]).unwrap()
    }

    fn ou() -> CoefficientField {
        CoefficientField::new(1, 1, |_, y, _, o| o[0] = -y[0], |_, _, _, o| o[0] = 0.8).unwrap()
    }

    /// Depends on state in drift and diffusion, two channels.
    fn nonlinear2() -> CoefficientField {
        CoefficientField::new(
            2,
            2,
            |z, y, _, o| {
                o[0] = -0.5 * y[0] + 0.3 * y[1];
                o[1] = z.t - 0.2 * y[1] * y[0];
            },
            |_, y, _, o| {
                o.copy_from_slice(&[0.6, 0.1 * y[1], 0.2, 0.4 + 0.1 * y[0].cos()]);
            },
        )
        .unwrap()
    }

    #[test]
    fn derivative_tensors() {
        let poly = Polynomial1D { coef: vec![1.0, -2.0, 0.5, 3.0] };
        let mut o = [Complex64::default()];
        poly.derivative(1, &[2.0], &mut o);
        assert_relative_eq!(o[0].re, -2.0 + 2.0 + 36.0);
        poly.derivative(3, &[2.0], &mut o);
        assert_relative_eq!(o[0].re, 18.0);
        poly.derivative(4, &[2.0], &mut o);
        assert_eq!(o[0].re, 0.0);
        assert_relative_eq!(poly.value(&[2.0]).re, 1.0 - 4.0 + 2.0 + 24.0);

        let cosf = Cosine1D { w: 1.5 };
        cosf.derivative(2, &[0.3], &mut o);
        assert_relative_eq!(o[0].re, -2.25 * (0.45f64).cos(), epsilon = 1e-15);

        let e = ExpFourier { w: vec![1.0, -2.0] };
        let y = [0.3, 0.1];
        let mut d2 = [Complex64::default(); 4];
        e.derivative(2, &y, &mut d2);
        let v = e.value(&y);
        assert_relative_eq!((d2[1] - (-v * (-2.0))).norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!((d2[3] - (-v * 4.0)).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_f_is_exact() {
        for seed in 0..20 {
            let g = Grid::unit(8).unwrap();
            let s = SheetPath::sample(g, 2, seed).unwrap();
            let c = nonlinear2();
            let field = solve_goursat(&c, &[0.3, -0.1], &s, None).unwrap();
            let lin = Linear { coef: vec![1.3, -0.7] };
            let r = ito_terms(&lin, &c, &field, &s, p(1.0, 0.75), None).unwrap();
            assert!(r.residual < 1e-10, "{r:?}");
            for k in 2..7 {
                assert_eq!(r.terms[k], Complex64::default());
            }
        }
    }

    #[test]
    fn constant_f_gives_zero() {
        let g = Grid::unit(6).unwrap();
        let s = SheetPath::sample(g, 1, 2).unwrap();
        let field = solve_goursat(&ou(), &[1.0], &s, None).unwrap();
        let r = ito_terms(&Constant { dim: 1, value: 4.0 }, &ou(), &field, &s, p(1.0, 1.0), None).unwrap();
        assert_eq!(r.lhs, Complex64::default());
        assert!(r.terms.iter().all(|t| *t == Complex64::default()));
    }

    #[test]
    fn derivative_order_is_checked() {
        struct Short;
        impl TestFunction for Short {
            fn dim(&self) -> usize {
                1
            }
            fn max_order(&self) -> usize {
                2
            }
            fn value(&self, _: &[f64]) -> Complex64 {
                Complex64::default()
            }
            fn derivative(&self, _: usize, _: &[f64], out: &mut [Complex64]) {
                out.fill(Complex64::default());
            }
        }
        let g = Grid::unit(4).unwrap();
        let s = SheetPath::sample(g, 1, 2).unwrap();
        let field = solve_goursat(&bm(), &[0.0], &s, None).unwrap();
        assert!(matches!(
            ito_terms(&Short, &bm(), &field, &s, p(1.0, 1.0), None),
            Err(Error::DerivativeOrder { provided: 2, required: 4 })
        ));
    }

    /// Brute-force evaluation of the seven terms with the generic plane/noise integrators.
    fn brute_terms(f: &dyn TestFunction, coef: &CoefficientField, field: &StateField, s: &SheetPath, z: Point) -> [Complex64; 7] {
        assert_eq!(field.dim(), 1);
        let g = *field.grid();
        let at = |i: usize, j: usize| -> (f64, f64) {
            let (mut a, mut b) = ([0.0], [0.0]);
            coef.drift(g.node(i, j), field.get(i, j), None, &mut a);
            coef.diffusion(g.node(i, j), field.get(i, j), None, &mut b);
            (a[0], b[0])
        };
        let d = |k: usize, i: usize, j: usize| {
            let mut o = [Complex64::default()];
            f.derivative(k, field.get(i, j), &mut o);
            o[0]
        };
        let join = |a: (usize, usize), b: (usize, usize)| {
            let v = sup_join(g.node(a.0, a.1), g.node(b.0, b.1));
            g.node_index(v).unwrap()
        };
        let ind = |a, b| if quarter_indicator_index(a, b) { 1.0 } else { 0.0 };
        let dz = |k: usize, a, b| {
            let v = join(a, b);
            d(k, v.0, v.1)
        };
        let re_im = |h: &dyn Fn(usize, usize) -> Complex64, noise: bool| -> Complex64 {
            let re = |i, j| h(i, j).re;
            let im = |i, j| h(i, j).im;
            if noise {
                Complex64::new(ito_integral(re, s, 0, z).unwrap(), ito_integral(im, s, 0, z).unwrap())
            } else {
                Complex64::new(rect_integral(&g, z, re).unwrap(), rect_integral(&g, z, im).unwrap())
            }
        };
        type Pair = (usize, usize);
        let pair_rect = |h: &dyn Fn(Pair, Pair) -> Complex64| {
            Complex64::new(double_rect_integral(&g, z, |a, b| h(a, b).re).unwrap(), double_rect_integral(&g, z, |a, b| h(a, b).im).unwrap())
        };
        // mixed: Σ_c Σ_c' h(c, c') A ΔB(c') (dζ B(dζ')), by brute force
        let (iz, jz) = g.node_index(z).unwrap();
        let cells: Vec<Pair> = (0..iz).flat_map(|i| (0..jz).map(move |j| (i, j))).collect();
        let mixed = |h: &dyn Fn(Pair, Pair) -> Complex64, noise_on_second: bool| {
            let mut acc = Complex64::default();
            for &a in &cells {
                for &b in &cells {
                    let db = if noise_on_second { s.increment(0, b.0, b.1) } else { s.increment(0, a.0, a.1) };
                    acc += h(a, b) * g.cell_area() * db;
                }
            }
            acc
        };
        let t1 = re_im(&|i, j| d(1, i, j) * at(i, j).0, false);
        let t2 = re_im(&|i, j| d(1, i, j) * at(i, j).1, true);
        let t3 = re_im(&|i, j| d(2, i, j) * (0.5 * at(i, j).1.powi(2)), false);
        let t4 = Complex64::new(
            double_ito_integral(|a, b| (ind(a, b) * dz(2, a, b) * at(a.0, a.1).1 * at(b.0, b.1).1).re, s, 0, 0, z).unwrap(),
            double_ito_integral(|a, b| (ind(a, b) * dz(2, a, b) * at(a.0, a.1).1 * at(b.0, b.1).1).im, s, 0, 0, z).unwrap(),
        );
        let t5 = mixed(
            &|a, b| {
                let (aa, ba) = at(a.0, a.1);
                let bb = at(b.0, b.1).1;
                ind(a, b) * (dz(2, a, b) * aa * bb + dz(3, a, b) * (0.5 * ba * ba * bb))
            },
            true,
        );
        let t6 = mixed(
            &|a, b| {
                let ba = at(a.0, a.1).1;
                let (ab, bb) = at(b.0, b.1);
                ind(a, b) * (dz(2, a, b) * ba * ab + dz(3, a, b) * (0.5 * ba * bb * bb))
            },
            false,
        );
        let t7 = pair_rect(&|a, b| {
            let (aa, ba) = at(a.0, a.1);
            let (ab, bb) = at(b.0, b.1);
            ind(a, b)
                * (dz(2, a, b) * (aa * ab)
                    + dz(3, a, b) * (0.5 * ab * ba * ba + 0.5 * aa * bb * bb)
                    + dz(4, a, b) * (0.25 * ba * ba * bb * bb))
        });
        [t1, t2, t3, t4, t5, t6, t7]
    }

    #[test]
    fn fused_terms_match_brute_force() {
        let g = Grid::new(p(1.0, 0.8), 5, 4).unwrap();
        let c = CoefficientField::new(1, 1, |z, y, _, o| o[0] = 0.5 - y[0] + z.x, |_, y, _, o| o[0] = 0.7 + 0.3 * y[0].sin()).unwrap();
        let f = Polynomial1D { coef: vec![0.0, 0.3, -1.0, 0.5, 0.25] };
        for seed in 0..3 {
            let s = SheetPath::sample(g, 1, seed).unwrap();
            let field = solve_goursat(&c, &[0.2], &s, None).unwrap();
            for z in [p(1.0, 0.8), p(0.6, 0.4)] {
                let fast = ito_terms(&f, &c, &field, &s, z, None).unwrap();
                let brute = brute_terms(&f, &c, &field, &s, z);
                for (k, (a, b)) in fast.terms.iter().zip(&brute).enumerate() {
                    assert!((a - b).norm() < 1e-12, "term {k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn square_of_brownian_sheet_refines() {
        let grids: Vec<Grid> = [4, 8, 16].iter().map(|&n| Grid::unit(n).unwrap()).collect();
        let st = ito_refinement_study(&Polynomial1D::monomial(2), &bm(), &[0.0], p(1.0, 1.0), &grids, 200, 1).unwrap();
        assert!(st.monotone, "{st:?}");
        assert!(st.ratios().iter().all(|&r| r >= 1.5), "{:?}", st.ratios());
    }

    #[test]
    fn cosine_with_ou_refines() {
        let grids: Vec<Grid> = [4, 8, 16].iter().map(|&n| Grid::unit(n).unwrap()).collect();
        let st = ito_refinement_study(&Cosine1D { w: 1.0 }, &ou(), &[0.5], p(1.0, 1.0), &grids, 200, 3).unwrap();
        for w in st.rows.windows(2) {
            assert!(w[1].mean_residual < w[0].mean_residual + 2.0 * w[1].stderr.hypot(w[0].stderr), "{st:?}");
        }
        let lin = ito_refinement_study(&Linear { coef: vec![2.0] }, &ou(), &[0.5], p(1.0, 1.0), &grids, 5, 3).unwrap();
        assert!(lin.rows.iter().all(|r| r.mean_residual < 1e-10));
        let mut buf = Vec::new();
        lin.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn polynomials_to_degree_four_refine() {
        let grids: Vec<Grid> = [4, 8, 16].iter().map(|&n| Grid::unit(n).unwrap()).collect();
        let c = CoefficientField::constant(vec![0.3], vec![0.8]).unwrap();
        for deg in 2..=4 {
            let st = ito_refinement_study(&Polynomial1D::monomial(deg), &c, &[0.2], p(1.0, 1.0), &grids, 200, 9).unwrap();
            for w in st.rows.windows(2) {
                assert!(w[1].mean_residual < w[0].mean_residual + 2.0 * w[1].stderr.hypot(w[0].stderr), "deg {deg}: {st:?}");
            }
        }
    }

    #[test]
    fn unused_channel_contributes_nothing() {
        let g = Grid::unit(6).unwrap();
        let s = SheetPath::sample(g, 2, 5).unwrap();
        let only_first = CoefficientField::new(1, 2, |_, y, _, o| o[0] = -y[0], |_, _, _, o| o.copy_from_slice(&[0.9, 0.0])).unwrap();
        let field = solve_goursat(&only_first, &[0.1], &s, None).unwrap();
        let single = s.select(&[0]).unwrap();
        let c1 = CoefficientField::new(1, 1, |_, y, _, o| o[0] = -y[0], |_, _, _, o| o[0] = 0.9).unwrap();
        let field1 = solve_goursat(&c1, &[0.1], &single, None).unwrap();
        let f = Polynomial1D::monomial(3);
        let a = ito_terms(&f, &only_first, &field, &s, p(1.0, 1.0), None).unwrap();
        let b = ito_terms(&f, &c1, &field1, &single, p(1.0, 1.0), None).unwrap();
        assert_eq!(a.terms, b.terms);
    }

    #[test]
    fn measure_dependent_coefficients_need_measures() {
        let g = Grid::unit(4).unwrap();
        let s = SheetPath::sample(g, 2, 5).unwrap();
        let c = ConditionalOu::new(0.5, 1.0, vec![1.0, 1.0]).unwrap();
        let field = crate::solver::StateField::constant(g, &[0.0]);
        assert!(matches!(ito_terms(&Cosine1D { w: 1.0 }, &c, &field, &s, p(1.0, 1.0), None), Err(Error::MissingMeasure)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn t7_symmetric_for_constant_coefficients(a in -1.0..1.0f64, b in 0.1..1.5f64, seed in 0u64..100) {
            // swapping ζ and ζ' in the symmetric T7 integrand: A² Σ_I [D²a² + D³ a b² + ¼D⁴b⁴] at the join
            let g = Grid::unit(5).unwrap();
            let s = SheetPath::sample(g, 1, seed).unwrap();
            let c = CoefficientField::constant(vec![a], vec![b]).unwrap();
            let field = solve_goursat(&c, &[0.0], &s, None).unwrap();
            let f = Polynomial1D { coef: vec![0.0, 0.0, 1.0, 0.3, 0.1] };
            let r = ito_terms(&f, &c, &field, &s, p(1.0, 1.0), None).unwrap();
            let z = p(1.0, 1.0);
            let sym = |u: (usize, usize), v: (usize, usize)| {
                let (lo, hi) = if quarter_indicator_index(u, v) { (u, v) } else if quarter_indicator_index(v, u) { (v, u) } else { return 0.0 };
                let w = (hi.0, lo.1);
                let y = field.get(w.0, w.1);
                let mut o = [Complex64::default()];
                let mut tot = 0.0;
                for (k, coef) in [(2usize, a * a), (3, a * b * b), (4, 0.25 * b.powi(4))] {
                    f.derivative(k, y, &mut o);
                    tot += o[0].re * coef;
                }
                tot
            };
            let fwd = double_rect_integral(&g, z, |u, v| if quarter_indicator_index(u, v) { sym(u, v) } else { 0.0 }).unwrap();
            let bwd = double_rect_integral(&g, z, |u, v| if quarter_indicator_index(v, u) { sym(v, u) } else { 0.0 }).unwrap();
            prop_assert!((fwd - bwd).abs() < 1e-12);
            prop_assert!((r.terms[6].re - fwd).abs() < 1e-10);
        }
    }
}
