//! Geometry of the parameter quarter-plane.
//!
//! Points `z = (t, x)` with `t, x >= 0`, closed rectangular grids over
//! `R_z = [0, t] x [0, x]`, the componentwise join `a ∨ b`, the quarter order
//! `a ∧̄ b`, lower-left-corner Riemann sums over `R_z` and `R_z x R_z`, and the
//! four-point mixed difference quotient.
//!
//! Cells are addressed by the node index of their lower-left corner, so cell
//! `(i, j)` spans `[i Δt, (i+1) Δt] x [j Δx, (j+1) Δx]`.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Node (or cell) index `(i, j)`; node `(i, j)` sits at `(i Δt, j Δx)`.
pub type NodeIndex = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point<T> {
    pub t: T,
    pub x: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(t: T, x: T) -> Result<Self> {
        if !(t >= T::zero() && x >= T::zero()) || !t.is_finite() || !x.is_finite() {
            return Err(invalid(format!("point ({t}, {x}) is not in the closed quarter-plane")));
        }
        Ok(Self { t, x })
    }

    pub fn origin() -> Self {
        Self { t: T::zero(), x: T::zero() }
    }

    /// `|z| = t·x`, the area of `R_z`.
    pub fn area(self) -> T {
        self.t * self.x
    }

    pub fn join(self, other: Self) -> Self {
        sup_join(self, other)
    }

    fn to_f64(self) -> (f64, f64) {
        (self.t.to_f64().unwrap_or(f64::NAN), self.x.to_f64().unwrap_or(f64::NAN))
    }
}

/// Componentwise maximum `a ∨ b`.
pub fn sup_join<T: Scalar>(a: Point<T>, b: Point<T>) -> Point<T> {
    Point { t: a.t.max(b.t), x: a.x.max(b.x) }
}

/// `I(a ∧̄ b)`: true iff `a.t <= b.t` and `a.x >= b.x`.
pub fn quarter_indicator<T: Scalar>(a: Point<T>, b: Point<T>) -> bool {
    a.t <= b.t && a.x >= b.x
}

/// Same order on cell/node indices.
pub fn quarter_indicator_index(a: NodeIndex, b: NodeIndex) -> bool {
    a.0 <= b.0 && a.1 >= b.1
}

/// Closed axis-aligned rectangle `[lo.t, hi.t] x [lo.x, hi.x]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect<T> {
    pub lo: Point<T>,
    pub hi: Point<T>,
}

impl<T: Scalar> Rect<T> {
    pub fn new(lo: Point<T>, hi: Point<T>) -> Result<Self> {
        if lo.t > hi.t || lo.x > hi.x {
            return Err(invalid("rectangle corners out of order"));
        }
        Ok(Self { lo, hi })
    }

    /// `R_z = [0, t] x [0, x]`.
    pub fn anchored(z: Point<T>) -> Self {
        Self { lo: Point::origin(), hi: z }
    }
}

/// Uniform closed grid over `[0, T] x [0, X]` with `nt x nx` cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    horizon: Point<T>,
    nt: usize,
    nx: usize,
}

impl<T: Scalar> Grid<T> {
    pub fn new(horizon: Point<T>, nt: usize, nx: usize) -> Result<Self> {
        if nt == 0 || nx == 0 {
            return Err(invalid("grid needs at least one cell per axis"));
        }
        if !(horizon.t > T::zero() && horizon.x > T::zero()) {
            return Err(invalid("grid horizon must be strictly positive"));
        }
        Ok(Self { horizon, nt, nx })
    }

    /// `n x n` cells over the unit square.
    pub fn unit(n: usize) -> Result<Self> {
        Self::new(Point { t: T::one(), x: T::one() }, n, n)
    }

    /// `n x n` cells over `R_z`.
    pub fn square_over(z: Point<T>, n: usize) -> Result<Self> {
        Self::new(z, n, n)
    }

    pub fn horizon(&self) -> Point<T> {
        self.horizon
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dt(&self) -> T {
        self.horizon.t / T::from_count(self.nt)
    }

    pub fn dx(&self) -> T {
        self.horizon.x / T::from_count(self.nx)
    }

    pub fn cell_area(&self) -> T {
        self.dt() * self.dx()
    }

    /// Number of nodes, `(nt + 1)(nx + 1)`.
    pub fn node_count(&self) -> usize {
        (self.nt + 1) * (self.nx + 1)
    }

    /// Row-major flat position of node `(i, j)`.
    pub fn flat(&self, (i, j): NodeIndex) -> usize {
        i * (self.nx + 1) + j
    }

    pub fn node(&self, i: usize, j: usize) -> Point<T> {
        Point { t: T::from_count(i) * self.dt(), x: T::from_count(j) * self.dx() }
    }

    /// Index of the node at `z`; rejects points that are not (numerically) on a node.
    pub fn node_index(&self, z: Point<T>) -> Result<NodeIndex> {
        let (zt, zx) = z.to_f64();
        let tol = T::epsilon() * T::lit(64.0) * self.horizon.t.max(self.horizon.x).max(T::one());
        let slack = tol.to_f64().unwrap_or(0.0);
        let (ht, hx) = self.horizon.to_f64();
        if zt < -slack || zx < -slack || zt > ht + slack || zx > hx + slack {
            return Err(Error::OutsideHorizon { t: zt, x: zx });
        }
        let i = (z.t / self.dt()).round();
        let j = (z.x / self.dx()).round();
        if (i * self.dt() - z.t).abs() > tol || (j * self.dx() - z.x).abs() > tol {
            return Err(Error::OffGrid { t: zt, x: zx });
        }
        Ok((i.to_usize().unwrap_or(0), j.to_usize().unwrap_or(0)))
    }

    /// Grid with every cell split into `factor x factor` cells.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.nt * factor, self.nx * factor)
    }
}

/// Values attached to every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField<T> {
    grid: Grid<T>,
    values: Vec<T>,
}

impl<T: Scalar> NodeField<T> {
    pub fn from_fn(grid: Grid<T>, mut f: impl FnMut(Point<T>) -> T) -> Self {
        let mut values = Vec::with_capacity(grid.node_count());
        for i in 0..=grid.nt() {
            for j in 0..=grid.nx() {
                values.push(f(grid.node(i, j)));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[self.grid.flat((i, j))]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

/// Lower-left-corner Riemann sum of `h` over the cells of `R_z`.
///
/// `h` is evaluated at node indices; `z` must be a grid node.
pub fn rect_integral<T: Scalar>(grid: &Grid<T>, z: Point<T>, h: impl Fn(usize, usize) -> T) -> Result<T> {
    let (iz, jz) = grid.node_index(z)?;
    let mut acc = T::zero();
    for i in 0..iz {
        for j in 0..jz {
            acc = acc + h(i, j);
        }
    }
    Ok(acc * grid.cell_area())
}

/// Lower-corner Riemann sum of `h(ζ, ζ')` over all ordered cell pairs of `R_z x R_z`,
/// identical pairs included.
pub fn double_rect_integral<T: Scalar>(grid: &Grid<T>, z: Point<T>, h: impl Fn(NodeIndex, NodeIndex) -> T) -> Result<T> {
    let (iz, jz) = grid.node_index(z)?;
    let mut acc = T::zero();
    for i in 0..iz {
        for j in 0..jz {
            let mut row = T::zero();
            for i2 in 0..iz {
                for j2 in 0..jz {
                    row = row + h((i, j), (i2, j2));
                }
            }
            acc = acc + row;
        }
    }
    let area = grid.cell_area();
    Ok(acc * area * area)
}

/// `(F(t+h, x+h) - F(t+h, x) - F(t, x+h) + F(t, x)) / h²`.
pub fn mixed_partial<T: Scalar>(f: impl Fn(Point<T>) -> T, z: Point<T>, h: T) -> Result<T> {
    if !(h > T::zero()) {
        return Err(invalid("mixed_partial step must be positive"));
    }
    let p = |dt: T, dx: T| Point { t: z.t + dt, x: z.x + dx };
    let zero = T::zero();
    let num = f(p(h, h)) - f(p(h, zero)) - f(p(zero, h)) + f(p(zero, zero));
    Ok(num / (h * h))
}

/// Both sides of the mixed-derivative rule for `G(z) = ∬_{R_z x R_z} f dζ dζ'`.
///
/// Differentiating the four integration limits gives
/// `∂²G/∂t∂x = ∫ f(z, ζ') dζ' + ∫ f(ζ, z) dζ + ∫ f((t, a), (s', x)) + ∫ f((s, x), (t, a'))`.
/// `two_term` holds the first two integrals, `cross` the last two.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedIdentity<T> {
    pub lhs: T,
    pub two_term: T,
    pub cross: T,
    /// `|lhs - two_term - cross|`.
    pub residual: T,
}

/// Evaluates the mixed-derivative identity with `cells x cells` lower-corner quadrature on
/// every rectangle involved (the stencil corners get their own grids, so quadrature error
/// varies smoothly with the corner) and a four-point stencil of width `h`.
pub fn diff_double_integral_identity_check<T: Scalar>(
    f: impl Fn(Point<T>, Point<T>) -> T,
    z: Point<T>,
    cells: usize,
    h: T,
) -> Result<MixedIdentity<T>> {
    let double = |corner: Point<T>| -> T {
        if corner.t <= T::zero() || corner.x <= T::zero() {
            return T::zero();
        }
        let g = Grid::square_over(corner, cells).expect("positive corner");
        double_rect_integral(&g, corner, |a, b| f(g.node(a.0, a.1), g.node(b.0, b.1))).expect("corner is the horizon node")
    };
    let lhs = mixed_partial(double, z, h)?;

    let g = Grid::square_over(z, cells)?;
    let at = |i: usize, j: usize| g.node(i, j);
    let first = rect_integral(&g, z, |i, j| f(z, at(i, j)))?;
    let second = rect_integral(&g, z, |i, j| f(at(i, j), z))?;
    let cross_a = rect_integral(&g, z, |i, j| {
        let q = at(i, j);
        f(Point { t: z.t, x: q.x }, Point { t: q.t, x: z.x })
    })?;
    let cross_b = rect_integral(&g, z, |i, j| {
        let q = at(i, j);
        f(Point { t: q.t, x: z.x }, Point { t: z.t, x: q.x })
    })?;
    let two_term = first + second;
    let cross = cross_a + cross_b;
    Ok(MixedIdentity { lhs, two_term, cross, residual: (lhs - two_term - cross).abs() })
}

/// Where integrands are read inside a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellSample {
    LowerCorner,
    Midpoint,
}

/// `∬_{R_z x R_z} I(ζ ∧̄ ζ') f(ζ) g(ζ') dζ dζ'` on `cells x cells`, in O(cells²).
///
/// The indicator between two cells sharing a column (or row) gets weight ½, its exact
/// average over the pair.
pub fn quarter_separable_integral<T: Scalar>(
    f: impl Fn(Point<T>) -> T,
    g: impl Fn(Point<T>) -> T,
    z: Point<T>,
    cells: usize,
    sample: CellSample,
) -> Result<T> {
    let grid = Grid::square_over(z, cells)?;
    let n = cells;
    let half = T::lit(0.5);
    let shift = match sample {
        CellSample::LowerCorner => Point::origin(),
        CellSample::Midpoint => Point { t: grid.dt() * half, x: grid.dx() * half },
    };
    let at = |i: usize, j: usize| {
        let p = grid.node(i, j);
        Point { t: p.t + shift.t, x: p.x + shift.x }
    };
    // row[i][j] = Σ_{j' < j} g(i, j') + ½ g(i, j)
    let mut row = vec![T::zero(); n * n];
    for i in 0..n {
        let mut below = T::zero();
        for j in 0..n {
            let gij = g(at(i, j));
            row[i * n + j] = below + half * gij;
            below = below + gij;
        }
    }
    // s(i, j) = Σ_{i' > i} row[i'][j] + ½ row[i][j]
    let mut acc = T::zero();
    let mut later = vec![T::zero(); n];
    for i in (0..n).rev() {
        for j in 0..n {
            let s = later[j] + half * row[i * n + j];
            acc = acc + f(at(i, j)) * s;
        }
        for j in 0..n {
            later[j] = later[j] + row[i * n + j];
        }
    }
    let area = grid.cell_area();
    Ok(acc * area * area)
}
