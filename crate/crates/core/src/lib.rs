//! Numerical laboratory for stochastic calculus in the plane.
//!
//! Brownian sheets on rectangular grids drive two-parameter Goursat systems,
//! conditional McKean-Vlasov particle ensembles with a common-noise channel, and
//! a set of checks built on them: a discrete planar Itô formula, a Fourier-side
//! weak form of the conditional law, propagation of chaos for linear systems,
//! Picard convergence diagnostics and a partial-observation control problem.
//!
//! Geometry, the Bessel-type series and empirical measures are generic over
//! [`Scalar`]; the aliases below fix them to `f64`, the type used by the
//! Monte Carlo modules.
//!
//! ```
//! use sheetlab::solver::{solve_conditional_mkv, ConditionalOu};
//! use sheetlab::{Grid, Point};
//!
//! // α = 0.5·E[Y | B₁] − Y, β = (0.6, 0.8)
//! let ou = ConditionalOu::new(0.5, 1.0, vec![0.6, 0.8])?;
//! let ens = solve_conditional_mkv(&ou, &[1.0], 500, Grid::unit(32)?, 7)?;
//! let mu = ens.measure_at(Point::new(1.0, 1.0)?)?;
//! assert!(mu.mean()[0].is_finite());
//! # Ok::<(), sheetlab::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos;
pub mod control;
pub mod error;
pub mod fokker_planck;
pub mod ito_check;
pub mod measures;
pub mod noise;
pub mod plane;
pub mod scalar;
pub mod series;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Point = plane::Point<f64>;
pub type Grid = plane::Grid<f64>;
pub type Rect = plane::Rect<f64>;
pub type NodeField = plane::NodeField<f64>;
pub type EmpiricalMeasure = measures::EmpiricalMeasure<f64>;
pub type MQuadrature = measures::MQuadrature<f64>;
pub type SeriesConfig = series::SeriesConfig<f64>;
