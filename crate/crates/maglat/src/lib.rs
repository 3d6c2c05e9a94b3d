//! Numerical laboratory for magnetic Schrödinger operators on finite lattices.
//!
//! The crate discretizes `H(a,V) = sum_j L_j^* L_j + V` with Peierls edge
//! phases (one phase per edge, the line integral of the magnetic potential),
//! which keeps gauge covariance, the diamagnetic inequality and resolvent
//! domination exact at the discrete level. On top of that substrate it
//! provides:
//!
//! - reverse Hölder / A-infinity weight scans and Fefferman–Phong constants,
//! - local gauge constructions (radial gauge, phase recovery, mollified
//!   fields) with bound certificates,
//! - spectral functional calculus, Green kernel slices and domination checks,
//! - the uncentered maximal function, Whitney covers and a verified
//!   Calderón–Zygmund decomposition adapted to `|Lf|^p + |omega^{1/2} f|^p`,
//! - a weak-solution inequality suite (Caccioppoli, subharmonicity,
//!   mean-value and reverse Hölder estimates, decay probes),
//! - empirical `L^p` operator-norm estimation and theorem sweeps for first-
//!   and second-order Riesz transforms.

pub mod czd;
pub mod error;
pub mod families;
pub mod gauge;
pub mod grid;
pub mod operators;
pub mod report;
pub mod riesz;
pub mod solutions;
pub mod weights;

pub use error::{MaglatError, Result};
pub use grid::{
    covariant_derivative, cube_average_field, cube_average_weight, dyadic_cubes, make_grid,
    sliding_cubes, Boundary, CubeFamily, DyadicCube, EdgePhaseField, Field, Grid, WeightField,
};
