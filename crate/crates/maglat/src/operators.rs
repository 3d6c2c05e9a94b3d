//! Assembly and functional calculus for the lattice magnetic Schrödinger
//! operator `H = sum_j L_j^* L_j + V`.
//!
//! The stencil form is `(Hu)(x) = (2n/h^2 + V(x)) u(x)
//! - (1/h^2) sum_j [exp(-i theta_j(x)) u(x+he_j) + exp(i theta_j(x-he_j)) u(x-he_j)]`
//! with zero extension past Dirichlet faces. Off-diagonal magnitudes equal
//! those of the free Laplacian, which is what makes the resolvent and
//! semigroup domination checks exact up to round-off.

use std::sync::{Arc, OnceLock};

use faer::complex_native::c64;
use faer::solvers::SpSolver;
use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{MaglatError, Result};
use crate::grid::{
    covariant_derivative, lp_norm, Boundary, EdgePhaseField, Field, Grid, WeightField,
};

pub const DEFAULT_SPECTRAL_CAP: usize = 4096;

#[inline]
pub(crate) fn to_c64(z: Complex64) -> c64 {
    c64::new(z.re, z.im)
}

#[inline]
pub(crate) fn from_c64(z: c64) -> Complex64 {
    Complex64::new(z.re, z.im)
}

/// Spectral functions applied through the eigendecomposition.
#[derive(Debug, Clone, Copy)]
pub enum SpectralFn {
    /// `x^{1/2}` (negative round-off eigenvalues clamp to zero)
    Sqrt,
    /// `(x + shift)^{-1/2}`
    InvSqrt { shift: f64 },
    /// `(x + shift)^{-1}`
    Inv { shift: f64 },
    /// `x^{iy}`, zero on the kernel
    ImagPow { y: f64 },
    /// `exp(-t x)`
    HeatExp { t: f64 },
}

#[derive(Debug)]
pub struct SpectralCache {
    /// ascending
    pub eigenvalues: Vec<f64>,
    /// columns are the orthonormal eigenbasis
    pub basis: Mat<c64>,
    pub reconstruction_residual: f64,
    pub orthonormality_residual: f64,
}

impl SpectralCache {
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    fn kernel_tol(&self) -> f64 {
        1e-10 * self.max_eigenvalue().abs().max(1.0)
    }

    fn evaluate(&self, f: SpectralFn, lambda: f64) -> Result<c64> {
        let tol = self.kernel_tol();
        Ok(match f {
            SpectralFn::Sqrt => c64::new(lambda.max(0.0).sqrt(), 0.0),
            SpectralFn::InvSqrt { shift } => {
                let v = lambda + shift;
                if v <= tol {
                    return Err(MaglatError::Singular(format!(
                        "eigenvalue {lambda:.3e} with shift {shift:.3e} is numerically singular; increase the shift"
                    )));
                }
                c64::new(1.0 / v.sqrt(), 0.0)
            }
            SpectralFn::Inv { shift } => {
                let v = lambda + shift;
                if v <= tol {
                    return Err(MaglatError::Singular(format!(
                        "eigenvalue {lambda:.3e} with shift {shift:.3e} is numerically singular; increase the shift"
                    )));
                }
                c64::new(1.0 / v, 0.0)
            }
            SpectralFn::ImagPow { y } => {
                if lambda <= tol {
                    c64::new(0.0, 0.0) // projection off the kernel
                } else {
                    let arg = y * lambda.ln();
                    c64::new(arg.cos(), arg.sin())
                }
            }
            SpectralFn::HeatExp { t } => {
                if t < 0.0 {
                    return Err(MaglatError::InvalidArgument(
                        "heat semigroup needs t >= 0".into(),
                    ));
                }
                c64::new((-t * lambda).exp(), 0.0)
            }
        })
    }

    /// Apply `f(H)` to a raw complex vector.
    pub fn apply(&self, f: SpectralFn, u: &[Complex64]) -> Result<Vec<Complex64>> {
        let n = self.eigenvalues.len();
        if u.len() != n {
            return Err(MaglatError::GridMismatch("vector length".into()));
        }
        let rhs = Mat::from_fn(n, 1, |i, _| to_c64(u[i]));
        let mut coeff = self.basis.adjoint() * &rhs;
        for i in 0..n {
            let fv = self.evaluate(f, self.eigenvalues[i])?;
            coeff[(i, 0)] = coeff[(i, 0)] * fv;
        }
        let out = &self.basis * &coeff;
        Ok((0..n).map(|i| from_c64(out[(i, 0)])).collect())
    }

    /// Dense matrix of `f(H)`.
    pub fn function_matrix(&self, f: SpectralFn) -> Result<Mat<c64>> {
        let n = self.eigenvalues.len();
        let mut scaled = self.basis.clone();
        for j in 0..n {
            let fv = self.evaluate(f, self.eigenvalues[j])?;
            for i in 0..n {
                scaled[(i, j)] = scaled[(i, j)] * fv;
            }
        }
        Ok(&scaled * self.basis.adjoint())
    }
}

/// Hermitian eigendecomposition sorted ascending.
pub(crate) fn eigendecompose_hermitian(a: &Mat<c64>) -> (Vec<f64>, Mat<c64>) {
    let n = a.nrows();
    let evd = a.selfadjoint_eigendecomposition(Side::Lower);
    let s = evd.s();
    let u = evd.u();
    let mut order: Vec<usize> = (0..n).collect();
    let raw: Vec<f64> = (0..n).map(|i| s.column_vector()[i].re).collect();
    order.sort_by(|&i, &j| raw[i].total_cmp(&raw[j]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let basis = Mat::from_fn(n, n, |r, c| u[(r, order[c])]);
    (eigenvalues, basis)
}

// ---------------------------------------------------------------------------
// HOperator
// ---------------------------------------------------------------------------

pub struct HOperator {
    grid: Arc<Grid>,
    theta: EdgePhaseField,
    potential: WeightField,
    /// regularization shift recorded for inverse-type calls
    default_shift: f64,
    spectral_cap: usize,
    dense: OnceLock<Mat<c64>>,
    spectral: OnceLock<SpectralCache>,
}

/// Build `H(a,V)` from edge phases and a nonnegative potential.
pub fn assemble(
    grid: Arc<Grid>,
    theta: EdgePhaseField,
    potential: WeightField,
) -> Result<HOperator> {
    if !grid.same_geometry(theta.grid()) || !grid.same_geometry(potential.grid()) {
        return Err(MaglatError::GridMismatch(
            "operator inputs on different grids".into(),
        ));
    }
    Ok(HOperator {
        grid,
        theta,
        potential,
        default_shift: 0.0,
        spectral_cap: DEFAULT_SPECTRAL_CAP,
        dense: OnceLock::new(),
        spectral: OnceLock::new(),
    })
}

impl HOperator {
    /// Free Dirichlet/periodic Laplacian `-Delta` on the same grid.
    pub fn laplacian(grid: Arc<Grid>) -> HOperator {
        let theta = EdgePhaseField::zeros(grid.clone());
        let potential = WeightField::zeros(grid.clone());
        assemble(grid, theta, potential).expect("zero fields always assemble")
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn theta(&self) -> &EdgePhaseField {
        &self.theta
    }

    pub fn potential(&self) -> &WeightField {
        &self.potential
    }

    pub fn default_shift(&self) -> f64 {
        self.default_shift
    }

    pub fn with_shift(mut self, shift: f64) -> HOperator {
        self.default_shift = shift;
        self
    }

    pub fn with_spectral_cap(mut self, cap: usize) -> HOperator {
        self.spectral_cap = cap;
        self
    }

    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    /// Matrix-free application of `H + shift`.
    pub fn apply_shifted(&self, u: &[Complex64], shift: f64) -> Vec<Complex64> {
        let grid = &self.grid;
        let h2 = grid.spacing() * grid.spacing();
        let dim = grid.dim();
        let mut out = vec![Complex64::new(0.0, 0.0); u.len()];
        for x in grid.nodes() {
            let mut acc = u[x] * (2.0 * dim as f64 / h2 + self.potential.values()[x] + shift);
            for j in 0..dim {
                if let Some(fwd) = grid.neighbor(x, j, 1) {
                    acc -= Complex64::from_polar(1.0 / h2, -self.theta.phase(x, j)) * u[fwd];
                }
                if let Some(back) = grid.neighbor(x, j, -1) {
                    acc -= Complex64::from_polar(1.0 / h2, self.theta.phase(back, j)) * u[back];
                }
            }
            out[x] = acc;
        }
        out
    }

    pub fn apply(&self, u: &Field) -> Result<Field> {
        if !self.grid.same_geometry(u.grid()) {
            return Err(MaglatError::GridMismatch("field grid".into()));
        }
        Field::from_values(self.grid.clone(), self.apply_shifted(u.values(), 0.0))
    }

    /// Kinetic energy per direction plus the potential term, using the edge
    /// measure: on Dirichlet grids the edges crossing the boundary (where the
    /// outside value is zero) are included, which makes
    /// `sum_j |L_j u|^2_edges + |V^{1/2} u|^2 = <Hu, u>` an exact identity.
    pub fn energy_parts(&self, u: &Field) -> Result<(Vec<f64>, f64)> {
        if !self.grid.same_geometry(u.grid()) {
            return Err(MaglatError::GridMismatch("field grid".into()));
        }
        let grid = &self.grid;
        let hn = grid.cell_volume();
        let h2 = grid.spacing() * grid.spacing();
        let mut kinetic = Vec::with_capacity(grid.dim());
        for j in 0..grid.dim() {
            let d = covariant_derivative(u, &self.theta, j)?;
            let mut k: f64 = d.values().iter().map(|v| v.norm_sqr()).sum();
            if grid.boundary() == Boundary::Dirichlet {
                // edges entering from outside the grid
                for x in grid.nodes() {
                    if grid.neighbor(x, j, -1).is_none() {
                        k += u.values()[x].norm_sqr() / h2;
                    }
                }
            }
            kinetic.push(k * hn);
        }
        let potential: f64 = grid
            .nodes()
            .map(|x| self.potential.values()[x] * u.values()[x].norm_sqr())
            .sum::<f64>()
            * hn;
        Ok((kinetic, potential))
    }

    /// `|sum_j ||L_j u||^2 + ||V^{1/2} u||^2 - <Hu,u>| / <Hu,u>`.
    pub fn energy_identity_residual(&self, u: &Field) -> Result<f64> {
        let (kin, pot) = self.energy_parts(u)?;
        let hu = self.apply(u)?;
        let hn = self.grid.cell_volume();
        let quad: f64 = self
            .grid
            .nodes()
            .map(|x| (hu.values()[x] * u.values()[x].conj()).re)
            .sum::<f64>()
            * hn;
        let lhs: f64 = kin.iter().sum::<f64>() + pot;
        Ok((lhs - quad).abs() / quad.abs().max(f64::MIN_POSITIVE))
    }

    /// Dense Hermitian matrix (assembled on first use).
    pub fn dense(&self) -> &Mat<c64> {
        self.dense.get_or_init(|| {
            let n = self.node_count();
            let grid = &self.grid;
            let h2 = grid.spacing() * grid.spacing();
            let dim = grid.dim();
            let mut m = Mat::<c64>::zeros(n, n);
            for x in grid.nodes() {
                m[(x, x)] =
                    m[(x, x)] + c64::new(2.0 * dim as f64 / h2 + self.potential.values()[x], 0.0);
                for j in 0..dim {
                    // accumulate: a periodic 2-point axis folds both hops
                    // into the same entry
                    if let Some(fwd) = grid.neighbor(x, j, 1) {
                        let phase = -self.theta.phase(x, j);
                        m[(x, fwd)] =
                            m[(x, fwd)] + c64::new(-phase.cos() / h2, -phase.sin() / h2);
                    }
                    if let Some(back) = grid.neighbor(x, j, -1) {
                        let phase = self.theta.phase(back, j);
                        m[(x, back)] =
                            m[(x, back)] + c64::new(-phase.cos() / h2, -phase.sin() / h2);
                    }
                }
            }
            m
        })
    }

    /// Eigendecomposition with reconstruction and orthonormality residuals
    /// verified; refuses grids above the node cap.
    pub fn spectral(&self) -> Result<&SpectralCache> {
        if self.node_count() > self.spectral_cap {
            return Err(MaglatError::SpectralCapExceeded {
                nodes: self.node_count(),
                cap: self.spectral_cap,
            });
        }
        if let Some(c) = self.spectral.get() {
            return Ok(c);
        }
        let m = self.dense();
        let (eigenvalues, basis) = eigendecompose_hermitian(m);
        let n = m.nrows();
        let hu = m * &basis;
        let mut recon = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let d = hu[(i, j)] - basis[(i, j)] * c64::new(eigenvalues[j], 0.0);
                recon = recon.max(d.abs());
            }
        }
        let scale = eigenvalues
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let gram = basis.adjoint() * &basis;
        let mut ortho = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                ortho = ortho.max((gram[(i, j)] - c64::new(expect, 0.0)).abs());
            }
        }
        let cache = SpectralCache {
            eigenvalues,
            basis,
            reconstruction_residual: recon / scale,
            orthonormality_residual: ortho,
        };
        if cache.reconstruction_residual > 1e-9 {
            return Err(MaglatError::Singular(format!(
                "eigendecomposition residual {:.3e} above 1e-9",
                cache.reconstruction_residual
            )));
        }
        let _ = self.spectral.set(cache);
        Ok(self.spectral.get().unwrap())
    }

    /// `f(H) u` through the spectral cache.
    pub fn apply_function(&self, f: SpectralFn, u: &Field) -> Result<Field> {
        if !self.grid.same_geometry(u.grid()) {
            return Err(MaglatError::GridMismatch("field grid".into()));
        }
        let out = self.spectral()?.apply(f, u.values())?;
        Field::from_values(self.grid.clone(), out)
    }

    /// Solve `(H + shift) u = rhs`, dense Cholesky below the spectral cap and
    /// matrix-free conjugate gradients above it.
    pub fn solve_shifted(&self, rhs: &[Complex64], shift: f64) -> Result<Vec<Complex64>> {
        let n = self.node_count();
        if rhs.len() != n {
            return Err(MaglatError::GridMismatch("rhs length".into()));
        }
        if n <= self.spectral_cap {
            let mut m = self.dense().clone();
            for i in 0..n {
                m[(i, i)] = m[(i, i)] + c64::new(shift, 0.0);
            }
            let llt = m.cholesky(Side::Lower).map_err(|_| {
                MaglatError::Singular(format!(
                    "Cholesky failed for shift {shift:.3e}; the shifted operator is not positive definite"
                ))
            })?;
            let b = Mat::from_fn(n, 1, |i, _| to_c64(rhs[i]));
            let x = llt.solve(&b);
            Ok((0..n).map(|i| from_c64(x[(i, 0)])).collect())
        } else {
            self.solve_cg(rhs, shift)
        }
    }

    fn solve_cg(&self, rhs: &[Complex64], shift: f64) -> Result<Vec<Complex64>> {
        let n = rhs.len();
        let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
            a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
        };
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        let mut r = rhs.to_vec();
        let mut p = r.clone();
        let rhs_norm = dot(&r, &r).re.sqrt().max(f64::MIN_POSITIVE);
        let mut rs_old = dot(&r, &r).re;
        let max_iter = 20 * n + 200;
        for _ in 0..max_iter {
            if rs_old.sqrt() / rhs_norm < 1e-12 {
                return Ok(x);
            }
            let ap = self.apply_shifted(&p, shift);
            let papp = dot(&p, &ap).re;
            if papp <= 0.0 {
                return Err(MaglatError::Singular(
                    "conjugate gradients met a nonpositive curvature direction; increase the shift"
                        .into(),
                ));
            }
            let alpha = rs_old / papp;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new = dot(&r, &r).re;
            let beta = rs_new / rs_old;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            rs_old = rs_new;
        }
        if rs_old.sqrt() / rhs_norm < 1e-8 {
            Ok(x)
        } else {
            Err(MaglatError::Singular(format!(
                "conjugate gradients stalled at relative residual {:.3e}",
                rs_old.sqrt() / rhs_norm
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Domination checks
// ---------------------------------------------------------------------------

fn check_same_world(a: &HOperator, b: &HOperator) -> Result<()> {
    if !a.grid().same_geometry(b.grid()) {
        return Err(MaglatError::GridMismatch(
            "operators on different grids".into(),
        ));
    }
    Ok(())
}

/// Max over nodes of `|exp(-tH) u| - exp(t Delta) |u|`; nonpositive up to
/// round-off for any edge phases and `V >= 0`.
pub fn heat_domination_check(
    h: &HOperator,
    laplacian: &HOperator,
    t: f64,
    u: &Field,
) -> Result<f64> {
    check_same_world(h, laplacian)?;
    if t < 0.0 {
        return Err(MaglatError::InvalidArgument("t must be nonnegative".into()));
    }
    let lhs = h.apply_function(SpectralFn::HeatExp { t }, u)?;
    let abs_u = Field::from_values(
        u.grid().clone(),
        u.values()
            .iter()
            .map(|v| Complex64::new(v.norm(), 0.0))
            .collect(),
    )?;
    let rhs = laplacian.apply_function(SpectralFn::HeatExp { t }, &abs_u)?;
    let mut worst = f64::NEG_INFINITY;
    for i in u.grid().nodes() {
        worst = worst.max(lhs.values()[i].norm() - rhs.values()[i].re);
    }
    Ok(worst)
}

/// Max over nodes of `|(H+lambda)^{-1} f| - (-Delta+lambda)^{-1} |f|`.
pub fn kato_simon_check(
    h: &HOperator,
    laplacian: &HOperator,
    lambda: f64,
    f: &Field,
) -> Result<f64> {
    check_same_world(h, laplacian)?;
    if lambda <= 0.0 {
        return Err(MaglatError::InvalidArgument(
            "lambda must be positive".into(),
        ));
    }
    let lhs = h.solve_shifted(f.values(), lambda)?;
    let abs_f: Vec<Complex64> = f
        .values()
        .iter()
        .map(|v| Complex64::new(v.norm(), 0.0))
        .collect();
    let rhs = laplacian.solve_shifted(&abs_f, lambda)?;
    let mut worst = f64::NEG_INFINITY;
    for i in f.grid().nodes() {
        worst = worst.max(lhs[i].norm() - rhs[i].re);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Green kernel slices
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct KernelSlice {
    pub source: usize,
    pub shift: f64,
    #[serde(skip)]
    pub values: Vec<Complex64>,
    /// `(euclidean distance, |Gamma|)` per node, sorted by distance
    pub profile: Vec<(f64, f64)>,
    pub fitted_exponent: Option<f64>,
    pub fit_window: (f64, f64),
    /// max residual of `(H + shift) Gamma - delta_y / h^n` away from the source
    pub residual_off_source: f64,
}

/// Column `Gamma(., y) = (H + shift)^{-1} (delta_y / h^n)` with a log-log
/// decay fit over `[r_lo, r_hi]` (defaults to `[4h, side/4]`, widened when
/// that window captures fewer than three distinct radii).
pub fn green_kernel(
    h: &HOperator,
    source: usize,
    shift: f64,
    window: Option<(f64, f64)>,
) -> Result<KernelSlice> {
    let grid = h.grid();
    let n = grid.node_count();
    if source >= n {
        return Err(MaglatError::InvalidArgument("source out of range".into()));
    }
    let mut rhs = vec![Complex64::new(0.0, 0.0); n];
    rhs[source] = Complex64::new(1.0 / grid.cell_volume(), 0.0);
    let values = h.solve_shifted(&rhs, shift)?;

    let applied = h.apply_shifted(&values, shift);
    let mut residual = 0.0f64;
    let scale = values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for i in 0..n {
        if i == source {
            continue;
        }
        residual = residual.max((applied[i] - rhs[i]).norm());
    }
    residual /= (1.0 / grid.cell_volume()).max(scale);

    let src = grid.coord(source);
    let mut profile: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = grid.coord(i);
            let r2: f64 = (0..grid.dim()).map(|a| (x[a] - src[a]).powi(2)).sum();
            (r2.sqrt(), values[i].norm())
        })
        .collect();
    profile.sort_by(|a, b| a.0.total_cmp(&b.0));

    let side = grid.side_length();
    let default = (4.0 * grid.spacing(), side / 4.0);
    let (mut lo, mut hi) = window.unwrap_or(default);
    let distinct = |lo: f64, hi: f64| {
        let mut radii: Vec<i64> = profile
            .iter()
            .filter(|(r, g)| *r >= lo && *r <= hi && *g > 0.0)
            .map(|(r, _)| (r / grid.spacing() * 8.0).round() as i64)
            .collect();
        radii.dedup();
        radii.len()
    };
    if window.is_none() && distinct(lo, hi) < 3 {
        lo = 2.0 * grid.spacing();
        hi = side / 2.5;
    }
    let pts: Vec<(f64, f64)> = profile
        .iter()
        .filter(|(r, g)| *r >= lo && *r <= hi && *g > 0.0)
        .map(|(r, g)| (r.ln(), g.ln()))
        .collect();
    let fitted_exponent = if pts.len() >= 3 {
        Some(crate::weights::least_squares_slope(&pts))
    } else {
        None
    };
    Ok(KernelSlice {
        source,
        shift,
        values,
        profile,
        fitted_exponent,
        fit_window: (lo, hi),
        residual_off_source: residual,
    })
}

// ---------------------------------------------------------------------------
// Commutator identity
// ---------------------------------------------------------------------------

/// Residual of the first-order commutator identity
/// `[L_k, H_0] u = 2i sum_j F_kj L_j u + (sum_j d_j F_kj) u`, where
/// `F_kj = d_k a_j - d_j a_k` is the field generating the edge phases.
/// Returns `||difference||_2 / ||u||_2` in the h-weighted norm.
pub fn commutator_identity_check(
    h0: &HOperator,
    field: &dyn Fn(&[f64], usize, usize) -> f64,
    divergence_row: &dyn Fn(&[f64], usize) -> f64,
    k: usize,
    u: &Field,
) -> Result<f64> {
    let grid = h0.grid();
    if !grid.same_geometry(u.grid()) {
        return Err(MaglatError::GridMismatch("field grid".into()));
    }
    if k >= grid.dim() {
        return Err(MaglatError::InvalidArgument(
            "direction out of range".into(),
        ));
    }
    if !h0.potential().is_zero() {
        return Err(MaglatError::Precondition(
            "commutator identity applies to the pure magnetic operator".into(),
        ));
    }
    // consistency of the supplied field with the stored fluxes
    let h = grid.spacing();
    let mut fscale = 0.0f64;
    let mut fdev = 0.0f64;
    for x in grid.nodes() {
        for (a, b) in crate::weights::component_pairs(grid.dim()) {
            if let Some(flux) = h0.theta().plaquette_flux(x, a, b) {
                let mut center = grid.coord(x);
                center[a] += 0.5 * h;
                center[b] += 0.5 * h;
                let f = field(&center[..grid.dim()], b, a);
                fscale = fscale.max(f.abs());
                // plaquette flux approximates h^2 F_ab with F_ab = d_a A_b - d_b A_a
                fdev = fdev.max((flux / (h * h) - field(&center[..grid.dim()], a, b)).abs());
            }
        }
    }
    if fdev > 0.05 * (1.0 + fscale) {
        return Err(MaglatError::FluxMismatch(format!(
            "supplied field deviates from the stored plaquette fluxes by {fdev:.3e}"
        )));
    }

    let theta = h0.theta();
    let hu = h0.apply(u)?;
    let lk_hu = covariant_derivative(&hu, theta, k)?;
    let lk_u = covariant_derivative(u, theta, k)?;
    let h0_lku = h0.apply(&lk_u)?;

    let mut rhs = vec![Complex64::new(0.0, 0.0); grid.node_count()];
    for j in 0..grid.dim() {
        let lj_u = covariant_derivative(u, theta, j)?;
        for x in grid.nodes() {
            let xc = grid.coord(x);
            let fkj = field(&xc[..grid.dim()], k, j);
            rhs[x] += Complex64::new(0.0, 2.0 * fkj) * lj_u.values()[x];
        }
    }
    for x in grid.nodes() {
        let xc = grid.coord(x);
        rhs[x] += Complex64::new(divergence_row(&xc[..grid.dim()], k), 0.0) * u.values()[x];
    }

    let diff: Vec<Complex64> = grid
        .nodes()
        .map(|x| lk_hu.values()[x] - h0_lku.values()[x] - rhs[x])
        .collect();
    let hn = grid.cell_volume();
    Ok(lp_norm(&diff, 2.0, hn) / lp_norm(u.values(), 2.0, hn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauge::edge_phases_from_potential;
    use crate::grid::make_grid;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn dirichlet2(n: usize, h: f64) -> Arc<Grid> {
        make_grid(2, n, h, Boundary::Dirichlet, &[0.0, 0.0]).unwrap()
    }

    fn random_field(grid: &Arc<Grid>, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_values(
            grid.clone(),
            (0..grid.node_count())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn random_phases(grid: &Arc<Grid>, seed: u64, scale: f64) -> EdgePhaseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = EdgePhaseField::zeros(grid.clone());
        for axis in 0..grid.dim() {
            for i in grid.nodes() {
                theta.set_phase(i, axis, rng.gen_range(-scale..scale));
            }
        }
        theta
    }

    #[test]
    fn dirichlet_laplacian_spectrum_matches_closed_form() {
        let n = 8usize;
        let h = 0.5;
        let g = dirichlet2(n, h);
        let lap = HOperator::laplacian(g.clone());
        let cache = lap.spectral().unwrap();
        // separable spectrum (4/h^2)(sin^2(i pi/(2(N+1))) + sin^2(j pi/(2(N+1))))
        let mut expected: Vec<f64> = (1..=n)
            .flat_map(|i| {
                (1..=n).map(move |j| {
                    let si = (i as f64 * PI / (2.0 * (n as f64 + 1.0))).sin();
                    let sj = (j as f64 * PI / (2.0 * (n as f64 + 1.0))).sin();
                    4.0 / (h * h) * (si * si + sj * sj)
                })
            })
            .collect();
        expected.sort_by(f64::total_cmp);
        let scale = expected.last().unwrap();
        for (a, b) in cache.eigenvalues.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9 * scale, "{a} vs {b}");
        }
        assert!(cache.reconstruction_residual < 1e-9);
        assert!(cache.orthonormality_residual < 1e-10);
    }

    #[test]
    fn constant_potential_shifts_spectrum_exactly() {
        let g = dirichlet2(6, 0.4);
        let lap = HOperator::laplacian(g.clone());
        let c = 2.75;
        let shifted = assemble(
            g.clone(),
            EdgePhaseField::zeros(g.clone()),
            WeightField::constant(g.clone(), c).unwrap(),
        )
        .unwrap();
        let e0 = &lap.spectral().unwrap().eigenvalues;
        let e1 = &shifted.spectral().unwrap().eigenvalues;
        for (a, b) in e0.iter().zip(e1) {
            assert!((a + c - b).abs() < 1e-9);
        }
    }

    #[test]
    fn landau_and_symmetric_gauges_share_spectra() {
        let g = dirichlet2(8, 0.25);
        let b = 0.9;
        let landau = edge_phases_from_potential(&g, |x, axis| match axis {
            1 => b * x[0],
            _ => 0.0,
        })
        .unwrap();
        let symmetric = edge_phases_from_potential(&g, move |x, axis| match axis {
            0 => -0.5 * b * x[1],
            _ => 0.5 * b * x[0],
        })
        .unwrap();
        let v = WeightField::constant(g.clone(), 1.0).unwrap();
        let h1 = assemble(g.clone(), landau, v.clone()).unwrap();
        let h2 = assemble(g.clone(), symmetric, v).unwrap();
        let e1 = &h1.spectral().unwrap().eigenvalues;
        let e2 = &h2.spectral().unwrap().eigenvalues;
        let scale = e1.last().unwrap();
        for (a, b) in e1.iter().zip(e2) {
            assert!((a - b).abs() < 1e-9 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn energy_identity_is_exact_for_both_boundaries() {
        for boundary in [Boundary::Dirichlet, Boundary::Periodic] {
            let g = make_grid(2, 10, 0.3, boundary, &[-1.5, -1.5]).unwrap();
            let theta = random_phases(&g, 7, 1.2);
            let v = WeightField::from_fn(g.clone(), |x| 1.0 + x[0] * x[0] + x[1] * x[1]).unwrap();
            let h = assemble(g.clone(), theta, v).unwrap();
            for seed in 0..10 {
                let u = random_field(&g, seed);
                let res = h.energy_identity_residual(&u).unwrap();
                assert!(res < 1e-10, "{boundary:?}: residual {res}");
            }
        }
    }

    #[test]
    fn spectral_cap_is_enforced() {
        let g = dirichlet2(8, 0.5);
        let lap = HOperator::laplacian(g.clone()).with_spectral_cap(10);
        match lap.spectral() {
            Err(MaglatError::SpectralCapExceeded { nodes, cap }) => {
                assert_eq!(nodes, 64);
                assert_eq!(cap, 10);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn eigendecompose_diagonal_and_random_hermitian() {
        let d = [3.0, -1.0, 2.0, 0.5];
        let m = Mat::from_fn(4, 4, |i, j| {
            if i == j {
                c64::new(d[i], 0.0)
            } else {
                c64::new(0.0, 0.0)
            }
        });
        let (vals, _) = eigendecompose_hermitian(&m);
        let mut sorted = d.to_vec();
        sorted.sort_by(f64::total_cmp);
        for (a, b) in vals.iter().zip(&sorted) {
            assert!((a - b).abs() < 1e-12);
        }
        // random 50x50 Hermitian: reconstruction residual is tiny
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50;
        let raw = Mat::from_fn(n, n, |_, _| {
            c64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let sum = &raw + raw.adjoint();
        let herm = Mat::from_fn(n, n, |i, j| sum[(i, j)] * c64::new(0.5, 0.0));
        let (vals, basis) = eigendecompose_hermitian(&herm);
        let hu = &herm * &basis;
        let mut resid = 0.0f64;
        for j in 0..n {
            for i in 0..n {
                resid = resid.max((hu[(i, j)] - basis[(i, j)] * c64::new(vals[j], 0.0)).abs());
            }
        }
        assert!(resid < 1e-10, "residual {resid}");
    }

    #[test]
    fn apply_function_composition_and_unitarity() {
        let g = dirichlet2(6, 0.4);
        let theta = random_phases(&g, 3, 0.8);
        let v = WeightField::constant(g.clone(), 1.0).unwrap();
        let h = assemble(g.clone(), theta, v).unwrap();
        let u = random_field(&g, 5);

        let id = h.apply_function(SpectralFn::HeatExp { t: 0.0 }, &u).unwrap();
        for i in g.nodes() {
            assert!((id.values()[i] - u.values()[i]).norm() < 1e-10);
        }

        let half = h.apply_function(SpectralFn::Sqrt, &u).unwrap();
        let full = h.apply_function(SpectralFn::Sqrt, &half).unwrap();
        let hu = h.apply(&u).unwrap();
        let hn = g.cell_volume();
        let diff: Vec<Complex64> = g
            .nodes()
            .map(|i| full.values()[i] - hu.values()[i])
            .collect();
        let rel = lp_norm(&diff, 2.0, hn) / lp_norm(hu.values(), 2.0, hn);
        assert!(rel < 1e-8, "relative error {rel}");

        // imaginary powers preserve the norm off the kernel (V >= 1 here)
        let rotated = h
            .apply_function(SpectralFn::ImagPow { y: 1.7 }, &u)
            .unwrap();
        let ratio = lp_norm(rotated.values(), 2.0, hn) / lp_norm(u.values(), 2.0, hn);
        assert!((ratio - 1.0).abs() < 1e-10, "ratio {ratio}");
    }

    #[test]
    fn heat_domination_suite() {
        let g = dirichlet2(6, 0.4);
        let lap = HOperator::laplacian(g.clone());

        let u = random_field(&g, 2);
        let v0 = heat_domination_check(&lap, &lap, 0.3, &u).unwrap();
        assert!(v0 <= 1e-12, "violation {v0}");

        let theta = random_phases(&g, 9, 1.5);
        let v = WeightField::from_fn(g.clone(), |x| x[0] + 0.3).unwrap();
        let h = assemble(g.clone(), theta, v).unwrap();
        let sup = u.values().iter().map(|z| z.norm()).fold(0.0, f64::max);
        let viol = heat_domination_check(&h, &lap, 0.3, &u).unwrap();
        assert!(viol <= 1e-10 * sup.max(1.0), "violation {viol}");

        // nonnegative data, electric only: the electric semigroup is
        // dominated by the free one entrywise
        let upos = Field::from_fn(g.clone(), |x| {
            Complex64::new((1.0 - x[0].abs()).max(0.1), 0.0)
        });
        let helec = assemble(
            g.clone(),
            EdgePhaseField::zeros(g.clone()),
            WeightField::constant(g.clone(), 0.7).unwrap(),
        )
        .unwrap();
        let a = helec
            .apply_function(SpectralFn::HeatExp { t: 0.4 }, &upos)
            .unwrap();
        let b = lap
            .apply_function(SpectralFn::HeatExp { t: 0.4 }, &upos)
            .unwrap();
        for i in g.nodes() {
            assert!(a.values()[i].re <= b.values()[i].re + 1e-12);
        }
        assert!(heat_domination_check(&h, &lap, -0.1, &u).is_err());
    }

    #[test]
    fn kato_simon_suite() {
        let g = dirichlet2(6, 0.4);
        let lap = HOperator::laplacian(g.clone());
        let u = random_field(&g, 4);
        let sup = u.values().iter().map(|z| z.norm()).fold(0.0, f64::max);

        let v0 = kato_simon_check(&lap, &lap, 1.0, &u).unwrap();
        assert!(v0 <= 1e-11, "violation {v0}");

        let theta = random_phases(&g, 13, 1.1);
        let h = assemble(g.clone(), theta, WeightField::zeros(g.clone())).unwrap();
        let v1 = kato_simon_check(&h, &lap, 0.8, &u).unwrap();
        assert!(v1 <= 1e-10 * sup.max(1.0), "violation {v1}");

        let helec = assemble(
            g.clone(),
            EdgePhaseField::zeros(g.clone()),
            WeightField::from_fn(g.clone(), |x| x[1] * x[1]).unwrap(),
        )
        .unwrap();
        let v2 = kato_simon_check(&helec, &lap, 0.5, &u).unwrap();
        assert!(v2 <= 1e-10 * sup.max(1.0), "violation {v2}");
        assert!(kato_simon_check(&h, &lap, 0.0, &u).is_err());
    }

    #[test]
    fn green_kernel_column_properties() {
        // -Delta + 1 on a small 3D grid: steep decay, exact column residual
        let g = make_grid(3, 9, 0.5, Boundary::Dirichlet, &[-2.0, -2.0, -2.0]).unwrap();
        let h = assemble(
            g.clone(),
            EdgePhaseField::zeros(g.clone()),
            WeightField::constant(g.clone(), 1.0).unwrap(),
        )
        .unwrap();
        let center = g.linear(&[4, 4, 4]);
        let slice = green_kernel(&h, center, 0.0, None).unwrap();
        assert!(slice.residual_off_source < 1e-8);
        if let Some(e) = slice.fitted_exponent {
            assert!(e < -1.0, "exponent {e}");
        }
        // domination by the free resolvent column, entrywise
        let lap = HOperator::laplacian(g.clone());
        let lam = 1.0;
        let free = green_kernel(&lap, center, lam, None).unwrap();
        let theta = random_phases(&g, 21, 1.0);
        let hmag = assemble(g.clone(), theta, WeightField::zeros(g.clone())).unwrap();
        let mag = green_kernel(&hmag, center, lam, None).unwrap();
        let scale = free.values[center].norm();
        for i in g.nodes() {
            assert!(mag.values[i].norm() <= free.values[i].re + 1e-10 * scale);
        }
    }

    #[test]
    fn cg_solver_matches_dense_solve() {
        let g = dirichlet2(8, 0.4);
        let theta = random_phases(&g, 31, 0.9);
        let v = WeightField::constant(g.clone(), 0.5).unwrap();
        let dense_op = assemble(g.clone(), theta.clone(), v.clone()).unwrap();
        let iter_op = assemble(g.clone(), theta, v).unwrap().with_spectral_cap(8);
        let u = random_field(&g, 17);
        let a = dense_op.solve_shifted(u.values(), 0.3).unwrap();
        let b = iter_op.solve_shifted(u.values(), 0.3).unwrap();
        let hn = g.cell_volume();
        let diff: Vec<Complex64> = (0..a.len()).map(|i| a[i] - b[i]).collect();
        assert!(lp_norm(&diff, 2.0, hn) / lp_norm(&a, 2.0, hn) < 1e-9);
    }

    #[test]
    fn commutator_identity_zero_field_is_exact() {
        let g = dirichlet2(16, 0.25);
        let h0 = HOperator::laplacian(g.clone());
        // compactly supported bump: the zero-field commutator is boundary
        // localized, so fields vanishing near the faces see exactly zero
        let u = Field::from_fn(g.clone(), |x| {
            let cx = 1.875;
            let r2 = (x[0] - cx).powi(2) + (x[1] - cx).powi(2);
            if r2 < 1.0 {
                Complex64::new((-6.0 * r2).exp(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let res = commutator_identity_check(&h0, &|_, _, _| 0.0, &|_, _| 0.0, 0, &u).unwrap();
        assert!(res < 1e-12, "residual {res}");
    }

    fn commutator_residual(n: usize, bfun: fn(&[f64]) -> f64, dbdx2: fn(&[f64]) -> f64) -> f64 {
        // domain [0, 3]^2, interior Gaussian test field
        let h = 3.0 / n as f64;
        let g = make_grid(2, n, h, Boundary::Dirichlet, &[0.0, 0.0]).unwrap();
        let theta = edge_phases_from_potential(&g, move |x, axis| match axis {
            1 => {
                // a = (0, A) with dA/dx1 = b
                let steps = 64;
                let mut acc = 0.0;
                let dx = x[0] / steps as f64;
                for s in 0..steps {
                    let mid = (s as f64 + 0.5) * dx;
                    acc += bfun(&[mid, x[1]]) * dx;
                }
                acc
            }
            _ => 0.0,
        })
        .unwrap();
        let h0 = assemble(g.clone(), theta, WeightField::zeros(g.clone())).unwrap();
        let u = Field::from_fn(g.clone(), |x| {
            let r2 = (x[0] - 1.5).powi(2) + (x[1] - 1.5).powi(2);
            Complex64::new((-4.0 * r2).exp(), 0.3 * (-5.0 * r2).exp())
        });
        // F_12 = b, F_21 = -b; divergence rows: sum_j d_j F_1j = d_2 b,
        // sum_j d_j F_2j = -d_1 b
        let field = move |x: &[f64], k: usize, j: usize| -> f64 {
            if k == 0 && j == 1 {
                bfun(x)
            } else if k == 1 && j == 0 {
                -bfun(x)
            } else {
                0.0
            }
        };
        let div = move |x: &[f64], k: usize| -> f64 {
            match k {
                0 => dbdx2(x),
                _ => {
                    let eps = 1e-5;
                    -(bfun(&[x[0] + eps, x[1]]) - bfun(&[x[0] - eps, x[1]])) / (2.0 * eps)
                }
            }
        };
        commutator_identity_check(&h0, &field, &div, 0, &u).unwrap()
    }

    #[test]
    fn commutator_identity_first_order_consistency() {
        let r1 = commutator_residual(16, |_| 0.8, |_| 0.0);
        let r2 = commutator_residual(32, |_| 0.8, |_| 0.0);
        assert!(r2 <= r1 / 1.5, "constant field: {r1} -> {r2}");
        let r1 = commutator_residual(16, |x| 0.5 + 0.3 * x[1], |_| 0.3);
        let r2 = commutator_residual(32, |x| 0.5 + 0.3 * x[1], |_| 0.3);
        assert!(r2 <= r1 / 1.5, "polynomial field: {r1} -> {r2}");
    }
}
