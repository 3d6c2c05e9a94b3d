//! Lattice geometry, discrete fields and dyadic cube families.
//!
//! All downstream modules share this substrate: nodes live at
//! `origin + h * (i_1, ..., i_n)`, complex fields and nonnegative weights are
//! stored per node, and the magnetic potential is stored as one phase per
//! directed edge (the line integral of `a` along that edge), which keeps gauge
//! covariance exact at the discrete level.

use std::io::{BufRead, Write};
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{MaglatError, Result};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Fields extend by zero outside the grid.
    Dirichlet,
    /// Indices wrap around.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    dim: usize,
    pts: usize,
    spacing: f64,
    boundary: Boundary,
    origin: [f64; MAX_DIM],
}

/// `make_grid`: `n` points per side in each of `dim` in {2,3} directions.
pub fn make_grid(
    dim: usize,
    pts: usize,
    spacing: f64,
    boundary: Boundary,
    origin: &[f64],
) -> Result<Arc<Grid>> {
    Grid::new(dim, pts, spacing, boundary, origin).map(Arc::new)
}

impl Grid {
    pub fn new(
        dim: usize,
        pts: usize,
        spacing: f64,
        boundary: Boundary,
        origin: &[f64],
    ) -> Result<Grid> {
        if dim < 2 || dim > MAX_DIM {
            return Err(MaglatError::InvalidGrid(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        if pts < 2 {
            return Err(MaglatError::InvalidGrid(format!(
                "need at least 2 points per side, got {pts}"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(MaglatError::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing}"
            )));
        }
        if origin.len() != dim {
            return Err(MaglatError::InvalidGrid(format!(
                "origin has {} coordinates for dimension {dim}",
                origin.len()
            )));
        }
        let mut org = [0.0; MAX_DIM];
        org[..dim].copy_from_slice(origin);
        Ok(Grid {
            dim,
            pts,
            spacing,
            boundary,
            origin: org,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pts_per_side(&self) -> usize {
        self.pts
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.dim]
    }

    pub fn side_length(&self) -> f64 {
        self.pts as f64 * self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.pts.pow(self.dim as u32)
    }

    /// Cell volume `h^n`, the weight of one node in discrete integrals.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    pub fn linear(&self, multi: &[i64; MAX_DIM]) -> usize {
        debug_assert!(self.contains_multi(multi));
        let mut idx = 0usize;
        for a in (0..self.dim).rev() {
            idx = idx * self.pts + multi[a] as usize;
        }
        idx
    }

    pub fn multi(&self, linear: usize) -> [i64; MAX_DIM] {
        let mut m = [0i64; MAX_DIM];
        let mut rest = linear;
        for a in 0..self.dim {
            m[a] = (rest % self.pts) as i64;
            rest /= self.pts;
        }
        m
    }

    pub fn contains_multi(&self, multi: &[i64; MAX_DIM]) -> bool {
        (0..self.dim).all(|a| multi[a] >= 0 && (multi[a] as usize) < self.pts)
    }

    pub fn coord(&self, linear: usize) -> [f64; MAX_DIM] {
        let m = self.multi(linear);
        let mut x = [0.0; MAX_DIM];
        for a in 0..self.dim {
            x[a] = self.origin[a] + self.spacing * m[a] as f64;
        }
        x
    }

    /// Neighbor of `linear` one step along `axis` in direction `dir in {-1,+1}`.
    /// `None` past a Dirichlet face; wraps around for periodic grids.
    pub fn neighbor(&self, linear: usize, axis: usize, dir: i64) -> Option<usize> {
        let mut m = self.multi(linear);
        m[axis] += dir;
        if m[axis] < 0 || m[axis] as usize >= self.pts {
            match self.boundary {
                Boundary::Dirichlet => return None,
                Boundary::Periodic => {
                    m[axis] = m[axis].rem_euclid(self.pts as i64);
                }
            }
        }
        Some(self.linear(&m))
    }

    pub fn nodes(&self) -> std::ops::Range<usize> {
        0..self.node_count()
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self == other
    }
}

// ---------------------------------------------------------------------------
// Fields
// ---------------------------------------------------------------------------

/// Complex scalar field, one value per node.
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<Complex64>,
}

impl Field {
    pub fn zeros(grid: Arc<Grid>) -> Field {
        let n = grid.node_count();
        Field {
            grid,
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> Complex64) -> Field {
        let values = grid
            .nodes()
            .map(|i| f(&grid.coord(i)[..grid.dim()]))
            .collect();
        Field { grid, values }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<Complex64>) -> Result<Field> {
        if values.len() != grid.node_count() {
            return Err(MaglatError::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(MaglatError::InvalidArgument(
                "field contains non-finite values".into(),
            ));
        }
        Ok(Field { grid, values })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    /// One row per node: index coordinates, then real and imaginary part.
    pub fn to_csv(&self, mut w: impl Write) -> Result<()> {
        let dim = self.grid.dim();
        let headers = ["i1", "i2", "i3"];
        writeln!(w, "{},re,im", headers[..dim].join(","))?;
        for i in self.grid.nodes() {
            let m = self.grid.multi(i);
            for a in 0..dim {
                write!(w, "{},", m[a])?;
            }
            writeln!(w, "{:e},{:e}", self.values[i].re, self.values[i].im)?;
        }
        Ok(())
    }

    pub fn from_csv(grid: Arc<Grid>, r: impl BufRead) -> Result<Field> {
        let dim = grid.dim();
        let mut values = vec![Complex64::new(0.0, 0.0); grid.node_count()];
        let mut seen = vec![false; grid.node_count()];
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != dim + 2 {
                return Err(MaglatError::InvalidArgument(format!(
                    "csv line {} has {} cells, expected {}",
                    lineno + 1,
                    cells.len(),
                    dim + 2
                )));
            }
            let mut m = [0i64; MAX_DIM];
            for a in 0..dim {
                m[a] = cells[a].trim().parse::<i64>().map_err(|e| {
                    MaglatError::InvalidArgument(format!("csv line {}: {e}", lineno + 1))
                })?;
            }
            if !grid.contains_multi(&m) {
                return Err(MaglatError::InvalidArgument(format!(
                    "csv line {}: node index out of range",
                    lineno + 1
                )));
            }
            let re: f64 = cells[dim].trim().parse().map_err(|e| {
                MaglatError::InvalidArgument(format!("csv line {}: {e}", lineno + 1))
            })?;
            let im: f64 = cells[dim + 1].trim().parse().map_err(|e| {
                MaglatError::InvalidArgument(format!("csv line {}: {e}", lineno + 1))
            })?;
            let idx = grid.linear(&m);
            values[idx] = Complex64::new(re, im);
            seen[idx] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(MaglatError::InvalidArgument(
                "csv does not cover every node".into(),
            ));
        }
        Field::from_values(grid, values)
    }
}

/// Nonnegative real field (potentials V, weights omega).
#[derive(Debug, Clone)]
pub struct WeightField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl WeightField {
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<WeightField> {
        let values: Vec<f64> = grid
            .nodes()
            .map(|i| f(&grid.coord(i)[..grid.dim()]))
            .collect();
        WeightField::from_values(grid, values)
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Result<WeightField> {
        let n = grid.node_count();
        WeightField::from_values(grid, vec![c; n])
    }

    pub fn zeros(grid: Arc<Grid>) -> WeightField {
        let n = grid.node_count();
        WeightField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<WeightField> {
        if values.len() != grid.node_count() {
            return Err(MaglatError::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.node_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(MaglatError::InvalidArgument(
                "weight field must be finite and nonnegative".into(),
            ));
        }
        Ok(WeightField { grid, values })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Magnetic potential as per-edge phases: `phase(x, j)` is the line integral
/// of `a` along the edge from `x` to `x + h e_j`.
#[derive(Debug, Clone)]
pub struct EdgePhaseField {
    grid: Arc<Grid>,
    phases: Vec<f64>,
}

impl EdgePhaseField {
    pub fn zeros(grid: Arc<Grid>) -> EdgePhaseField {
        let n = grid.node_count() * grid.dim();
        EdgePhaseField {
            grid,
            phases: vec![0.0; n],
        }
    }

    /// `f(x, j)` receives the coordinate of the edge tail and the direction.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64], usize) -> f64) -> Result<EdgePhaseField> {
        let dim = grid.dim();
        let count = grid.node_count();
        let mut phases = vec![0.0; count * dim];
        for axis in 0..dim {
            for i in grid.nodes() {
                let x = grid.coord(i);
                let v = f(&x[..dim], axis);
                if !v.is_finite() {
                    return Err(MaglatError::InvalidArgument(
                        "edge phase must be finite".into(),
                    ));
                }
                phases[axis * count + i] = v;
            }
        }
        Ok(EdgePhaseField { grid, phases })
    }

    pub fn from_phases(grid: Arc<Grid>, phases: Vec<f64>) -> Result<EdgePhaseField> {
        if phases.len() != grid.node_count() * grid.dim() {
            return Err(MaglatError::GridMismatch("edge phase length".into()));
        }
        if phases.iter().any(|v| !v.is_finite()) {
            return Err(MaglatError::InvalidArgument(
                "edge phase must be finite".into(),
            ));
        }
        Ok(EdgePhaseField { grid, phases })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn phase(&self, node: usize, axis: usize) -> f64 {
        self.phases[axis * self.grid.node_count() + node]
    }

    pub fn set_phase(&mut self, node: usize, axis: usize, value: f64) {
        self.phases[axis * self.grid.node_count() + node] = value;
    }

    /// Flux around the elementary plaquette with lower corner `node` in the
    /// `(a, b)` coordinate plane, oriented counterclockwise. `None` when a
    /// plaquette edge leaves a Dirichlet grid.
    pub fn plaquette_flux(&self, node: usize, a: usize, b: usize) -> Option<f64> {
        let grid = &self.grid;
        let xa = grid.neighbor(node, a, 1)?;
        let xb = grid.neighbor(node, b, 1)?;
        grid.neighbor(xa, b, 1)?;
        Some(self.phase(node, a) + self.phase(xa, b) - self.phase(xb, a) - self.phase(node, b))
    }
}

// ---------------------------------------------------------------------------
// Covariant derivative
// ---------------------------------------------------------------------------

/// Discrete covariant derivative along `axis`:
/// `(L_j u)(x) = (exp(-i theta_j(x)) u(x + h e_j) - u(x)) / (i h)`.
///
/// On Dirichlet grids `u` extends by zero past the boundary. Replacing
/// `theta_j(x)` by `theta_j(x) + phi(x + h e_j) - phi(x)` and `u` by
/// `exp(i phi) u` rotates the output by exactly `exp(i phi)`.
pub fn covariant_derivative(u: &Field, theta: &EdgePhaseField, axis: usize) -> Result<Field> {
    let grid = u.grid();
    if !grid.same_geometry(theta.grid()) {
        return Err(MaglatError::GridMismatch(
            "field and edge phases on different grids".into(),
        ));
    }
    if axis >= grid.dim() {
        return Err(MaglatError::InvalidArgument(format!(
            "axis {axis} out of range for dimension {}",
            grid.dim()
        )));
    }
    let ih_inv = Complex64::new(0.0, -1.0 / grid.spacing()); // 1/(i h)
    let mut out = Field::zeros(grid.clone());
    for x in grid.nodes() {
        let ahead = match grid.neighbor(x, axis, 1) {
            Some(y) => Complex64::from_polar(1.0, -theta.phase(x, axis)) * u.values()[y],
            None => Complex64::new(0.0, 0.0),
        };
        out.values_mut()[x] = ih_inv * (ahead - u.values()[x]);
    }
    Ok(out)
}

/// Pointwise magnitude `|Lu|(x) = (sum_j |L_j u(x)|^2)^{1/2}`.
pub fn covariant_magnitude(u: &Field, theta: &EdgePhaseField) -> Result<Vec<f64>> {
    let grid = u.grid();
    let mut mag2 = vec![0.0; grid.node_count()];
    for axis in 0..grid.dim() {
        let d = covariant_derivative(u, theta, axis)?;
        for (m, v) in mag2.iter_mut().zip(d.values()) {
            *m += v.norm_sqr();
        }
    }
    Ok(mag2.into_iter().map(f64::sqrt).collect())
}

// ---------------------------------------------------------------------------
// Dyadic cubes
// ---------------------------------------------------------------------------

/// Axis-aligned cube of `2^level` nodes per side with integer corner index.
/// The physical cube is the union of the node cells, so its sidelength is
/// `R = 2^level * h` and its center sits at corner + (2^level - 1)/2 in index
/// units. Dilations `lambda Q` are resolved with exact integer arithmetic for
/// rational `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DyadicCube {
    pub level: u32,
    pub corner: [i64; MAX_DIM],
}

/// Inclusive per-axis index bounds; may extend past the grid.
#[derive(Debug, Clone, Copy)]
pub struct NodeRange {
    pub lo: [i64; MAX_DIM],
    pub hi: [i64; MAX_DIM],
}

impl NodeRange {
    pub fn contains(&self, dim: usize, multi: &[i64; MAX_DIM]) -> bool {
        (0..dim).all(|a| multi[a] >= self.lo[a] && multi[a] <= self.hi[a])
    }

    pub fn within_grid(&self, grid: &Grid) -> bool {
        (0..grid.dim()).all(|a| self.lo[a] >= 0 && self.hi[a] < grid.pts_per_side() as i64)
    }

    /// Iterate linear indices of grid nodes inside the range.
    pub fn grid_nodes<'g>(&self, grid: &'g Grid) -> impl Iterator<Item = usize> + 'g {
        let dim = grid.dim();
        let n = grid.pts_per_side() as i64;
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [-1i64; MAX_DIM];
        let mut empty = false;
        for a in 0..MAX_DIM {
            if a < dim {
                lo[a] = self.lo[a].max(0);
                hi[a] = self.hi[a].min(n - 1);
                if lo[a] > hi[a] {
                    empty = true;
                }
            } else {
                lo[a] = 0;
                hi[a] = 0;
            }
        }
        RangeIter {
            grid,
            lo,
            hi,
            cur: lo,
            done: empty,
        }
    }
}

struct RangeIter<'g> {
    grid: &'g Grid,
    lo: [i64; MAX_DIM],
    hi: [i64; MAX_DIM],
    cur: [i64; MAX_DIM],
    done: bool,
}

impl Iterator for RangeIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.done {
            return None;
        }
        let out = self.grid.linear(&self.cur);
        let dim = self.grid.dim();
        let mut a = 0;
        loop {
            if a == dim {
                self.done = true;
                break;
            }
            self.cur[a] += 1;
            if self.cur[a] <= self.hi[a] {
                break;
            }
            self.cur[a] = self.lo[a];
            a += 1;
        }
        Some(out)
    }
}

fn div_floor(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn div_ceil(a: i64, b: i64) -> i64 {
    -(-a).div_euclid(b)
}

impl DyadicCube {
    pub fn new(level: u32, corner: [i64; MAX_DIM]) -> DyadicCube {
        DyadicCube { level, corner }
    }

    pub fn side_nodes(&self) -> i64 {
        1i64 << self.level
    }

    /// Physical sidelength `R`.
    pub fn sidelength(&self, grid: &Grid) -> f64 {
        self.side_nodes() as f64 * grid.spacing()
    }

    pub fn center(&self, grid: &Grid) -> [f64; MAX_DIM] {
        let s = self.side_nodes();
        let mut c = [0.0; MAX_DIM];
        for a in 0..grid.dim() {
            c[a] = grid.origin()[a] + grid.spacing() * (self.corner[a] as f64 + (s - 1) as f64 / 2.0);
        }
        c
    }

    /// The cube's own node range.
    pub fn range(&self) -> NodeRange {
        let s = self.side_nodes();
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for a in 0..MAX_DIM {
            lo[a] = self.corner[a];
            hi[a] = self.corner[a] + s - 1;
        }
        NodeRange { lo, hi }
    }

    /// Nodes of `lambda Q` (`lambda = num/den`) when node positions are tested
    /// against the open dilated cube. Coincides with the closed test except
    /// when a node lands exactly on the dilated boundary.
    pub fn dilated_open(&self, num: i64, den: i64) -> NodeRange {
        self.dilated_bound(num * self.side_nodes(), den, false)
    }

    /// Closed-cube point membership.
    pub fn dilated_closed(&self, num: i64, den: i64) -> NodeRange {
        self.dilated_bound(num * self.side_nodes(), den, true)
    }

    /// Nodes whose closed cell (side `h`) intersects the closed cube
    /// `lambda Q`; used when the complement is read as a union of cells.
    pub fn dilated_cells(&self, num: i64, den: i64) -> NodeRange {
        self.dilated_bound(num * self.side_nodes() + den, den, true)
    }

    /// Membership `|2 i - m2| * den (<|<=) bound` per axis, with
    /// `m2 = 2 corner + s - 1` twice the center in index units.
    fn dilated_bound(&self, bound: i64, den: i64, closed: bool) -> NodeRange {
        let s = self.side_nodes();
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        for a in 0..MAX_DIM {
            let m2 = 2 * self.corner[a] + s - 1;
            if closed {
                lo[a] = div_ceil(m2 * den - bound, 2 * den);
                hi[a] = div_floor(m2 * den + bound, 2 * den);
            } else {
                lo[a] = div_floor(m2 * den - bound, 2 * den) + 1;
                hi[a] = div_ceil(m2 * den + bound, 2 * den) - 1;
            }
        }
        NodeRange { lo, hi }
    }

    pub fn node_count_in(&self, grid: &Grid) -> usize {
        self.range().grid_nodes(grid).count()
    }
}

/// A set of equal-level cubes, either an aligned disjoint tiling or every
/// in-grid position (sliding family).
#[derive(Debug, Clone)]
pub struct CubeFamily {
    pub level: u32,
    pub cubes: Vec<DyadicCube>,
    /// Aligned tilings drop partial cubes at the domain edge; the count is
    /// recorded here.
    pub dropped: usize,
    pub sliding: bool,
}

/// Aligned dyadic tiling at the given level. Trailing partial cubes are
/// dropped, never clipped.
pub fn dyadic_cubes(grid: &Grid, level: u32) -> Result<CubeFamily> {
    let s = 1i64 << level;
    let n = grid.pts_per_side() as i64;
    if s > n {
        return Err(MaglatError::InvalidArgument(format!(
            "cube side {s} exceeds grid side {n}"
        )));
    }
    let full = (n / s) as usize;
    let tiles = div_ceil(n, s) as usize;
    let dim = grid.dim();
    let mut cubes = Vec::with_capacity(full.pow(dim as u32));
    let mut idx = [0usize; MAX_DIM];
    loop {
        let mut corner = [0i64; MAX_DIM];
        for a in 0..dim {
            corner[a] = idx[a] as i64 * s;
        }
        cubes.push(DyadicCube::new(level, corner));
        let mut a = 0;
        loop {
            if a == dim {
                let dropped = tiles.pow(dim as u32) - full.pow(dim as u32);
                return Ok(CubeFamily {
                    level,
                    cubes,
                    dropped,
                    sliding: false,
                });
            }
            idx[a] += 1;
            if idx[a] < full {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Every position of a level-`level` cube fully inside the grid.
pub fn sliding_cubes(grid: &Grid, level: u32) -> Result<CubeFamily> {
    let s = 1i64 << level;
    let n = grid.pts_per_side() as i64;
    if s > n {
        return Err(MaglatError::InvalidArgument(format!(
            "cube side {s} exceeds grid side {n}"
        )));
    }
    let dim = grid.dim();
    let span = (n - s + 1) as usize;
    let mut cubes = Vec::with_capacity(span.pow(dim as u32));
    let mut idx = [0usize; MAX_DIM];
    loop {
        let mut corner = [0i64; MAX_DIM];
        for a in 0..dim {
            corner[a] = idx[a] as i64;
        }
        cubes.push(DyadicCube::new(level, corner));
        let mut a = 0;
        loop {
            if a == dim {
                return Ok(CubeFamily {
                    level,
                    cubes,
                    dropped: 0,
                    sliding: true,
                });
            }
            idx[a] += 1;
            if idx[a] < span {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

/// Node-count average of `|value|^s` over the cube's intersection with the
/// grid. Plain average for `s = 1`.
pub fn cube_average_with(
    grid: &Grid,
    cube: &DyadicCube,
    s: f64,
    value: impl Fn(usize) -> f64,
) -> Result<f64> {
    if !(s > 0.0) {
        return Err(MaglatError::InvalidArgument(format!(
            "exponent must be positive, got {s}"
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in cube.range().grid_nodes(grid) {
        let v = value(i).abs();
        sum += if s == 1.0 { v } else { v.powf(s) };
        count += 1;
    }
    if count == 0 {
        return Err(MaglatError::EmptyCube);
    }
    Ok(sum / count as f64)
}

pub fn cube_average_field(field: &Field, cube: &DyadicCube, s: f64) -> Result<f64> {
    cube_average_with(field.grid(), cube, s, |i| field.values()[i].norm())
}

pub fn cube_average_weight(weight: &WeightField, cube: &DyadicCube, s: f64) -> Result<f64> {
    cube_average_with(weight.grid(), cube, s, |i| weight.values()[i])
}

// ---------------------------------------------------------------------------
// Discrete norms (h-weighted counting measure)
// ---------------------------------------------------------------------------

/// `(h^n sum |u_i|^p)^{1/p}` for finite `p`, max norm for `p = inf`.
pub fn lp_norm(values: &[Complex64], p: f64, cell_volume: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    }
    let sum: f64 = values.iter().map(|v| v.norm().powf(p)).sum();
    (cell_volume * sum).powf(1.0 / p)
}

pub fn lp_norm_real(values: &[f64], p: f64, cell_volume: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    let sum: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
    (cell_volume * sum).powf(1.0 / p)
}
