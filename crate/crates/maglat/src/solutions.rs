//! Local weak solutions of `Hu = f` and the estimate suite evaluated on
//! them: Caccioppoli, the subharmonicity identity for `|u|^2`, mean-value
//! and weighted mean-value bounds, reverse Hölder rows for `V^{1/2}u` and
//! `Lu`, and decay probes in the strength of the potential.
//!
//! Constants reported here are empirical; assertions about them belong to
//! the callers (stability and homogeneity, never absolute paper constants).

use std::sync::Arc;

use faer::complex_native::c64;
use faer::solvers::SpSolver;
use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{MaglatError, Result};
use crate::grid::{covariant_magnitude, DyadicCube, Field, Grid, WeightField};
use crate::operators::{from_c64, to_c64, HOperator};

/// How a probe was manufactured.
#[derive(Debug, Clone, serde::Serialize)]
pub enum ProbeKind {
    /// `u = H^{-1} f` with `f` supported outside the closed `4Q`.
    InverseColumn,
    /// interior solve with pinned values on the boundary ring of `4Q`
    BoundaryValue,
}

pub struct SolutionProbe {
    pub operator: Arc<HOperator>,
    pub u: Field,
    /// the cube `Q`; `Hu = 0` holds on the interior of `4Q`
    pub cube: DyadicCube,
    pub kind: ProbeKind,
    /// max `|Hu - f|` over the claimed region, relative to `sup |u|`
    pub residual: f64,
    /// source term (zero field for boundary probes)
    pub source: Field,
    /// nodes where the solve pinned nothing and `Hu = 0` is claimed
    valid: Vec<bool>,
}

impl SolutionProbe {
    pub fn is_valid_at(&self, node: usize) -> bool {
        self.valid[node]
    }
}

pub enum ProbeData {
    /// `f` must vanish on the closed `4Q`
    Source(Field),
    /// values sampled on the boundary ring of `4Q`
    Boundary(Field),
}

/// Manufacture a local weak solution of `Hu = 0` on `4Q`.
pub fn local_solution(
    operator: Arc<HOperator>,
    cube: DyadicCube,
    data: ProbeData,
) -> Result<SolutionProbe> {
    let grid = operator.grid().clone();
    let four_q = cube.dilated_closed(4, 1);
    let in_4q: Vec<bool> = {
        let mut mask = vec![false; grid.node_count()];
        for i in four_q.grid_nodes(&grid) {
            mask[i] = true;
        }
        mask
    };
    if !in_4q.iter().any(|&b| b) {
        return Err(MaglatError::EmptyCube);
    }

    match data {
        ProbeData::Source(f) => {
            if !grid.same_geometry(f.grid()) {
                return Err(MaglatError::GridMismatch("source grid".into()));
            }
            for i in grid.nodes() {
                if in_4q[i] && f.values()[i].norm() > 0.0 {
                    return Err(MaglatError::Precondition(
                        "source must vanish on 4Q".into(),
                    ));
                }
            }
            let u_vals = operator.solve_shifted(f.values(), 0.0)?;
            let u = Field::from_values(grid.clone(), u_vals)?;
            let hu = operator.apply(&u)?;
            let sup_u = u.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
            let mut residual = 0.0f64;
            for i in grid.nodes() {
                if in_4q[i] {
                    residual = residual.max((hu.values()[i] - f.values()[i]).norm());
                }
            }
            Ok(SolutionProbe {
                operator,
                u,
                cube,
                kind: ProbeKind::InverseColumn,
                residual: residual / sup_u.max(f64::MIN_POSITIVE),
                source: f,
                valid: in_4q,
            })
        }
        ProbeData::Boundary(data) => {
            if !grid.same_geometry(data.grid()) {
                return Err(MaglatError::GridMismatch("boundary data grid".into()));
            }
            // ring: nodes of 4Q bordering the outside of the region, where
            // "outside" is a node beyond 4Q or past a Dirichlet grid face
            let mut ring = vec![false; grid.node_count()];
            for i in grid.nodes() {
                if !in_4q[i] {
                    continue;
                }
                'out: for axis in 0..grid.dim() {
                    for dir in [-1i64, 1] {
                        match grid.neighbor(i, axis, dir) {
                            Some(j) if !in_4q[j] => {
                                ring[i] = true;
                                break 'out;
                            }
                            None => {
                                ring[i] = true;
                                break 'out;
                            }
                            _ => {}
                        }
                    }
                }
            }
            let interior: Vec<usize> = grid.nodes().filter(|&i| in_4q[i] && !ring[i]).collect();
            if interior.is_empty() {
                return Err(MaglatError::Precondition(
                    "cube too small: no interior nodes in 4Q".into(),
                ));
            }
            let index_of: std::collections::HashMap<usize, usize> = interior
                .iter()
                .enumerate()
                .map(|(k, &i)| (i, k))
                .collect();
            let m = interior.len();
            let dense = operator.dense();
            let mut a = Mat::<c64>::zeros(m, m);
            let mut rhs = Mat::<c64>::zeros(m, 1);
            for (k, &i) in interior.iter().enumerate() {
                a[(k, k)] = dense[(i, i)];
                for axis in 0..grid.dim() {
                    for dir in [-1i64, 1] {
                        if let Some(j) = grid.neighbor(i, axis, dir) {
                            let entry = dense[(i, j)];
                            if let Some(&kj) = index_of.get(&j) {
                                a[(k, kj)] = a[(k, kj)] + entry;
                            } else if ring[j] {
                                rhs[(k, 0)] = rhs[(k, 0)] - entry * to_c64(data.values()[j]);
                            }
                            // outside 4Q: zero extension
                        }
                    }
                }
            }
            let llt = a.cholesky(Side::Lower).map_err(|_| {
                MaglatError::Singular("interior system is not positive definite".into())
            })?;
            let x = llt.solve(&rhs);
            let mut u_vals = vec![Complex64::new(0.0, 0.0); grid.node_count()];
            for i in grid.nodes() {
                if ring[i] {
                    u_vals[i] = data.values()[i];
                }
            }
            for (k, &i) in interior.iter().enumerate() {
                u_vals[i] = from_c64(x[(k, 0)]);
            }
            let u = Field::from_values(grid.clone(), u_vals)?;
            let hu = operator.apply(&u)?;
            let sup_u = u.values().iter().map(|v| v.norm()).fold(0.0, f64::max);
            let mut residual = 0.0f64;
            let mut valid = vec![false; grid.node_count()];
            for &i in &interior {
                valid[i] = true;
                residual = residual.max(hu.values()[i].norm());
            }
            Ok(SolutionProbe {
                operator,
                u,
                cube,
                kind: ProbeKind::BoundaryValue,
                residual: residual / sup_u.max(f64::MIN_POSITIVE),
                source: Field::zeros(grid),
                valid,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Averages over dilated cubes
// ---------------------------------------------------------------------------

fn dilated_average(
    grid: &Grid,
    cube: &DyadicCube,
    dilation: (i64, i64),
    value: impl Fn(usize) -> f64,
    exponent: f64,
) -> Result<f64> {
    let range = cube.dilated_closed(dilation.0, dilation.1);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in range.grid_nodes(grid) {
        let v = value(i).abs();
        sum += if exponent == 1.0 { v } else { v.powf(exponent) };
        count += 1;
    }
    if count == 0 {
        return Err(MaglatError::EmptyCube);
    }
    Ok(sum / count as f64)
}

fn dilated_sup(
    grid: &Grid,
    cube: &DyadicCube,
    dilation: (i64, i64),
    value: impl Fn(usize) -> f64,
) -> Result<f64> {
    let range = cube.dilated_closed(dilation.0, dilation.1);
    let mut sup = f64::NEG_INFINITY;
    let mut seen = false;
    for i in range.grid_nodes(grid) {
        sup = sup.max(value(i).abs());
        seen = true;
    }
    if !seen {
        return Err(MaglatError::EmptyCube);
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Single-inequality checks
// ---------------------------------------------------------------------------

/// Empirical constant of the Caccioppoli bound on `Q`:
/// `int_Q |Lu|^2 + V|u|^2 <= C (int_2Q |f||u| + R^{-2} int_2Q |u|^2)`.
/// `None` when both sides vanish.
pub fn caccioppoli_check(probe: &SolutionProbe, cube: &DyadicCube) -> Result<Option<f64>> {
    let grid = probe.operator.grid();
    let hn = grid.cell_volume();
    let lmag = covariant_magnitude(&probe.u, probe.operator.theta())?;
    let v = probe.operator.potential();
    let mut lhs = 0.0;
    for i in cube.range().grid_nodes(grid) {
        lhs += (lmag[i] * lmag[i] + v.values()[i] * probe.u.values()[i].norm_sqr()) * hn;
    }
    let r = cube.sidelength(grid);
    let mut rhs = 0.0;
    for i in cube.dilated_closed(2, 1).grid_nodes(grid) {
        let uu = probe.u.values()[i].norm();
        rhs += (probe.source.values()[i].norm() * uu + uu * uu / (r * r)) * hn;
    }
    if rhs == 0.0 {
        if lhs == 0.0 {
            return Ok(None); // 0/0: skipped row
        }
        return Err(MaglatError::Precondition(
            "Caccioppoli right side vanishes while the left does not".into(),
        ));
    }
    Ok(Some(lhs / rhs))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SubharmonicReport {
    /// max over interior nodes of
    /// `|Delta |u|^2 - 2|Lu|^2 - 2V|u|^2|` (first order in `h`)
    pub identity_residual: f64,
    /// min over interior nodes of `Delta |u|^2`; nonnegative up to round-off
    pub min_laplacian: f64,
    pub nodes_checked: usize,
}

/// Discrete subharmonicity of `|u|^2` for solutions of `Hu = 0`. The identity
/// holds to first order; the positivity is exact on the lattice.
pub fn subharmonic_identity_check(probe: &SolutionProbe) -> Result<SubharmonicReport> {
    let grid = probe.operator.grid();
    let h2 = grid.spacing() * grid.spacing();
    let lmag = covariant_magnitude(&probe.u, probe.operator.theta())?;
    let v = probe.operator.potential();
    let mut residual = 0.0f64;
    let mut min_lap = f64::INFINITY;
    let mut nodes = 0usize;
    for i in grid.nodes() {
        if !probe.valid[i] {
            continue;
        }
        let mut lap = 0.0;
        let mut ok = true;
        for axis in 0..grid.dim() {
            let (Some(f), Some(b)) = (grid.neighbor(i, axis, 1), grid.neighbor(i, axis, -1))
            else {
                ok = false;
                break;
            };
            if !probe.valid[f] || !probe.valid[b] {
                ok = false;
                break;
            }
            lap += probe.u.values()[f].norm_sqr() + probe.u.values()[b].norm_sqr()
                - 2.0 * probe.u.values()[i].norm_sqr();
        }
        if !ok {
            continue;
        }
        lap /= h2;
        let target =
            2.0 * lmag[i] * lmag[i] + 2.0 * v.values()[i] * probe.u.values()[i].norm_sqr();
        residual = residual.max((lap - target).abs());
        min_lap = min_lap.min(lap);
        nodes += 1;
    }
    if nodes == 0 {
        return Err(MaglatError::Precondition(
            "no interior nodes with a full stencil".into(),
        ));
    }
    Ok(SubharmonicReport {
        identity_residual: residual,
        min_laplacian: min_lap,
        nodes_checked: nodes,
    })
}

/// `sup_Q |u| / (avg_{mu Q} |u|^r)^{1/r}`; `None` when `u` vanishes on `mu Q`.
pub fn mean_value_check(
    probe: &SolutionProbe,
    cube: &DyadicCube,
    r: f64,
    mu: (i64, i64),
) -> Result<Option<f64>> {
    if !(r > 0.0) {
        return Err(MaglatError::InvalidArgument("r must be positive".into()));
    }
    let grid = probe.operator.grid();
    let sup = dilated_sup(grid, cube, (1, 1), |i| probe.u.values()[i].norm())?;
    let avg = dilated_average(grid, cube, mu, |i| probe.u.values()[i].norm(), r)?;
    if avg == 0.0 {
        return Ok(None);
    }
    Ok(Some(sup / avg.powf(1.0 / r)))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct WeightedMeanValue {
    /// `(avg_Q (w f^s)^r)^{1/r} / avg_{mu Q} w f^s`
    pub finite_form: f64,
    /// `sup_Q f * avg_Q w / avg_{mu Q} w f^s`
    pub sup_form: f64,
}

/// Weighted mean-value constants for a nonnegative discrete-subharmonic
/// field; errors when the field fails the subharmonicity precondition.
pub fn weighted_mean_value_check(
    weight: &WeightField,
    f: &[f64],
    cube: &DyadicCube,
    s: f64,
    r: f64,
    mu: (i64, i64),
) -> Result<WeightedMeanValue> {
    let grid = weight.grid();
    if f.len() != grid.node_count() {
        return Err(MaglatError::GridMismatch("field length".into()));
    }
    if f.iter().any(|&v| v < 0.0) {
        return Err(MaglatError::Precondition(
            "field must be nonnegative".into(),
        ));
    }
    // discrete subharmonicity over interior nodes
    let h2 = grid.spacing() * grid.spacing();
    let sup_f = f.iter().cloned().fold(0.0f64, f64::max);
    for i in grid.nodes() {
        let mut lap = 0.0;
        let mut full = true;
        for axis in 0..grid.dim() {
            match (grid.neighbor(i, axis, 1), grid.neighbor(i, axis, -1)) {
                (Some(a), Some(b)) => lap += f[a] + f[b] - 2.0 * f[i],
                _ => {
                    full = false;
                    break;
                }
            }
        }
        if full && lap / h2 < -1e-8 * (1.0 + sup_f / h2) {
            return Err(MaglatError::Precondition(format!(
                "field is not discretely subharmonic at node {i} (defect {:.3e})",
                lap / h2
            )));
        }
    }
    let wf = |i: usize| weight.values()[i] * f[i].powf(s);
    let finite_num = dilated_average(grid, cube, (1, 1), wf, r)?.powf(1.0 / r);
    let den = dilated_average(grid, cube, mu, wf, 1.0)?;
    let sup_q = dilated_sup(grid, cube, (1, 1), |i| f[i])?;
    let avg_w = dilated_average(grid, cube, (1, 1), |i| weight.values()[i], 1.0)?;
    if den == 0.0 {
        return Err(MaglatError::Precondition(
            "weighted average vanishes on the dilated cube".into(),
        ));
    }
    Ok(WeightedMeanValue {
        finite_form: finite_num / den,
        sup_form: sup_q * avg_w / den,
    })
}

// ---------------------------------------------------------------------------
// Suite rows
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct SuiteRow {
    pub id: String,
    pub cube: DyadicCube,
    pub params: Vec<(String, f64)>,
    pub lhs: f64,
    pub rhs_without_constant: f64,
    /// `lhs / rhs`; the empirical constant making the inequality tight
    pub constant: Option<f64>,
    pub skipped: Option<String>,
}

impl SuiteRow {
    fn new(id: &str, cube: DyadicCube, params: &[(&str, f64)], lhs: f64, rhs: f64) -> SuiteRow {
        SuiteRow {
            id: id.into(),
            cube,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lhs,
            rhs_without_constant: rhs,
            constant: if rhs > 0.0 { Some(lhs / rhs) } else { None },
            skipped: None,
        }
    }

    fn skip(id: &str, cube: DyadicCube, reason: &str) -> SuiteRow {
        SuiteRow {
            id: id.into(),
            cube,
            params: Vec::new(),
            lhs: 0.0,
            rhs_without_constant: 0.0,
            constant: None,
            skipped: Some(reason.into()),
        }
    }
}

/// Sobolev conjugate `q* = nq/(n-q)` for `q < n`.
pub fn sobolev_conjugate(q: f64, dim: usize) -> Option<f64> {
    let n = dim as f64;
    if q < n {
        Some(n * q / (n - q))
    } else {
        None
    }
}

/// Reverse Hölder rows for `V^{1/2} u` and `Lu` on a cube, for a potential
/// assumed in `RH_q`. The `deltas` drive the variants replacing the
/// right-hand exponent 2.
pub fn reverse_holder_suite(
    probe: &SolutionProbe,
    cube: &DyadicCube,
    q: f64,
    ks: &[f64],
    deltas: &[f64],
) -> Result<Vec<SuiteRow>> {
    let grid = probe.operator.grid();
    let dim = grid.dim();
    let v = probe.operator.potential();
    let lmag = covariant_magnitude(&probe.u, probe.operator.theta())?;
    let umag: Vec<f64> = probe.u.values().iter().map(|z| z.norm()).collect();
    let vu = |i: usize| v.values()[i].sqrt() * umag[i];
    let r = cube.sidelength(grid);
    let avg_v = dilated_average(grid, cube, (1, 1), |i| v.values()[i], 1.0)?;
    let mut rows = Vec::new();

    // (a) sqrt(V) u gains integrability: 2q-average against the 2-average on 3Q
    {
        let lhs = dilated_average(grid, cube, (1, 1), vu, 2.0 * q)?.powf(1.0 / (2.0 * q));
        let rhs = dilated_average(grid, cube, (3, 1), vu, 2.0)?.sqrt();
        rows.push(SuiteRow::new("rh_sqrtV_u", *cube, &[("q", q)], lhs, rhs));
    }

    // (b) q*-average of Lu with potential-strength decay
    match sobolev_conjugate(q, dim) {
        Some(qstar) => {
            let lhs =
                dilated_average(grid, cube, (1, 1), |i| lmag[i], qstar)?.powf(1.0 / qstar);
            let energy = dilated_average(grid, cube, (3, 1), |i| {
                lmag[i] * lmag[i] + v.values()[i] * umag[i] * umag[i]
            }, 1.0)?
            .sqrt();
            for &k in ks {
                let decay = (1.0 + r * r * avg_v).powf(-k);
                rows.push(SuiteRow::new(
                    "rh_Lu_decay",
                    *cube,
                    &[("q", q), ("k", k), ("qstar", qstar)],
                    lhs,
                    decay * energy,
                ));
            }
        }
        None => rows.push(SuiteRow::skip(
            "rh_Lu_decay",
            *cube,
            "q* undefined for q >= n",
        )),
    }

    // (c) plain gain for Lu: q*-average (or sup for q >= n) against
    //     delta-averages on 2Q
    for &delta in deltas {
        let rhs = dilated_average(grid, cube, (2, 1), |i| lmag[i], delta)?.powf(1.0 / delta);
        let n = dim as f64;
        if q >= n / 2.0 && q < n {
            let qstar = sobolev_conjugate(q, dim).unwrap();
            let lhs =
                dilated_average(grid, cube, (1, 1), |i| lmag[i], qstar)?.powf(1.0 / qstar);
            rows.push(SuiteRow::new(
                "rh_Lu_gain",
                *cube,
                &[("q", q), ("delta", delta), ("qstar", qstar)],
                lhs,
                rhs,
            ));
        } else if q >= n {
            let lhs = dilated_sup(grid, cube, (1, 1), |i| lmag[i])?;
            rows.push(SuiteRow::new(
                "rh_Lu_sup",
                *cube,
                &[("q", q), ("delta", delta)],
                lhs,
                rhs,
            ));
        } else {
            rows.push(SuiteRow::skip(
                "rh_Lu_gain",
                *cube,
                "q below n/2: outside the stated regime",
            ));
        }
    }
    Ok(rows)
}

/// Decay rows: comparisons of `|u|^2`, `V|u|^2` and `|Lu|^2` mass across
/// nested dilations, with the `(1 + R^2 avg_Q V)^{-k}` gain.
pub fn decay_probe(
    probe: &SolutionProbe,
    cube: &DyadicCube,
    mu: (i64, i64),
    mu_prime: (i64, i64),
    ks: &[f64],
    p_large: f64,
) -> Result<Vec<SuiteRow>> {
    let grid = probe.operator.grid();
    if (mu.0 * mu_prime.1) > (mu_prime.0 * mu.1) {
        return Err(MaglatError::InvalidArgument("need mu <= mu_prime".into()));
    }
    if cube
        .dilated_closed(mu_prime.0, mu_prime.1)
        .grid_nodes(grid)
        .next()
        .is_none()
    {
        return Err(MaglatError::EmptyCube);
    }
    let v = probe.operator.potential();
    let lmag = covariant_magnitude(&probe.u, probe.operator.theta())?;
    let umag: Vec<f64> = probe.u.values().iter().map(|z| z.norm()).collect();
    let r = cube.sidelength(grid);
    let avg_v = dilated_average(grid, cube, (1, 1), |i| v.values()[i], 1.0)?;
    let strength = 1.0 + r * r * avg_v;
    let mut rows = Vec::new();

    let u2_mu = dilated_average(grid, cube, mu, |i| umag[i] * umag[i], 1.0)?;
    let u2_mu_prime = dilated_average(grid, cube, mu_prime, |i| umag[i] * umag[i], 1.0)?;
    let energy = |i: usize| lmag[i] * lmag[i] + v.values()[i] * umag[i] * umag[i];
    let en_mu = dilated_average(grid, cube, mu, energy, 1.0)?;
    let en_mu_prime = dilated_average(grid, cube, mu_prime, energy, 1.0)?;
    let vu2_mu = dilated_average(grid, cube, mu, |i| v.values()[i] * umag[i] * umag[i], 1.0)?;
    let u2_q = dilated_average(grid, cube, (1, 1), |i| umag[i] * umag[i], 1.0)?;
    let lu2_mu = dilated_average(grid, cube, mu, |i| lmag[i] * lmag[i], 1.0)?;
    let lu_p_mu = dilated_average(grid, cube, mu, |i| lmag[i], p_large)?;

    for &k in ks {
        let decay = strength.powf(-k);
        rows.push(SuiteRow::new(
            "decay_u2_nested",
            *cube,
            &[("k", k)],
            u2_mu,
            decay * u2_mu_prime,
        ));
        rows.push(SuiteRow::new(
            "decay_energy_nested",
            *cube,
            &[("k", k)],
            en_mu,
            decay * en_mu_prime,
        ));
        rows.push(SuiteRow::new(
            "decay_Vu2_controls_u2",
            *cube,
            &[("k", k)],
            (r * avg_v).powi(2) * u2_q,
            decay * vu2_mu,
        ));
        rows.push(SuiteRow::new(
            "decay_Lup_controls_u2",
            *cube,
            &[("k", k), ("p", p_large)],
            (r * avg_v).powi(2) * u2_q,
            decay * lu_p_mu.powf(2.0 / p_large),
        ));
        rows.push(SuiteRow::new(
            "decay_Lu2_controls_u2",
            *cube,
            &[("k", k)],
            (r * avg_v).powi(2) * u2_q,
            decay * lu2_mu,
        ));
        // q*-average of Lu against sup of u across the dilation
        let dim = grid.dim();
        if let Some(qstar) = sobolev_conjugate(dim as f64 / 2.0 + 0.5, dim) {
            let lhs =
                dilated_average(grid, cube, (1, 1), |i| lmag[i], qstar)?.powf(1.0 / qstar);
            let sup_u = dilated_sup(grid, cube, mu, |i| umag[i])?;
            rows.push(SuiteRow::new(
                "decay_Lu_vs_sup_u",
                *cube,
                &[("k", k), ("qstar", qstar)],
                lhs,
                sup_u / (r * strength.powf(k)),
            ));
        }
    }
    Ok(rows)
}
