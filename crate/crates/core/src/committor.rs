//! Committor functions on grids, isocommittor level sets and the hitting
//! densities they carry.
//!
//! Both committors are discretized in density-weighted form. With
//! `J = rho b - a grad rho`, the backward equation reads
//! `div(rho a grad q) - J . grad q = 0` and the forward one
//! `div(rho a grad q) + J . grad q = 0`; each row is divided by `rho`. The
//! diffusive part uses conservative 5-point stencils with arithmetic-mean
//! face weights, so reversible models (`J = 0`) give `q- = 1 - q+` exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::contour::{level_set, LevelSetMesh};
use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, NodalField};
use crate::model::{current_field, solve_invariant_density, DensityField, DiffusionModel};
use crate::{Point, Tensor};

/// Target sets for committor problems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    Ball { center: [f64; 2], radius: f64 },
    /// `normal . x <= offset`.
    HalfSpace { normal: [f64; 2], offset: f64 },
}

impl Region {
    pub fn ball(center: Point, radius: f64) -> Self {
        Region::Ball { center: [center.x, center.y], radius }
    }

    /// `{x <= c}` in 1D.
    pub fn below(c: f64) -> Self {
        Region::HalfSpace { normal: [1.0, 0.0], offset: c }
    }

    /// `{x >= c}` in 1D.
    pub fn above(c: f64) -> Self {
        Region::HalfSpace { normal: [-1.0, 0.0], offset: -c }
    }

    pub fn contains(&self, p: &Point, dim: usize) -> bool {
        match *self {
            Region::Ball { center, radius } => {
                let dx = p.x - center[0];
                let dy = if dim == 2 { p.y - center[1] } else { 0.0 };
                dx * dx + dy * dy <= radius * radius
            }
            Region::HalfSpace { normal, offset } => {
                let y = if dim == 2 { normal[1] * p.y } else { 0.0 };
                normal[0] * p.x + y <= offset
            }
        }
    }
}

/// Discretization of the `J . grad q` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// Centered differences, switching to upwind where the cell Péclet
    /// number exceeds one.
    #[default]
    Centered,
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `q = 1` on A, `0` on B; the time-reversed process.
    Backward,
    /// `q = 0` on A, `1` on B.
    Forward,
}

#[derive(Debug, Clone)]
pub struct CommittorField {
    pub field: NodalField,
    pub direction: Direction,
    pub density: Arc<DensityField>,
    pub a: Region,
    pub b: Region,
    /// Relative residual of the linear solve.
    pub residual: f64,
}

impl CommittorField {
    pub fn grid(&self) -> &Grid {
        &self.field.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.field.values
    }

    pub fn value_at(&self, x: &Point) -> f64 {
        self.field.value_at(x)
    }

    pub fn in_a(&self, x: &Point) -> bool {
        self.a.contains(x, self.grid().dim)
    }

    pub fn in_b(&self, x: &Point) -> bool {
        self.b.contains(x, self.grid().dim)
    }
}

/// Solves for `q-` given the invariant density.
pub fn solve_backward_committor(
    model: &DiffusionModel,
    rho: &DensityField,
    a: Region,
    b: Region,
    grid: &Grid,
    scheme: Advection,
) -> Result<CommittorField> {
    solve_committor(model, Arc::new(rho.clone()), a, b, grid, scheme, Direction::Backward)
}

/// Solves for `q+`. The invariant density is the analytic one for
/// reversible models, the attached field if present, and otherwise solved
/// on `grid`.
pub fn solve_forward_committor(
    model: &DiffusionModel,
    a: Region,
    b: Region,
    grid: &Grid,
    scheme: Advection,
) -> Result<CommittorField> {
    let rho = default_density(model, grid)?;
    solve_committor(model, Arc::new(rho), a, b, grid, scheme, Direction::Forward)
}

/// The density a committor solve on `grid` should use by default.
pub fn default_density(model: &DiffusionModel, grid: &Grid) -> Result<DensityField> {
    if model.is_reversible() && model.potential().is_some() {
        model.analytic_density_field(grid)
    } else if let Some(d) = model.attached_density() {
        let values = grid.nodes().map(|p| d.value_at(&p).max(0.0)).collect();
        DensityField::normalized(grid.clone(), values)
    } else {
        solve_invariant_density(model, grid)
    }
}

fn solve_committor(
    model: &DiffusionModel,
    rho: Arc<DensityField>,
    a: Region,
    b: Region,
    grid: &Grid,
    scheme: Advection,
    direction: Direction,
) -> Result<CommittorField> {
    if grid.dim != model.dim() {
        return Err(invalid("grid and model dimensions differ"));
    }
    let dim = grid.dim;
    let n = grid.len();
    let nodes: Vec<Point> = grid.nodes().collect();
    let in_a: Vec<bool> = nodes.iter().map(|p| a.contains(p, dim)).collect();
    let in_b: Vec<bool> = nodes.iter().map(|p| b.contains(p, dim)).collect();
    if in_a.iter().zip(&in_b).any(|(x, y)| *x && *y) {
        return Err(invalid("regions A and B overlap on the grid"));
    }
    if !in_a.iter().any(|x| *x) || !in_b.iter().any(|x| *x) {
        return Err(invalid("regions A and B must each contain a grid node"));
    }
    let same_grid = rho.grid() == grid;
    let r: Vec<f64> = if same_grid {
        rho.values().to_vec()
    } else {
        nodes.iter().map(|p| rho.value_at(p)).collect()
    };
    if r.iter().enumerate().any(|(k, v)| !(*v > 0.0) && !in_a[k] && !in_b[k]) {
        return Err(invalid("density must be positive on the domain"));
    }
    // Advection velocity s J / rho at nodes.
    let sign = match direction {
        Direction::Backward => -1.0,
        Direction::Forward => 1.0,
    };
    let velocity: Vec<Point> = if model.is_reversible() {
        vec![Point::zeros(); n]
    } else {
        let rho_here = if same_grid {
            (*rho).clone()
        } else {
            DensityField::normalized(grid.clone(), r.clone())?
        };
        current_field(model, &rho_here)?
            .iter()
            .zip(&r)
            .map(|(j, rv)| sign * j / *rv)
            .collect()
    };
    let tensors: Vec<Tensor> = nodes.iter().map(|p| model.tensor(p)).collect();
    for t in &tensors {
        if dim == 2 && (t[(0, 1)] != 0.0 || t[(1, 0)] != 0.0) {
            return Err(invalid("grid solvers support diagonal diffusion tensors only"));
        }
    }
    let (hi_val, lo_val) = match direction {
        Direction::Backward => (1.0, 0.0),
        Direction::Forward => (0.0, 1.0),
    };
    let mut m = crate::linalg::SparseMatrix::new(n);
    let mut rhs = vec![0.0; n];
    let axes: &[usize] = if dim == 1 { &[0] } else { &[0, 1] };
    for k in 0..n {
        if in_a[k] || in_b[k] {
            m.add(k, k, 1.0);
            rhs[k] = if in_a[k] { hi_val } else { lo_val };
            continue;
        }
        let (i, j) = grid.coords(k);
        let mut diag = 0.0;
        for &ax in axes {
            let (h, pos, count) = if ax == 0 { (grid.hx, i, grid.nx) } else { (grid.hy, j, grid.ny) };
            let stride = if ax == 0 { 1 } else { grid.nx };
            let a_k = tensors[k][(ax, ax)];
            let coef = |nb: usize, weight: f64, m: &mut crate::linalg::SparseMatrix| {
                let face = 0.5 * (r[k] * a_k + r[nb] * tensors[nb][(ax, ax)]);
                let c = weight * face / (h * h) / r[k];
                m.add(k, nb, c);
                c
            };
            // Boundary nodes carry half volumes: the one interior face
            // counts twice and the outer face carries no flux.
            if pos == 0 {
                diag -= coef(k + stride, 2.0, &mut m);
            } else if pos == count - 1 {
                diag -= coef(k - stride, 2.0, &mut m);
            } else {
                diag -= coef(k + stride, 1.0, &mut m);
                diag -= coef(k - stride, 1.0, &mut m);
            }
            let v = velocity[k][ax];
            if v == 0.0 {
                continue;
            }
            let peclet = v.abs() * h / (2.0 * a_k);
            let upwind = scheme == Advection::Upwind || peclet > 1.0 || pos == 0 || pos == count - 1;
            if upwind {
                // Difference in the direction of v.
                if v > 0.0 && pos + 1 < count {
                    m.add(k, k + stride, v / h);
                    diag -= v / h;
                } else if v < 0.0 && pos > 0 {
                    m.add(k, k - stride, -v / h);
                    diag += v / h;
                }
            } else {
                m.add(k, k + stride, v / (2.0 * h));
                m.add(k, k - stride, -v / (2.0 * h));
            }
        }
        m.add(k, k, diag);
    }
    let q = m.solve_banded(&rhs, if dim == 2 { grid.nx } else { 1 })?;
    let residual = m.relative_residual(&q, &rhs);
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("committor solve produced non-finite values".into()));
    }
    // Clip round-off outside [0, 1]; the discrete maximum principle holds.
    let q: Vec<f64> = q.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(CommittorField {
        field: NodalField::new(grid.clone(), q)?,
        direction,
        density: rho,
        a,
        b,
        residual,
    })
}

/// The level set `{q = z}` for `0 < z < 1`; disconnected pieces are rejected.
pub fn extract_level_set(field: &CommittorField, z: f64) -> Result<LevelSetMesh> {
    if !(z > 0.0 && z < 1.0) {
        return Err(invalid(format!("level {z} must lie strictly between 0 and 1")));
    }
    level_set(&field.field, z, true)
}

/// Integrand `rho / |grad q| <a grad q, grad q>` at the mesh points.
fn flux_integrand(model: &DiffusionModel, rho: &DensityField, mesh: &LevelSetMesh) -> Result<Vec<f64>> {
    mesh.points
        .iter()
        .zip(mesh.normals.iter().zip(&mesh.grad_norms))
        .map(|(p, (n, g))| {
            if !(*g > crate::milestones::REGULARITY_THRESHOLD) {
                return Err(Error::IrregularLevel { level: mesh.level, grad_norm: *g, at: *p });
            }
            let grad = n * *g;
            let a = model.tensor(p);
            let quad = if mesh.dim == 1 { a[(0, 0)] * grad.x * grad.x } else { grad.dot(&(a * grad)) };
            Ok(rho.value_at(p) / g * quad)
        })
        .collect()
}

/// `Z = int rho / |grad q| <a grad q, grad q> dsigma` over the level set
/// (trapezoidal rule; a point evaluation in 1D).
pub fn surface_integral_z(
    model: &DiffusionModel,
    rho: &DensityField,
    field: &CommittorField,
    mesh: &LevelSetMesh,
) -> Result<f64> {
    let _ = field;
    let vals = flux_integrand(model, rho, mesh)?;
    Ok(mesh.integrate(&vals))
}

/// The hitting density on an isocommittor milestone, sampled at mesh points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MilestoneDensity {
    pub mesh: LevelSetMesh,
    pub values: Vec<f64>,
    pub z_norm: f64,
}

impl MilestoneDensity {
    /// Mass (by the same trapezoidal rule) of the density.
    pub fn total(&self) -> f64 {
        self.mesh.integrate(&self.values)
    }

    /// CDF in arc length; the density is linear on each segment, so the
    /// CDF is piecewise quadratic.
    pub fn cdf(&self, s: f64) -> f64 {
        if self.mesh.dim == 1 {
            return if s >= 0.0 { 1.0 } else { 0.0 };
        }
        let pts = &self.mesh.points;
        let mut acc = 0.0;
        let mut start = 0.0;
        for (a, b) in self.mesh.segments() {
            let len = (pts[b] - pts[a]).norm();
            let (va, vb) = (self.values[a], self.values[b]);
            if s <= start + len {
                let t = (s - start).max(0.0);
                let slope = if len > 0.0 { (vb - va) / len } else { 0.0 };
                return (acc + va * t + 0.5 * slope * t * t).min(1.0);
            }
            acc += 0.5 * (va + vb) * len;
            start += len;
        }
        acc.min(1.0)
    }
}

/// `rho_i = Z_i^{-1} rho / |grad q| <a grad q, grad q>` at the mesh points.
pub fn milestone_density(
    model: &DiffusionModel,
    rho: &DensityField,
    field: &CommittorField,
    mesh: &LevelSetMesh,
) -> Result<MilestoneDensity> {
    let _ = field;
    let vals = flux_integrand(model, rho, mesh)?;
    let z = mesh.integrate(&vals);
    if !(z > 1e-300) || !z.is_finite() {
        return Err(Error::Singular(format!("normalization Z = {z:e} at level {}", mesh.level)));
    }
    Ok(MilestoneDensity { mesh: mesh.clone(), values: vals.iter().map(|v| v / z).collect(), z_norm: z })
}

/// Transition probabilities between isocommittor milestones at strictly
/// decreasing levels `z`: the probability of moving from `i` to a neighbor
/// is proportional to the committor distance to the opposite neighbor.
pub fn analytic_q(levels: &[f64]) -> Result<DMatrix<f64>> {
    let n = levels.len();
    if n < 2 {
        return Err(invalid("need at least two levels"));
    }
    if levels.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(invalid(format!("levels must be strictly decreasing: {levels:?}")));
    }
    let mut q = DMatrix::zeros(n, n);
    q[(0, 1)] = 1.0;
    q[(n - 1, n - 2)] = 1.0;
    for i in 1..n - 1 {
        let span = levels[i - 1] - levels[i + 1];
        let down = (levels[i] - levels[i + 1]) / span;
        q[(i, i - 1)] = down;
        q[(i, i + 1)] = 1.0 - down;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoundingBox;
    use crate::model::{make_overdamped_langevin, Benchmark, Flat};
    use crate::point;
    use proptest::prelude::*;

    fn free_bm_1d() -> DiffusionModel {
        make_overdamped_langevin(Arc::new(Flat { dim: 1 }), 1.0).unwrap()
    }

    #[test]
    fn free_motion_committors_are_linear() {
        let m = free_bm_1d();
        let g = Grid::new_1d(0.0, 1.0, 101).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        let qm = solve_backward_committor(&m, &rho, Region::below(0.0), Region::above(1.0), &g, Advection::Centered)
            .unwrap();
        let qp = solve_forward_committor(&m, Region::below(0.0), Region::above(1.0), &g, Advection::Centered).unwrap();
        for (k, p) in g.nodes().enumerate() {
            assert!((qm.values()[k] - (1.0 - p.x)).abs() < 1e-10);
            assert!((qp.values()[k] - p.x).abs() < 1e-10);
        }
        let mesh = extract_level_set(&qm, 0.25).unwrap();
        assert!((mesh.points[0].x - 0.75).abs() < 1e-10);
        let z = surface_integral_z(&m, &rho, &qm, &mesh).unwrap();
        assert!((z - 1.0).abs() < 1e-8, "Z = {z}");
        let d = milestone_density(&m, &rho, &qm, &mesh).unwrap();
        assert_eq!(d.values.len(), 1);
        assert!((d.values[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reversible_backward_and_forward_are_complementary() {
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let b = m.bounds();
        let g = Grid::new_1d(b.lo[0], b.hi[0], 1201).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        let (ra, rb) = (Region::below(-1.0), Region::above(1.0));
        let qm = solve_backward_committor(&m, &rho, ra, rb, &g, Advection::Centered).unwrap();
        let qp = solve_forward_committor(&m, ra, rb, &g, Advection::Centered).unwrap();
        for k in 0..g.len() {
            assert!((qm.values()[k] + qp.values()[k] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ou_committor_matches_quadrature() {
        // q+(x) = int_{-1}^x e^{y^2/2} dy / int_{-1}^{1} e^{y^2/2} dy.
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let b = m.bounds();
        let g = Grid::new_1d(b.lo[0], b.hi[0], 1201).unwrap();
        let q = solve_forward_committor(&m, Region::below(-1.0), Region::above(1.0), &g, Advection::Centered).unwrap();
        let total = crate::quadrature::integrate(|y| (y * y / 2.0).exp(), -1.0, 1.0, 0.0, 1e-13).unwrap();
        for &x in &[-0.5, 0.0, 0.3, 0.8] {
            let exact = crate::quadrature::integrate(|y| (y * y / 2.0).exp(), -1.0, x, 0.0, 1e-13).unwrap() / total;
            let got = q.value_at(&point(x, 0.0));
            assert!((got - exact).abs() < 1e-4, "x = {x}: {got} vs {exact}");
        }
    }

    fn dw2d_setup(n: usize) -> (DiffusionModel, Grid, DensityField, Region, Region) {
        let m = Benchmark::DoubleWell2d { beta: 1.0 }.build().unwrap();
        let g = Grid::new_2d(m.bounds(), [n, n]).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        (m, g, rho, Region::ball(point(-1.0, 0.0), 0.2), Region::ball(point(1.0, 0.0), 0.2))
    }

    #[test]
    fn symmetric_double_well_half_level_is_the_axis() {
        let (m, g, rho, a, b) = dw2d_setup(101);
        let q = solve_backward_committor(&m, &rho, a, b, &g, Advection::Centered).unwrap();
        let (lo, hi) = q.field.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        let mesh = extract_level_set(&q, 0.5).unwrap();
        assert!(!mesh.closed);
        for p in &mesh.points {
            assert!(p.x.abs() < 2.0 * g.hx, "point {p:?}");
            assert!((q.value_at(p) - 0.5).abs() < 1e-6);
        }
        let d = milestone_density(&m, &rho, &q, &mesh).unwrap();
        assert!((d.total() - 1.0).abs() < 1e-6);
        assert!((d.cdf(mesh.length()) - 1.0).abs() < 1e-6);
        // The density peaks near the saddle at y = 0.
        let peak = (0..d.values.len()).max_by(|&i, &j| d.values[i].total_cmp(&d.values[j])).unwrap();
        assert!(mesh.points[peak].y.abs() < 0.1);
    }

    #[test]
    fn nonreversible_committors_are_not_complementary() {
        let m = Benchmark::Nonrev2d { beta: 1.0, curl: 0.5 }.build().unwrap();
        let g = Grid::new_2d(m.bounds(), [81, 81]).unwrap();
        let (a, b) = (Region::ball(point(-1.0, 0.0), 0.3), Region::ball(point(1.0, 0.0), 0.3));
        let rho = solve_invariant_density(&m, &g).unwrap();
        let qm = solve_backward_committor(&m, &rho, a, b, &g, Advection::Centered).unwrap();
        let qp = solve_forward_committor(&m, a, b, &g, Advection::Centered).unwrap();
        let diff = qm
            .values()
            .iter()
            .zip(qp.values())
            .map(|(x, y)| (x + y - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(diff > 10.0 * 1e-8, "max |q- + q+ - 1| = {diff}");
        assert!(qm.residual < 1e-10);
    }

    #[test]
    fn uniform_hitting_density_in_a_strip() {
        let m = make_overdamped_langevin(Arc::new(Flat { dim: 2 }), 1.0).unwrap();
        let g = Grid::new_2d(BoundingBox::new([0.0, 0.0], [1.0, 1.0]), [41, 41]).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        let q = solve_backward_committor(
            &m,
            &rho,
            Region::HalfSpace { normal: [1.0, 0.0], offset: 0.0 },
            Region::HalfSpace { normal: [-1.0, 0.0], offset: -1.0 },
            &g,
            Advection::Centered,
        )
        .unwrap();
        let mesh = extract_level_set(&q, 0.3).unwrap();
        let d = milestone_density(&m, &rho, &q, &mesh).unwrap();
        for v in &d.values {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn level_outside_unit_interval_rejected() {
        let m = free_bm_1d();
        let g = Grid::new_1d(0.0, 1.0, 64).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        let q = solve_backward_committor(&m, &rho, Region::below(0.0), Region::above(1.0), &g, Advection::Centered)
            .unwrap();
        assert!(extract_level_set(&q, 0.0).is_err());
        assert!(extract_level_set(&q, 1.2).is_err());
    }

    #[test]
    fn overlapping_or_empty_regions_rejected() {
        let m = free_bm_1d();
        let g = Grid::new_1d(0.0, 1.0, 64).unwrap();
        let rho = m.analytic_density_field(&g).unwrap();
        assert!(solve_backward_committor(&m, &rho, Region::below(0.6), Region::above(0.4), &g, Advection::Centered).is_err());
        assert!(solve_backward_committor(&m, &rho, Region::below(-1.0), Region::above(1.0), &g, Advection::Centered).is_err());
    }

    #[test]
    fn analytic_q_examples() {
        let q = analytic_q(&[1.0, 0.5, 0.0]).unwrap();
        assert_eq!((q[(1, 0)], q[(1, 2)]), (0.5, 0.5));
        let q = analytic_q(&[1.0, 0.75, 0.25, 0.0]).unwrap();
        assert!((q[(1, 0)] - 2.0 / 3.0).abs() < 1e-15 && (q[(1, 2)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q[(2, 1)] - 1.0 / 3.0).abs() < 1e-15 && (q[(2, 3)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((q[(0, 1)], q[(3, 2)]), (1.0, 1.0));
        assert!(analytic_q(&[0.0, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn analytic_q_rows_are_stochastic(raw in proptest::collection::vec(0.0f64..1.0, 2..9)) {
            let mut z = raw;
            z.sort_by(|a, b| b.total_cmp(a));
            z.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            prop_assume!(z.len() >= 2);
            let q = analytic_q(&z).unwrap();
            for i in 0..z.len() {
                let s: f64 = q.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-15);
                prop_assert!(q.row(i).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn committor_obeys_maximum_principle(beta in 0.5f64..4.0, ca in -1.5f64..-0.5, cb in 0.5f64..1.5) {
            let m = Benchmark::DoubleWell1d { beta }.build().unwrap();
            let b = m.bounds();
            let g = Grid::new_1d(b.lo[0], b.hi[0], 400).unwrap();
            let q = solve_forward_committor(&m, Region::below(ca), Region::above(cb), &g, Advection::Centered).unwrap();
            // Monotone between the sets, constant outside.
            for w in q.values().windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }
}
