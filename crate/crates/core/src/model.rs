//! Diffusion processes `dX = (b(X) + div a(X)) dt + sqrt(2) sigma(X) dW` with
//! `sigma sigma^T = a`, their invariant densities and stationary currents.
//!
//! The generator is `L f = div(a grad f) + b . grad f`; the invariant density
//! solves `div(a grad rho - b rho) = 0`. Built-in benchmarks are overdamped
//! Langevin dynamics with friction and mass set to one, so `a = I / beta` and
//! `b = -grad V` (plus an optional rotational part in 2D that leaves
//! `exp(-beta V)` invariant).

use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{BoundingBox, Grid, NodalField};
use crate::linalg::SparseMatrix;
use crate::{point, Point, Tensor};

/// A potential energy with analytic derivatives.
pub trait Potential: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &Point) -> f64;
    fn gradient(&self, x: &Point) -> Point;
    fn hessian(&self, x: &Point) -> Tensor;
    /// Local minima, used to size default bounding boxes.
    fn minima(&self) -> Vec<Point> {
        Vec::new()
    }
}

/// `V(x) = k x^2 / 2` in 1D (Ornstein–Uhlenbeck).
#[derive(Debug, Clone, Copy)]
pub struct Harmonic {
    pub stiffness: f64,
}

impl Potential for Harmonic {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &Point) -> f64 {
        0.5 * self.stiffness * x.x * x.x
    }
    fn gradient(&self, x: &Point) -> Point {
        point(self.stiffness * x.x, 0.0)
    }
    fn hessian(&self, _x: &Point) -> Tensor {
        Tensor::new(self.stiffness, 0.0, 0.0, 0.0)
    }
    fn minima(&self) -> Vec<Point> {
        vec![point(0.0, 0.0)]
    }
}

/// `V(x) = (x^2 - 1)^2`.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell1d;

impl Potential for DoubleWell1d {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &Point) -> f64 {
        let u = x.x * x.x - 1.0;
        u * u
    }
    fn gradient(&self, x: &Point) -> Point {
        point(4.0 * x.x * (x.x * x.x - 1.0), 0.0)
    }
    fn hessian(&self, x: &Point) -> Tensor {
        Tensor::new(12.0 * x.x * x.x - 4.0, 0.0, 0.0, 0.0)
    }
    fn minima(&self) -> Vec<Point> {
        vec![point(-1.0, 0.0), point(1.0, 0.0)]
    }
}

/// `V(x, y) = (x^2 - 1)^2 + 2 y^2`.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell2d;

impl Potential for DoubleWell2d {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &Point) -> f64 {
        let u = x.x * x.x - 1.0;
        u * u + 2.0 * x.y * x.y
    }
    fn gradient(&self, x: &Point) -> Point {
        point(4.0 * x.x * (x.x * x.x - 1.0), 4.0 * x.y)
    }
    fn hessian(&self, x: &Point) -> Tensor {
        Tensor::new(12.0 * x.x * x.x - 4.0, 0.0, 0.0, 4.0)
    }
    fn minima(&self) -> Vec<Point> {
        vec![point(-1.0, 0.0), point(1.0, 0.0)]
    }
}

/// `V = 0`; free Brownian motion, only meaningful on bounded domains.
#[derive(Debug, Clone, Copy)]
pub struct Flat {
    pub dim: usize,
}

impl Potential for Flat {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, _x: &Point) -> f64 {
        0.0
    }
    fn gradient(&self, _x: &Point) -> Point {
        Point::zeros()
    }
    fn hessian(&self, _x: &Point) -> Tensor {
        Tensor::zeros()
    }
}

type VectorFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;
type TensorFn = Arc<dyn Fn(&Point) -> Tensor + Send + Sync>;

/// A uniformly elliptic diffusion in one or two dimensions.
///
/// For `dim == 1` only the leading components of vectors and the `(0, 0)`
/// entries of tensors are meaningful.
#[derive(Clone)]
pub struct DiffusionModel {
    name: String,
    dim: usize,
    drift: VectorFn,
    tensor: TensorFn,
    noise: TensorFn,
    tensor_divergence: Option<VectorFn>,
    constant_tensor: bool,
    potential: Option<Arc<dyn Potential>>,
    beta: Option<f64>,
    reversible: bool,
    bounds: BoundingBox,
    density: Option<Arc<DensityField>>,
    partition: Arc<OnceLock<f64>>,
}

impl Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("beta", &self.beta)
            .field("reversible", &self.reversible)
            .field("bounds", &self.bounds)
            .finish_non_exhaustive()
    }
}

/// Overdamped Langevin dynamics in `potential` at inverse temperature `beta`:
/// `a = I / beta`, `b = -grad V`, `sigma = I / sqrt(beta)`.
pub fn make_overdamped_langevin(potential: Arc<dyn Potential>, beta: f64) -> Result<DiffusionModel> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(invalid(format!("inverse temperature must be positive, got {beta}")));
    }
    let dim = potential.dim();
    if dim != 1 && dim != 2 {
        return Err(invalid(format!("unsupported dimension {dim}")));
    }
    let d = if dim == 1 { Tensor::new(1.0, 0.0, 0.0, 0.0) } else { Tensor::identity() };
    let a = d / beta;
    let s = d / beta.sqrt();
    let bounds = default_bounds(potential.as_ref(), beta);
    let pot = potential.clone();
    Ok(DiffusionModel {
        name: "overdamped_langevin".into(),
        dim,
        drift: Arc::new(move |x| -pot.gradient(x)),
        tensor: Arc::new(move |_| a),
        noise: Arc::new(move |_| s),
        tensor_divergence: None,
        constant_tensor: true,
        potential: Some(potential),
        beta: Some(beta),
        reversible: true,
        bounds,
        density: None,
        partition: Arc::new(OnceLock::new()),
    })
}

/// Six standard deviations of each well's local Gaussian around every
/// minimum; the unit box when the potential has no minima.
fn default_bounds(potential: &dyn Potential, beta: f64) -> BoundingBox {
    let minima = potential.minima();
    let dim = potential.dim();
    if minima.is_empty() {
        return if dim == 1 {
            BoundingBox::interval(0.0, 1.0)
        } else {
            BoundingBox::new([0.0, 0.0], [1.0, 1.0])
        };
    }
    let mut lo = [f64::INFINITY, 0.0];
    let mut hi = [f64::NEG_INFINITY, 0.0];
    if dim == 2 {
        lo[1] = f64::INFINITY;
        hi[1] = f64::NEG_INFINITY;
    }
    for m in &minima {
        let h = potential.hessian(m);
        for k in 0..dim {
            let std = 1.0 / (beta * h[(k, k)].max(1e-12)).sqrt();
            lo[k] = lo[k].min(m[k] - 6.0 * std);
            hi[k] = hi[k].max(m[k] + 6.0 * std);
        }
    }
    BoundingBox::new(lo, hi)
}

impl DiffusionModel {
    /// A general model from drift, diffusion tensor and noise factor.
    /// `tensor_divergence` defaults to zero (constant `a`).
    pub fn general(
        name: impl Into<String>,
        dim: usize,
        drift: impl Fn(&Point) -> Point + Send + Sync + 'static,
        tensor: impl Fn(&Point) -> Tensor + Send + Sync + 'static,
        noise: impl Fn(&Point) -> Tensor + Send + Sync + 'static,
        bounds: BoundingBox,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("unsupported dimension {dim}")));
        }
        Ok(Self {
            name: name.into(),
            dim,
            drift: Arc::new(drift),
            tensor: Arc::new(tensor),
            noise: Arc::new(noise),
            tensor_divergence: None,
            constant_tensor: false,
            potential: None,
            beta: None,
            reversible: false,
            bounds,
            density: None,
            partition: Arc::new(OnceLock::new()),
        })
    }

    pub fn with_tensor_divergence(
        mut self,
        div: impl Fn(&Point) -> Point + Send + Sync + 'static,
    ) -> Self {
        self.tensor_divergence = Some(Arc::new(div));
        self
    }

    /// Declares `a` constant so steppers may skip its divergence.
    pub fn with_constant_tensor(mut self) -> Self {
        self.constant_tensor = true;
        self
    }

    /// Adds `curl * (-dV/dy, dV/dx)` to the drift. With `a = I / beta` the
    /// density `exp(-beta V)` stays invariant but detailed balance is lost.
    pub fn with_rotation(mut self, curl: f64) -> Result<Self> {
        if self.dim != 2 {
            return Err(invalid("rotational drift requires a 2D model"));
        }
        let pot = self
            .potential
            .clone()
            .ok_or_else(|| invalid("rotational drift requires a potential"))?;
        if curl == 0.0 {
            return Ok(self);
        }
        let base = self.drift.clone();
        self.drift = Arc::new(move |x| {
            let g = pot.gradient(x);
            base(x) + curl * point(-g.y, g.x)
        });
        self.reversible = false;
        self.name = format!("{}+rotation", self.name);
        Ok(self)
    }

    pub fn with_bounds(mut self, bounds: BoundingBox) -> Self {
        self.bounds = bounds;
        self.partition = Arc::new(OnceLock::new());
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Attaches a numerically solved invariant density.
    pub fn with_density(mut self, density: DensityField) -> Self {
        self.density = Some(Arc::new(density));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn beta(&self) -> Option<f64> {
        self.beta
    }
    pub fn is_reversible(&self) -> bool {
        self.reversible
    }
    pub fn potential(&self) -> Option<&Arc<dyn Potential>> {
        self.potential.as_ref()
    }
    pub fn bounds(&self) -> BoundingBox {
        self.bounds
    }
    pub fn has_constant_tensor(&self) -> bool {
        self.constant_tensor
    }
    pub fn attached_density(&self) -> Option<&DensityField> {
        self.density.as_deref()
    }

    #[inline]
    pub fn drift(&self, x: &Point) -> Point {
        (self.drift)(x)
    }

    #[inline]
    pub fn tensor(&self, x: &Point) -> Tensor {
        (self.tensor)(x)
    }

    #[inline]
    pub fn noise(&self, x: &Point) -> Tensor {
        (self.noise)(x)
    }

    /// Row-wise divergence of `a`; zero unless supplied.
    #[inline]
    pub fn tensor_divergence(&self, x: &Point) -> Point {
        match &self.tensor_divergence {
            Some(f) if !self.constant_tensor => f(x),
            _ => Point::zeros(),
        }
    }

    /// Checks symmetry, positive definiteness, `sigma sigma^T = a` and, for
    /// reversible models, `b = -beta a grad V` at `x`.
    pub fn check_at(&self, x: &Point) -> Result<()> {
        let a = self.tensor(x);
        let s = self.noise(x);
        let d = self.dim;
        if d == 1 {
            if !(a[(0, 0)] > 0.0) {
                return Err(invalid(format!("diffusion tensor not positive at {x:?}")));
            }
        } else {
            if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * a.norm() {
                return Err(invalid(format!("diffusion tensor not symmetric at {x:?}")));
            }
            let eig = a.symmetric_eigenvalues();
            if !(eig.min() > 0.0) {
                return Err(invalid(format!("diffusion tensor not positive definite at {x:?}")));
            }
        }
        let sst = s * s.transpose();
        for r in 0..d {
            for c in 0..d {
                if (sst[(r, c)] - a[(r, c)]).abs() > 1e-12 * (1.0 + a[(r, c)].abs()) {
                    return Err(invalid(format!("sigma sigma^T != a at {x:?}")));
                }
            }
        }
        if self.reversible {
            if let (Some(pot), Some(beta)) = (&self.potential, self.beta) {
                let expect = -(a * pot.gradient(x)) * beta;
                let b = self.drift(x);
                for k in 0..d {
                    if (b[k] - expect[k]).abs() > 1e-10 * (1.0 + expect[k].abs()) {
                        return Err(invalid(format!("reversible drift mismatch at {x:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Unnormalized Gibbs weight `exp(-beta (V(x) - V_ref))`.
    fn gibbs_weight(&self, x: &Point, v_ref: f64) -> Option<f64> {
        let pot = self.potential.as_ref()?;
        let beta = self.beta?;
        Some((-beta * (pot.value(x) - v_ref)).exp())
    }

    fn reference_energy(&self) -> f64 {
        self.potential
            .as_ref()
            .map(|p| {
                p.minima()
                    .iter()
                    .map(|m| p.value(m))
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|v| v.is_finite())
            .unwrap_or(0.0)
    }

    /// Grid used for analytic normalization constants.
    pub fn reference_grid(&self) -> Result<Grid> {
        match self.dim {
            1 => Grid::new_1d(self.bounds.lo[0], self.bounds.hi[0], 4001),
            _ => Grid::new_2d(self.bounds, [401, 401]),
        }
    }

    fn partition_function(&self) -> Result<f64> {
        if let Some(z) = self.partition.get() {
            return Ok(*z);
        }
        let v_ref = self.reference_energy();
        let grid = self.reference_grid()?;
        let values: Vec<f64> = grid
            .nodes()
            .map(|p| self.gibbs_weight(&p, v_ref).unwrap_or(0.0))
            .collect();
        let z = grid.integrate(&values);
        if !(z > 0.0) {
            return Err(Error::DensityUnavailable("partition function vanished".into()));
        }
        Ok(*self.partition.get_or_init(|| z))
    }

    /// `exp(-beta V) / Z` as a field on `grid`, normalized by the grid's own
    /// trapezoidal rule.
    pub fn analytic_density_field(&self, grid: &Grid) -> Result<DensityField> {
        if !self.reversible {
            return Err(Error::DensityUnavailable(
                "analytic density requires a reversible model".into(),
            ));
        }
        let v_ref = self.reference_energy();
        let values: Vec<f64> = grid
            .nodes()
            .map(|p| self.gibbs_weight(&p, v_ref).unwrap_or(0.0))
            .collect();
        DensityField::normalized(grid.clone(), values)
    }
}

/// A normalized invariant density sampled on a grid.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub field: NodalField,
    /// The factor the raw nodal values were divided by.
    pub normalization: f64,
}

impl DensityField {
    pub fn normalized(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("density values must be nonnegative"));
        }
        let z = grid.integrate(&values);
        if !(z > 0.0) || !z.is_finite() {
            return Err(invalid("density has zero mass"));
        }
        let values = values.into_iter().map(|v| v / z).collect();
        Ok(Self { field: NodalField::new(grid, values)?, normalization: z })
    }

    pub fn grid(&self) -> &Grid {
        &self.field.grid
    }

    pub fn value_at(&self, x: &Point) -> f64 {
        self.field.value_at(x)
    }

    pub fn values(&self) -> &[f64] {
        &self.field.values
    }

    pub fn total_mass(&self) -> f64 {
        self.grid().integrate(&self.field.values)
    }
}

/// The invariant density at `x`: analytic `exp(-beta V)/Z` for reversible
/// models, otherwise interpolation of an attached [`DensityField`].
pub fn invariant_density(model: &DiffusionModel, x: &Point) -> Result<f64> {
    if model.reversible && model.potential.is_some() && model.beta.is_some() {
        let z = model.partition_function()?;
        let w = model.gibbs_weight(x, model.reference_energy()).unwrap_or(0.0);
        return Ok(w / z);
    }
    match &model.density {
        Some(d) => d.field.checked_value_at(x),
        None => Err(Error::DensityUnavailable(format!(
            "model '{}' is not reversible and has no attached density field",
            model.name
        ))),
    }
}

/// `B(x) = x / (e^x - 1)`, the Bernoulli function of exponential fitting.
pub(crate) fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - 0.5 * x + x * x / 12.0
    } else if x > 700.0 {
        0.0
    } else {
        x / x.exp_m1()
    }
}

fn diagonal_tensor(model: &DiffusionModel, x: &Point) -> Result<(f64, f64)> {
    let a = model.tensor(x);
    if model.dim == 2 && (a[(0, 1)].abs() > 0.0 || a[(1, 0)].abs() > 0.0) {
        return Err(invalid(
            "grid solvers support diagonal diffusion tensors only",
        ));
    }
    Ok((a[(0, 0)], a[(1, 1)]))
}

/// Assembles the discrete adjoint operator `div(a grad rho - b rho)` with
/// exponentially fitted (Scharfetter–Gummel) face fluxes and no flux through
/// the outer boundary. Row `k` is the net flux balance of node `k`.
pub(crate) fn adjoint_operator(model: &DiffusionModel, grid: &Grid) -> Result<SparseMatrix> {
    let mut m = SparseMatrix::new(grid.len());
    let faces: &[(usize, f64, f64)] = if grid.dim == 1 {
        &[(0, 1.0, 0.0)]
    } else {
        &[(0, 1.0, 0.0), (1, 0.0, 1.0)]
    };
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let k = grid.index(i, j);
            for &(axis, ex, ey) in faces {
                let (ni, nj) = (i + ex as usize, j + ey as usize);
                if ni >= grid.nx || nj >= grid.ny {
                    continue;
                }
                let kn = grid.index(ni, nj);
                let (h, face_len) = if axis == 0 {
                    (grid.hx, if grid.dim == 2 { grid.hy } else { 1.0 })
                } else {
                    (grid.hy, grid.hx)
                };
                let mid = 0.5 * (grid.node(i, j) + grid.node(ni, nj));
                let (axx, ayy) = diagonal_tensor(model, &mid)?;
                let diff = if axis == 0 { axx } else { ayy };
                let b = model.drift(&mid)[axis] + model.tensor_divergence(&mid)[axis];
                let pe = b * h / diff;
                // Flux from k to kn: (diff/h) [B(-pe) rho_k - B(pe) rho_kn].
                let ck = face_len * diff / h * bernoulli(-pe);
                let cn = face_len * diff / h * bernoulli(pe);
                // Outflow from k, inflow to kn.
                m.add(k, k, -ck);
                m.add(k, kn, cn);
                m.add(kn, k, ck);
                m.add(kn, kn, -cn);
            }
        }
    }
    Ok(m)
}

/// Solves `L* rho = 0` on `grid` with no-flux outer boundary and `int rho = 1`.
pub fn solve_invariant_density(model: &DiffusionModel, grid: &Grid) -> Result<DensityField> {
    if grid.dim != model.dim {
        return Err(invalid("grid and model dimensions differ"));
    }
    let op = adjoint_operator(model, grid)?;
    // Pin the node nearest a potential minimum (or the center) to one; the
    // remaining equations determine the null vector since columns sum to zero.
    let anchor = model
        .potential
        .as_ref()
        .and_then(|p| p.minima().into_iter().next())
        .unwrap_or_else(|| {
            point(
                0.5 * (grid.bounds.lo[0] + grid.bounds.hi[0]),
                0.5 * (grid.bounds.lo[1] + grid.bounds.hi[1]),
            )
        });
    let pin = nearest_node(grid, &anchor);
    let mut pinned = op.clone();
    pinned.clear_row(pin);
    pinned.add(pin, pin, 1.0);
    let mut rhs = vec![0.0; grid.len()];
    rhs[pin] = 1.0;
    let sol = pinned.solve_banded(&rhs, grid.nx)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("density solve produced non-finite values".into()));
    }
    let values: Vec<f64> = sol.iter().map(|v| v.max(0.0)).collect();
    let residual = op.relative_residual(&values, &vec![0.0; grid.len()]);
    if residual > 1e-8 {
        return Err(Error::Singular(format!(
            "density residual {residual:e} exceeds 1e-8"
        )));
    }
    DensityField::normalized(grid.clone(), values)
}

/// Relative residual `|L* rho|_inf / (|L*|_inf |rho|_inf)` of a density field.
pub fn density_residual(model: &DiffusionModel, density: &DensityField) -> Result<f64> {
    let op = adjoint_operator(model, density.grid())?;
    Ok(op.relative_residual(density.values(), &vec![0.0; density.grid().len()]))
}

pub(crate) fn nearest_node(grid: &Grid, p: &Point) -> usize {
    let i = (((p.x - grid.bounds.lo[0]) / grid.hx).round().max(0.0) as usize).min(grid.nx - 1);
    let j = if grid.dim == 2 {
        (((p.y - grid.bounds.lo[1]) / grid.hy).round().max(0.0) as usize).min(grid.ny - 1)
    } else {
        0
    };
    grid.index(i, j)
}

/// `J = rho b - a grad rho` at `x`, with `grad rho` from central differences.
pub fn stationary_current(model: &DiffusionModel, rho: &DensityField, x: &Point) -> Result<Point> {
    if !rho.grid().contains(x) {
        return Err(Error::OutsideGrid(*x));
    }
    let r = rho.value_at(x);
    let g = rho.field.gradient_at(x);
    let a = model.tensor(x);
    let mut j = r * (model.drift(x) + model.tensor_divergence(x)) - a * g;
    if model.dim == 1 {
        j.y = 0.0;
    }
    Ok(j)
}

/// Nodal values of the stationary current. Zero for reversible models.
pub fn current_field(model: &DiffusionModel, rho: &DensityField) -> Result<Vec<Point>> {
    let grid = rho.grid();
    if model.reversible {
        return Ok(vec![Point::zeros(); grid.len()]);
    }
    (0..grid.len())
        .map(|k| {
            let (i, j) = grid.coords(k);
            let x = grid.node(i, j);
            let r = rho.values()[k];
            let g = rho.field.gradient_at_node(k);
            let mut out = r * (model.drift(&x) + model.tensor_divergence(&x)) - model.tensor(&x) * g;
            if model.dim == 1 {
                out.y = 0.0;
            }
            Ok(out)
        })
        .collect()
}

/// Central-difference divergence of a nodal vector field at interior nodes.
pub fn discrete_divergence(grid: &Grid, field: &[Point]) -> Vec<f64> {
    let mut div = vec![0.0; grid.len()];
    for j in 0..grid.ny {
        for i in 1..grid.nx - 1 {
            if grid.dim == 2 && (j == 0 || j == grid.ny - 1) {
                continue;
            }
            let k = grid.index(i, j);
            let mut d = (field[grid.index(i + 1, j)].x - field[grid.index(i - 1, j)].x) / (2.0 * grid.hx);
            if grid.dim == 2 {
                d += (field[grid.index(i, j + 1)].y - field[grid.index(i, j - 1)].y) / (2.0 * grid.hy);
            }
            div[k] = d;
        }
    }
    div
}

/// The benchmark systems, selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Benchmark {
    #[serde(rename = "ou_1d")]
    Ou1d {
        #[serde(default = "one")]
        beta: f64,
    },
    #[serde(rename = "double_well_1d")]
    DoubleWell1d {
        #[serde(default = "one")]
        beta: f64,
    },
    #[serde(rename = "double_well_2d")]
    DoubleWell2d {
        #[serde(default = "one")]
        beta: f64,
    },
    #[serde(rename = "nonrev_2d")]
    Nonrev2d {
        #[serde(default = "one")]
        beta: f64,
        #[serde(default)]
        curl: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Benchmark {
    pub fn build(&self) -> Result<DiffusionModel> {
        match *self {
            Benchmark::Ou1d { beta } => Ok(make_overdamped_langevin(
                Arc::new(Harmonic { stiffness: 1.0 }),
                beta,
            )?
            .with_name("ou_1d")),
            Benchmark::DoubleWell1d { beta } => {
                Ok(make_overdamped_langevin(Arc::new(DoubleWell1d), beta)?.with_name("double_well_1d"))
            }
            Benchmark::DoubleWell2d { beta } => {
                Ok(make_overdamped_langevin(Arc::new(DoubleWell2d), beta)?.with_name("double_well_2d"))
            }
            Benchmark::Nonrev2d { beta, curl } => Ok(make_overdamped_langevin(
                Arc::new(DoubleWell2d),
                beta,
            )?
            .with_rotation(curl)?
            .with_name("nonrev_2d")),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Benchmark::Ou1d { .. } | Benchmark::DoubleWell1d { .. } => 1,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dw1(beta: f64) -> DiffusionModel {
        Benchmark::DoubleWell1d { beta }.build().unwrap()
    }

    #[test]
    fn overdamped_double_well_coefficients() {
        let m = dw1(1.0);
        for &x in &[-1.3, 0.2, 0.7] {
            let p = point(x, 0.0);
            assert!((m.drift(&p).x + 4.0 * x * (x * x - 1.0)).abs() < 1e-14);
            assert_eq!(m.tensor(&p)[(0, 0)], 1.0);
        }
        assert!(m.is_reversible());
    }

    #[test]
    fn ou_at_beta_two() {
        let m = Benchmark::Ou1d { beta: 2.0 }.build().unwrap();
        let p = point(0.8, 0.0);
        assert!((m.drift(&p).x + 0.8).abs() < 1e-15);
        assert!((m.tensor(&p)[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn flat_potential_is_free_brownian_motion() {
        let m = make_overdamped_langevin(Arc::new(Flat { dim: 1 }), 1.0).unwrap();
        assert_eq!(m.drift(&point(0.3, 0.0)).x, 0.0);
        assert_eq!(m.tensor(&point(0.3, 0.0))[(0, 0)], 1.0);
    }

    #[test]
    fn rejects_nonpositive_beta() {
        assert!(make_overdamped_langevin(Arc::new(DoubleWell1d), 0.0).is_err());
        assert!(make_overdamped_langevin(Arc::new(DoubleWell1d), -1.0).is_err());
    }

    #[test]
    fn structural_checks_hold_at_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let models = [
            Benchmark::Ou1d { beta: 1.0 }.build().unwrap(),
            dw1(3.0),
            Benchmark::DoubleWell2d { beta: 1.0 }.build().unwrap(),
            Benchmark::Nonrev2d { beta: 2.0, curl: 0.5 }.build().unwrap(),
        ];
        for m in &models {
            for _ in 0..1000 {
                let p = point(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                m.check_at(&p).unwrap();
            }
        }
    }

    #[test]
    fn ou_density_at_origin() {
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        // The default box for OU at beta = 1 is [-6, 6].
        assert!((m.bounds().lo[0] + 6.0).abs() < 1e-12);
        let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let got = invariant_density(&m, &point(0.0, 0.0)).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn flat_density_is_uniform() {
        let m = make_overdamped_langevin(Arc::new(Flat { dim: 1 }), 1.0).unwrap();
        let a = invariant_density(&m, &point(0.1, 0.0)).unwrap();
        let b = invariant_density(&m, &point(0.9, 0.0)).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonreversible_without_field_has_no_density() {
        let m = Benchmark::Nonrev2d { beta: 1.0, curl: 0.5 }.build().unwrap();
        assert!(matches!(
            invariant_density(&m, &point(0.0, 0.0)),
            Err(Error::DensityUnavailable(_))
        ));
    }

    #[test]
    fn solved_density_matches_gibbs_in_1d() {
        let m = dw1(3.0);
        let b = m.bounds();
        let grid = Grid::new_1d(b.lo[0], b.hi[0], 801).unwrap();
        let solved = solve_invariant_density(&m, &grid).unwrap();
        let exact = m.analytic_density_field(&grid).unwrap();
        let peak = exact.values().iter().cloned().fold(0.0, f64::max);
        let err = solved
            .values()
            .iter()
            .zip(exact.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-3 * peak, "max error {err} vs peak {peak}");
        assert!((solved.total_mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn free_motion_density_is_uniform() {
        let m = make_overdamped_langevin(Arc::new(Flat { dim: 2 }), 1.0).unwrap();
        let grid = Grid::new_2d(m.bounds(), [40, 40]).unwrap();
        let rho = solve_invariant_density(&m, &grid).unwrap();
        for v in rho.values() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotational_drift_keeps_gibbs_density() {
        let m = Benchmark::Nonrev2d { beta: 1.0, curl: 0.5 }.build().unwrap();
        let grid = Grid::new_2d(m.bounds(), [81, 81]).unwrap();
        let solved = solve_invariant_density(&m, &grid).unwrap();
        let gibbs = Benchmark::DoubleWell2d { beta: 1.0 }
            .build()
            .unwrap()
            .analytic_density_field(&grid)
            .unwrap();
        let peak = gibbs.values().iter().cloned().fold(0.0, f64::max);
        let err = solved
            .values()
            .iter()
            .zip(gibbs.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.03 * peak, "max error {err} vs peak {peak}");
        assert!(density_residual(&m, &solved).unwrap() < 1e-8);
    }

    #[test]
    fn reversible_current_vanishes() {
        let m = dw1(1.0);
        let grid = Grid::new_1d(-2.0, 2.0, 401).unwrap();
        let rho = m.analytic_density_field(&grid).unwrap();
        for &x in &[-1.0, -0.3, 0.0, 0.8] {
            let j = stationary_current(&m, &rho, &point(x, 0.0)).unwrap();
            assert!(j.x.abs() < 1e-3, "J({x}) = {}", j.x);
        }
        assert!(stationary_current(&m, &rho, &point(5.0, 0.0)).is_err());
        let flat = make_overdamped_langevin(Arc::new(Flat { dim: 1 }), 1.0).unwrap();
        let g = Grid::new_1d(0.0, 1.0, 64).unwrap();
        let r = flat.analytic_density_field(&g).unwrap();
        assert_eq!(stationary_current(&flat, &r, &point(0.5, 0.0)).unwrap().x, 0.0);
    }

    #[test]
    fn rotational_current_is_divergence_free_but_nonzero() {
        let m = Benchmark::Nonrev2d { beta: 1.0, curl: 0.5 }.build().unwrap();
        let grid = Grid::new_2d(BoundingBox::new([-2.0, -2.0], [2.0, 2.0]), [161, 161]).unwrap();
        let gibbs = Benchmark::DoubleWell2d { beta: 1.0 }
            .build()
            .unwrap()
            .analytic_density_field(&grid)
            .unwrap();
        let j = current_field(&m, &gibbs).unwrap();
        let jmax = j.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(jmax > 1e-2);
        let div = discrete_divergence(&grid, &j);
        let dmax = div.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // Second-order truncation error of two stacked central differences.
        assert!(dmax < 0.05 * jmax, "max |div J| = {dmax}, max |J| = {jmax}");
    }

    #[test]
    fn gibbs_residual_converges_at_second_order() {
        // Residual of the analytic density under the discrete adjoint, scaled
        // by the grid's local truncation: halving h cuts it by about 4x.
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let mut prev = None;
        for &n in &[201usize, 401, 801] {
            let grid = Grid::new_1d(-6.0, 6.0, n).unwrap();
            let exact = m.analytic_density_field(&grid).unwrap();
            let h = grid.hx;
            let res = centered_adjoint_residual(&m, &grid, exact.values()) / 1.0;
            if let Some(p) = prev {
                let ratio: f64 = p / res;
                assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio} at h = {h}");
            }
            prev = Some(res);
        }
    }

    /// Max-norm of the centered second-order discretization of
    /// `(a rho')' - (b rho)'` at interior nodes.
    fn centered_adjoint_residual(m: &DiffusionModel, g: &Grid, rho: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 1..g.nx - 1 {
            let x = |k: usize| g.node(k, 0);
            let a = m.tensor(&x(i))[(0, 0)];
            let lap = a * (rho[i + 1] - 2.0 * rho[i] + rho[i - 1]) / (g.hx * g.hx);
            let adv = (m.drift(&x(i + 1)).x * rho[i + 1] - m.drift(&x(i - 1)).x * rho[i - 1])
                / (2.0 * g.hx);
            worst = worst.max((lap - adv).abs());
        }
        worst
    }
}
