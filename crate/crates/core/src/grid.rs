//! Tensor-product grids and nodal fields.
//!
//! Nodes are ordered row-major with `x` fastest: node `(i, j)` has linear
//! index `j * nx + i`. One-dimensional grids have `ny == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{point, Point};

/// Minimum number of nodes per active axis.
pub const MIN_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl BoundingBox {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Self {
        Self { lo, hi }
    }

    /// A 1D interval `[lo, hi]`; the `y` extent is degenerate.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self { lo: [lo, 0.0], hi: [hi, 0.0] }
    }

    pub fn contains(&self, p: &Point, dim: usize) -> bool {
        (0..dim).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    pub fn clamp(&self, p: &Point, dim: usize) -> Point {
        let mut q = *p;
        for k in 0..dim {
            q[k] = q[k].clamp(self.lo[k], self.hi[k]);
        }
        q
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Box scaled about its center.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = *self;
        for k in 0..2 {
            let c = 0.5 * (self.lo[k] + self.hi[k]);
            let h = 0.5 * (self.hi[k] - self.lo[k]) * factor;
            out.lo[k] = c - h;
            out.hi[k] = c + h;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub bounds: BoundingBox,
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
}

impl Grid {
    pub fn new_1d(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Self::new(1, BoundingBox::interval(lo, hi), [nodes, 1])
    }

    pub fn new_2d(bounds: BoundingBox, nodes: [usize; 2]) -> Result<Self> {
        Self::new(2, bounds, nodes)
    }

    pub fn new(dim: usize, bounds: BoundingBox, nodes: [usize; 2]) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        let ny = if dim == 1 { 1 } else { nodes[1] };
        let nx = nodes[0];
        if nx < MIN_NODES || (dim == 2 && ny < MIN_NODES) {
            return Err(invalid(format!(
                "grid needs at least {MIN_NODES} nodes per axis, got {nx}x{ny}"
            )));
        }
        let hx = bounds.width(0) / (nx - 1) as f64;
        let hy = if dim == 2 { bounds.width(1) / (ny - 1) as f64 } else { 1.0 };
        if !(hx > 0.0) || !(hy > 0.0) {
            return Err(invalid("grid spacing must be positive"));
        }
        Ok(Self { dim, bounds, nx, ny, hx, hy })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> Point {
        let x = self.bounds.lo[0] + i as f64 * self.hx;
        let y = if self.dim == 2 { self.bounds.lo[1] + j as f64 * self.hy } else { 0.0 };
        point(x, y)
    }

    pub fn nodes(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |k| {
            let (i, j) = self.coords(k);
            self.node(i, j)
        })
    }

    pub fn contains(&self, p: &Point) -> bool {
        let eps = 1e-12 * (self.bounds.width(0).abs() + 1.0);
        (0..self.dim).all(|k| p[k] >= self.bounds.lo[k] - eps && p[k] <= self.bounds.hi[k] + eps)
    }

    /// Cell containing `p` (clamped) and the local coordinates in `[0, 1]`.
    #[inline]
    fn locate(&self, p: &Point) -> (usize, usize, f64, f64) {
        let fx = ((p.x - self.bounds.lo[0]) / self.hx).clamp(0.0, (self.nx - 1) as f64);
        let i = (fx as usize).min(self.nx - 2);
        let tx = fx - i as f64;
        if self.dim == 1 {
            return (i, 0, tx, 0.0);
        }
        let fy = ((p.y - self.bounds.lo[1]) / self.hy).clamp(0.0, (self.ny - 1) as f64);
        let j = (fy as usize).min(self.ny - 2);
        (i, j, tx, fy - j as f64)
    }

    /// Cell volume (length in 1D) attached to a node, halved on boundaries.
    pub fn node_weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 } * self.hx;
        if self.dim == 1 {
            return wx;
        }
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 } * self.hy;
        wx * wy
    }

    /// Trapezoidal integral of nodal values over the box.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.ny {
            for i in 0..self.nx {
                total += self.node_weight(i, j) * values[self.index(i, j)];
            }
        }
        total
    }
}

/// Values attached to the nodes of a [`Grid`], with piecewise (bi)linear
/// interpolation and interpolated central-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalField {
    pub grid: Grid,
    pub values: Vec<f64>,
    #[serde(skip)]
    grad: Option<(Vec<f64>, Vec<f64>)>,
}

impl NodalField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "field has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        let mut field = Self { grid, values, grad: None };
        field.grad = Some(field.nodal_gradients());
        Ok(field)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Point) -> f64) -> Result<Self> {
        let values = grid.nodes().map(|p| f(&p)).collect();
        Self::new(grid, values)
    }

    /// Central differences in the interior, one-sided on the boundary.
    fn nodal_gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let v = &self.values;
        let mut gx = vec![0.0; g.len()];
        let mut gy = vec![0.0; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.index(i, j);
                gx[k] = if i == 0 {
                    (v[g.index(1, j)] - v[k]) / g.hx
                } else if i == g.nx - 1 {
                    (v[k] - v[g.index(i - 1, j)]) / g.hx
                } else {
                    (v[g.index(i + 1, j)] - v[g.index(i - 1, j)]) / (2.0 * g.hx)
                };
                if g.dim == 2 {
                    gy[k] = if j == 0 {
                        (v[g.index(i, 1)] - v[k]) / g.hy
                    } else if j == g.ny - 1 {
                        (v[k] - v[g.index(i, j - 1)]) / g.hy
                    } else {
                        (v[g.index(i, j + 1)] - v[g.index(i, j - 1)]) / (2.0 * g.hy)
                    };
                }
            }
        }
        (gx, gy)
    }

    fn grads(&self) -> (&[f64], &[f64]) {
        let (gx, gy) = self.grad.as_ref().expect("gradients initialized in constructor");
        (gx, gy)
    }

    /// Re-derives cached gradients; needed after deserialization or after
    /// mutating `values`.
    pub fn refresh(&mut self) {
        self.grad = Some(self.nodal_gradients());
    }

    #[inline]
    fn interp(&self, data: &[f64], p: &Point) -> f64 {
        let g = &self.grid;
        let (i, j, tx, ty) = g.locate(p);
        if g.dim == 1 {
            return data[i] * (1.0 - tx) + data[i + 1] * tx;
        }
        let k00 = g.index(i, j);
        let k10 = k00 + 1;
        let k01 = k00 + g.nx;
        let k11 = k01 + 1;
        (1.0 - ty) * ((1.0 - tx) * data[k00] + tx * data[k10])
            + ty * ((1.0 - tx) * data[k01] + tx * data[k11])
    }

    /// (Bi)linear interpolation; points outside the box are clamped onto it.
    #[inline]
    pub fn value_at(&self, p: &Point) -> f64 {
        self.interp(&self.values, p)
    }

    /// Interpolated central-difference gradient.
    #[inline]
    pub fn gradient_at(&self, p: &Point) -> Point {
        let (gx, gy) = self.grads();
        let x = self.interp(gx, p);
        let y = if self.grid.dim == 2 { self.interp(gy, p) } else { 0.0 };
        point(x, y)
    }

    /// Nodal central-difference gradient.
    pub fn gradient_at_node(&self, k: usize) -> Point {
        let (gx, gy) = self.grads();
        point(gx[k], gy[k])
    }

    pub fn checked_value_at(&self, p: &Point) -> Result<f64> {
        if !self.grid.contains(p) {
            return Err(Error::OutsideGrid(*p));
        }
        Ok(self.value_at(p))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

impl NodalField {
    /// Deserialize and rebuild the gradient cache.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut f: NodalField = serde_json::from_str(s)?;
        f.refresh();
        Ok(f)
    }
}
