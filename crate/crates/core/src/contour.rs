//! Level sets of nodal fields: bisection in 1D, marching squares in 2D.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::NodalField;
use crate::milestones::REGULARITY_THRESHOLD;
use crate::{point, Point};

/// An ordered discretization of `{q = z}`: a single point in 1D, a
/// polyline in 2D.
///
/// Open polylines start at the endpoint with the smallest `(y, x)`; closed
/// ones start at their smallest `(y, x)` vertex and run counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetMesh {
    pub level: f64,
    pub dim: usize,
    pub points: Vec<Point>,
    /// Unit normals `grad q / |grad q|`.
    pub normals: Vec<Point>,
    pub grad_norms: Vec<f64>,
    pub closed: bool,
    /// Cumulative arc length at each point (all zero in 1D).
    pub arc: Vec<f64>,
}

impl LevelSetMesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Total arc length, including the closing segment of closed curves.
    pub fn length(&self) -> f64 {
        let open = *self.arc.last().unwrap_or(&0.0);
        if self.closed && self.points.len() > 1 {
            open + (self.points[0] - self.points[self.points.len() - 1]).norm()
        } else {
            open
        }
    }

    /// Segments as index pairs, including the closing one.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let n = self.points.len();
        let mut s: Vec<(usize, usize)> = (1..n).map(|k| (k - 1, k)).collect();
        if self.closed && n > 2 {
            s.push((n - 1, 0));
        }
        s
    }

    /// Trapezoidal line integral of nodal values (point evaluation in 1D).
    pub fn integrate(&self, values: &[f64]) -> f64 {
        if self.dim == 1 {
            return values.iter().sum();
        }
        self.segments()
            .iter()
            .map(|&(a, b)| 0.5 * (values[a] + values[b]) * (self.points[b] - self.points[a]).norm())
            .sum()
    }

    /// The point at arc-length coordinate `s` (clamped to the curve).
    pub fn point_at(&self, s: f64) -> Point {
        if self.points.len() < 2 {
            return self.points[0];
        }
        let mut start = 0.0;
        for (a, b) in self.segments() {
            let (pa, pb) = (self.points[a], self.points[b]);
            let len = (pb - pa).norm();
            if s <= start + len {
                let t = if len > 0.0 { ((s - start) / len).clamp(0.0, 1.0) } else { 0.0 };
                return pa + t * (pb - pa);
            }
            start += len;
        }
        let (_, last) = *self.segments().last().expect("at least one segment");
        self.points[last]
    }

    /// Arc-length coordinate of the closest point on the polyline.
    pub fn arc_coordinate(&self, p: &Point) -> f64 {
        if self.dim == 1 || self.points.len() < 2 {
            return 0.0;
        }
        let mut best = (f64::INFINITY, 0.0);
        let mut start = 0.0;
        for (a, b) in self.segments() {
            let (pa, pb) = (self.points[a], self.points[b]);
            let d = pb - pa;
            let len = d.norm();
            let t = if len > 0.0 { ((p - pa).dot(&d) / (len * len)).clamp(0.0, 1.0) } else { 0.0 };
            let dist = (pa + t * d - p).norm();
            if dist < best.0 {
                best = (dist, start + t * len);
            }
            start += len;
        }
        best.1
    }
}

/// Extracts `{field = z}`. With `require_connected`, a level set made of
/// more than one piece is rejected. Every point must satisfy
/// `|grad q| > 1e-8`.
pub fn level_set(field: &NodalField, z: f64, require_connected: bool) -> Result<LevelSetMesh> {
    if !z.is_finite() {
        return Err(invalid("level must be finite"));
    }
    let mesh = if field.grid.dim == 1 {
        level_points_1d(field, z, require_connected)?
    } else {
        level_polyline_2d(field, z, require_connected)?
    };
    for (p, g) in mesh.points.iter().zip(&mesh.grad_norms) {
        if !(*g > REGULARITY_THRESHOLD) {
            return Err(Error::IrregularLevel { level: z, grad_norm: *g, at: *p });
        }
    }
    Ok(mesh)
}

fn level_points_1d(field: &NodalField, z: f64, require_connected: bool) -> Result<LevelSetMesh> {
    let g = &field.grid;
    let v = &field.values;
    let mut roots: Vec<Point> = Vec::new();
    for i in 0..g.nx - 1 {
        let (a, b) = (v[i] - z, v[i + 1] - z);
        // Half-open brackets so a root on a node is counted once.
        let brackets = (a == 0.0) || (a * b < 0.0) || (b == 0.0 && i + 1 == g.nx - 1);
        if !brackets {
            continue;
        }
        let (mut lo, mut hi) = (g.node(i, 0).x, g.node(i + 1, 0).x);
        let sign_lo = a > 0.0;
        let root = if a == 0.0 {
            lo
        } else if b == 0.0 {
            hi
        } else {
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                let fm = field.value_at(&point(mid, 0.0)) - z;
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (fm > 0.0) == sign_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        roots.push(point(root, 0.0));
    }
    if roots.is_empty() {
        return Err(invalid(format!("level {z} is not attained on the grid")));
    }
    if require_connected && roots.len() > 1 {
        return Err(Error::DisconnectedMilestone { level: z, components: roots.len() });
    }
    roots.truncate(1);
    let grads: Vec<Point> = roots.iter().map(|p| field.gradient_at(p)).collect();
    Ok(LevelSetMesh {
        level: z,
        dim: 1,
        normals: grads.iter().map(|g| point(g.x.signum(), 0.0)).collect(),
        grad_norms: grads.iter().map(|g| g.x.abs()).collect(),
        arc: vec![0.0; roots.len()],
        points: roots,
        closed: false,
    })
}

fn level_polyline_2d(field: &NodalField, z: f64, require_connected: bool) -> Result<LevelSetMesh> {
    let g = &field.grid;
    let v = &field.values;
    let above = |k: usize| v[k] > z;
    // Edge ids: 2 k for the edge (k, k + 1), 2 k + 1 for (k, k + nx).
    let mut crossing: HashMap<usize, (Point, Point)> = HashMap::new();
    let mut edge_point = |id: usize| -> (Point, Point) {
        *crossing.entry(id).or_insert_with(|| {
            let k = id / 2;
            let kn = if id % 2 == 0 { k + 1 } else { k + g.nx };
            let t = (z - v[k]) / (v[kn] - v[k]);
            let (i, j) = g.coords(k);
            let (i2, j2) = g.coords(kn);
            let p = g.node(i, j) + t * (g.node(i2, j2) - g.node(i, j));
            let grad = field.gradient_at_node(k) * (1.0 - t) + field.gradient_at_node(kn) * t;
            (p, grad)
        })
    };
    let mut adjacency: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut link = |a: usize, b: usize| {
        adjacency.entry(a).or_default().push(b);
        adjacency.entry(b).or_default().push(a);
    };
    for j in 0..g.ny - 1 {
        for i in 0..g.nx - 1 {
            let k0 = g.index(i, j);
            let (k1, k2, k3) = (k0 + 1, k0 + 1 + g.nx, k0 + g.nx);
            let c = [above(k0), above(k1), above(k2), above(k3)];
            // Bottom, right, top, left.
            let edges = [2 * k0, 2 * k1 + 1, 2 * k3, 2 * k0 + 1];
            let cut = [c[0] != c[1], c[1] != c[2], c[3] != c[2], c[0] != c[3]];
            let n_cut = cut.iter().filter(|x| **x).count();
            match n_cut {
                0 => {}
                2 => {
                    let e: Vec<usize> = (0..4).filter(|&s| cut[s]).map(|s| edges[s]).collect();
                    link(e[0], e[1]);
                }
                4 => {
                    let center = 0.25 * (v[k0] + v[k1] + v[k2] + v[k3]) > z;
                    if center == c[0] {
                        // Corners 0 and 2 connect through the center.
                        link(edges[0], edges[1]);
                        link(edges[2], edges[3]);
                    } else {
                        link(edges[3], edges[0]);
                        link(edges[1], edges[2]);
                    }
                }
                _ => unreachable!("a square has an even number of cut edges"),
            }
        }
    }
    if adjacency.is_empty() {
        return Err(invalid(format!("level {z} is not attained on the grid")));
    }
    // Chain edges into polylines: open chains first from degree-1 ends.
    let mut ids: Vec<usize> = adjacency.keys().copied().collect();
    ids.sort_unstable();
    let mut visited: HashMap<usize, bool> = HashMap::new();
    let mut chains: Vec<(Vec<usize>, bool)> = Vec::new();
    let walk = |start: usize, visited: &mut HashMap<usize, bool>| -> (Vec<usize>, bool) {
        let mut chain = vec![start];
        visited.insert(start, true);
        let mut prev = usize::MAX;
        let mut cur = start;
        loop {
            let next = adjacency[&cur]
                .iter()
                .copied()
                .find(|&n| n != prev && !visited.contains_key(&n));
            match next {
                Some(n) => {
                    visited.insert(n, true);
                    chain.push(n);
                    prev = cur;
                    cur = n;
                }
                None => {
                    let closed = chain.len() > 2 && adjacency[&cur].contains(&start);
                    return (chain, closed);
                }
            }
        }
    };
    for &id in &ids {
        if adjacency[&id].len() == 1 && !visited.contains_key(&id) {
            chains.push(walk(id, &mut visited));
        }
    }
    for &id in &ids {
        if !visited.contains_key(&id) {
            chains.push(walk(id, &mut visited));
        }
    }
    if require_connected && chains.len() > 1 {
        return Err(Error::DisconnectedMilestone { level: z, components: chains.len() });
    }
    // Keep the longest piece when disconnected pieces are allowed.
    let (chain, closed) = chains
        .into_iter()
        .max_by_key(|(c, _)| c.len())
        .expect("at least one chain");
    let mut pts: Vec<(Point, Point)> = chain.iter().map(|&id| edge_point(id)).collect();
    canonical_order(&mut pts, closed);
    let mut arc = Vec::with_capacity(pts.len());
    let mut s = 0.0;
    for k in 0..pts.len() {
        if k > 0 {
            s += (pts[k].0 - pts[k - 1].0).norm();
        }
        arc.push(s);
    }
    Ok(LevelSetMesh {
        level: z,
        dim: 2,
        normals: pts
            .iter()
            .map(|(_, g)| if g.norm() > 0.0 { g / g.norm() } else { *g })
            .collect(),
        grad_norms: pts.iter().map(|(_, g)| g.norm()).collect(),
        points: pts.iter().map(|(p, _)| *p).collect(),
        closed,
        arc,
    })
}

fn lex_less(a: &Point, b: &Point) -> bool {
    (a.y, a.x) < (b.y, b.x)
}

fn canonical_order(pts: &mut Vec<(Point, Point)>, closed: bool) {
    if pts.len() < 2 {
        return;
    }
    if !closed {
        if lex_less(&pts[pts.len() - 1].0, &pts[0].0) {
            pts.reverse();
        }
        return;
    }
    let area: f64 = (0..pts.len())
        .map(|k| {
            let (a, b) = (pts[k].0, pts[(k + 1) % pts.len()].0);
            a.x * b.y - b.x * a.y
        })
        .sum();
    if area < 0.0 {
        pts.reverse();
    }
    let start = (0..pts.len())
        .min_by(|&a, &b| {
            let (pa, pb) = (pts[a].0, pts[b].0);
            (pa.y, pa.x).partial_cmp(&(pb.y, pb.x)).unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    pts.rotate_left(start);
}
