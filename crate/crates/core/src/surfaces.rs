//! Milestones from a reaction curve: the normalized arc-length coordinate
//! of the closest point on the curve, rescaled and smoothed with a Gaussian
//! kernel, used as a surrogate committor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid, NodalField};
use crate::milestones::{LevelFunction, MilestoneSet};
use crate::{point, Point};

/// A polyline parametrized by normalized arc length `s` in `[0, 1]`, so the
/// speed `|phi'|` equals the total length on every segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<Point>,
    /// Parameter of each point; `s[0] = 0`, last is 1.
    pub s: Vec<f64>,
    pub length: f64,
}

impl Curve {
    /// Builds a curve through `points`, dropping consecutive duplicates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let mut pts: Vec<Point> = Vec::with_capacity(points.len());
        for p in points {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(invalid("curve point is not finite"));
            }
            if pts.last().is_none_or(|q| (p - q).norm() > 0.0) {
                pts.push(p);
            }
        }
        if pts.len() < 2 {
            return Err(invalid("a curve needs at least two distinct points"));
        }
        let mut arc = vec![0.0];
        for w in pts.windows(2) {
            arc.push(arc.last().unwrap() + (w[1] - w[0]).norm());
        }
        let length = *arc.last().unwrap();
        let s = arc.iter().map(|a| a / length).collect();
        Ok(Self { points: pts, s, length })
    }

    /// The straight segment from `a` to `b`.
    pub fn segment(a: Point, b: Point) -> Result<Self> {
        Self::new(vec![a, b])
    }

    /// Builds a curve from `(s, point)` pairs given in increasing `s`.
    /// The supplied parameters only order the points; the curve is
    /// reparametrized by arc length.
    pub fn from_parametrized(mut rows: Vec<(f64, Point)>) -> Result<Self> {
        if rows.windows(2).any(|w| !(w[1].0 >= w[0].0)) {
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        Self::new(rows.into_iter().map(|r| r.1).collect())
    }

    /// `phi(s)` for `s` in `[0, 1]`.
    pub fn at(&self, s: f64) -> Point {
        let s = s.clamp(0.0, 1.0);
        let k = self.s.partition_point(|v| *v <= s).clamp(1, self.s.len() - 1);
        let (s0, s1) = (self.s[k - 1], self.s[k]);
        let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
        self.points[k - 1] + t * (self.points[k] - self.points[k - 1])
    }

    /// The same curve sampled at `n` uniformly spaced parameters.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid("resampling needs at least two points"));
        }
        Self::new((0..n).map(|k| self.at(k as f64 / (n - 1) as f64)).collect())
    }

    /// Unit tangent of segment `k`.
    pub fn tangent(&self, k: usize) -> Point {
        (self.points[k + 1] - self.points[k]).normalize()
    }

    /// The parameter of the closest point on the curve, with ties going
    /// to the smallest parameter.
    pub fn project(&self, x: &Point) -> f64 {
        self.project_with_distance(x).0
    }

    pub fn project_with_distance(&self, x: &Point) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for k in 0..self.points.len() - 1 {
            let (a, b) = (self.points[k], self.points[k + 1]);
            let ab = b - a;
            let t = ((x - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            let d = (x - (a + t * ab)).norm();
            let s = self.s[k] + t * (self.s[k + 1] - self.s[k]);
            // Segments are visited in increasing s, so only a strictly
            // smaller distance moves the minimizer.
            if d < best.1 * (1.0 - 1e-12) - 1e-300 {
                best = (s, d);
            }
        }
        best
    }
}

/// Monotone map `Q` of `[0, 1]` onto itself.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rescale {
    #[default]
    Identity,
    /// A logistic ramp centered at 1/2, shifted and scaled to fix 0 and 1.
    Logistic { steepness: f64 },
    /// Piecewise linear through `(s[k], q[k])`, constant beyond the ends.
    Tabulated { s: Vec<f64>, q: Vec<f64> },
}

impl Rescale {
    pub fn validate(&self) -> Result<()> {
        match self {
            Rescale::Identity => Ok(()),
            Rescale::Logistic { steepness } if *steepness > 0.0 && steepness.is_finite() => Ok(()),
            Rescale::Logistic { steepness } => Err(invalid(format!("logistic steepness must be positive, got {steepness}"))),
            Rescale::Tabulated { s, q } => {
                if s.len() < 2 || s.len() != q.len() {
                    return Err(invalid("tabulated rescale needs matching s and q with at least two entries"));
                }
                if s.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("tabulated rescale: s must be strictly increasing"));
                }
                if q.windows(2).any(|w| w[1] < w[0]) || q.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(invalid("tabulated rescale: q must be nondecreasing in [0, 1]"));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        match self {
            Rescale::Identity => s,
            Rescale::Tabulated { s: xs, q } => {
                let k = xs.partition_point(|v| *v <= s);
                if k == 0 {
                    q[0]
                } else if k == xs.len() {
                    q[k - 1]
                } else {
                    let t = (s - xs[k - 1]) / (xs[k] - xs[k - 1]);
                    q[k - 1] + t * (q[k] - q[k - 1])
                }
            }
            &Rescale::Logistic { steepness: k } => {
                let sig = |u: f64| 1.0 / (1.0 + (-u).exp());
                let (lo, hi) = (sig(-0.5 * k), sig(0.5 * k));
                ((sig(k * (s - 0.5)) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }
}

/// Half-width of the smoothing window in units of `delta`.
pub const WINDOW: f64 = 4.0;
/// Quadrature cells per `delta`.
pub const CELLS_PER_DELTA: f64 = 4.0;

/// `f(x) = int K_delta(x - y) Q(s(y)) dy` with a Gaussian kernel, by the
/// midpoint rule on a square window of half-width `4 delta` with spacing
/// `delta / 4`. Weights are renormalized over the window.
#[derive(Debug, Clone)]
pub struct SmoothedCommittor {
    pub curve: Curve,
    pub rescale: Rescale,
    pub delta: f64,
    pub dim: usize,
    offsets: Vec<(Point, f64)>,
    second_moment: f64,
}

impl SmoothedCommittor {
    pub fn new(curve: Curve, rescale: Rescale, delta: f64, dim: usize) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("smoothing width must be positive, got {delta}")));
        }
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("dimension must be 1 or 2, got {dim}")));
        }
        rescale.validate()?;
        let h = delta / CELLS_PER_DELTA;
        let cells = (2.0 * WINDOW * CELLS_PER_DELTA).round() as usize;
        let coord = |k: usize| -WINDOW * delta + (k as f64 + 0.5) * h;
        let weight = |u: f64| (-0.5 * u * u / (delta * delta)).exp();
        let mut offsets = Vec::new();
        if dim == 1 {
            for i in 0..cells {
                let u = coord(i);
                offsets.push((point(u, 0.0), weight(u)));
            }
        } else {
            for i in 0..cells {
                for j in 0..cells {
                    let (u, v) = (coord(i), coord(j));
                    offsets.push((point(u, v), weight(u) * weight(v)));
                }
            }
        }
        let total: f64 = offsets.iter().map(|o| o.1).sum();
        for o in &mut offsets {
            o.1 /= total;
        }
        let second_moment = offsets.iter().map(|(u, w)| w * u.x * u.x).sum();
        Ok(Self { curve, rescale, delta, dim, offsets, second_moment })
    }

    /// `Q(s(x))` without smoothing.
    pub fn raw(&self, x: &Point) -> f64 {
        self.rescale.apply(self.curve.project(x))
    }

    pub fn value_and_gradient(&self, x: &Point) -> (f64, Point) {
        let mut f = 0.0;
        let mut g = Point::zeros();
        for (u, w) in &self.offsets {
            let q = self.raw(&(x + u));
            f += w * q;
            g += (w * q) * u;
        }
        (f.clamp(0.0, 1.0), g / self.second_moment)
    }

    /// Samples the surrogate on a grid, e.g. to speed up simulation.
    pub fn tabulate(&self, grid: Grid) -> Result<NodalField> {
        NodalField::from_fn(grid, |p| self.value(p))
    }
}

impl LevelFunction for SmoothedCommittor {
    fn value(&self, x: &Point) -> f64 {
        self.offsets.iter().map(|(u, w)| w * self.raw(&(x + u))).sum::<f64>().clamp(0.0, 1.0)
    }

    fn gradient(&self, x: &Point) -> Point {
        self.value_and_gradient(x).1
    }
}

/// Smoothed committor at a single point.
pub fn smoothed_committor(curve: &Curve, rescale: &Rescale, delta: f64, x: &Point, dim: usize) -> Result<f64> {
    Ok(SmoothedCommittor::new(curve.clone(), rescale.clone(), delta, dim)?.value(x))
}

/// Milestones at `levels` of the smoothed curve committor. With `grid`
/// the surrogate is tabulated on it first.
pub fn milestones_from_curve(
    curve: Curve,
    rescale: Rescale,
    delta: f64,
    levels: Vec<f64>,
    dim: usize,
    grid: Option<Grid>,
) -> Result<MilestoneSet> {
    if let Some(z) = levels.iter().find(|z| !(**z > 0.0 && **z < 1.0)) {
        return Err(invalid(format!("curve milestone level {z} outside (0, 1)")));
    }
    let sc = SmoothedCommittor::new(curve, rescale, delta, dim)?;
    let f: Arc<dyn LevelFunction> = match grid {
        Some(g) => Arc::new(sc.tabulate(g)?),
        None => Arc::new(sc),
    };
    MilestoneSet::new(f, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bent() -> Curve {
        Curve::new(vec![point(-1.0, 0.0), point(-0.3, 0.4), point(0.3, 0.4), point(1.0, 0.0)]).unwrap()
    }

    #[test]
    fn orthogonal_projection_on_segment() {
        let c = Curve::segment(point(0.0, 0.0), point(1.0, 0.0)).unwrap();
        assert!((c.project(&point(0.3, 5.0)) - 0.3).abs() < 1e-15);
        assert_eq!(c.project(&point(-2.0, 1.0)), 0.0);
        assert_eq!(c.project(&point(3.0, 1.0)), 1.0);
    }

    #[test]
    fn ties_go_to_smallest_parameter() {
        let c = Curve::new(vec![point(0.0, 1.0), point(0.0, 0.0), point(1.0, 0.0)]).unwrap();
        let (s, d) = c.project_with_distance(&point(0.5, 0.5));
        assert!((s - 0.25).abs() < 1e-15 && (d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn points_on_curve_project_to_themselves() {
        let c = bent();
        for k in 0..=20 {
            let s = k as f64 / 20.0;
            let (t, d) = c.project_with_distance(&c.at(s));
            assert!(d < 1e-14, "s = {s}: distance {d}");
            assert!((c.at(t) - c.at(s)).norm() < 1e-14);
        }
    }

    #[test]
    fn degenerate_curves_rejected() {
        assert!(Curve::new(vec![point(1.0, 1.0)]).is_err());
        assert!(Curve::new(vec![point(1.0, 1.0), point(1.0, 1.0)]).is_err());
    }

    #[test]
    fn parametrization_has_constant_speed() {
        let c = bent().resample(41).unwrap();
        let speeds: Vec<f64> = (0..40)
            .map(|k| (c.points[k + 1] - c.points[k]).norm() / (c.s[k + 1] - c.s[k]))
            .collect();
        for v in &speeds {
            assert!((v / c.length - 1.0).abs() < 1e-12);
        }
        // Uniform resampling keeps chords within 1% of each other away from corners.
        let chords: Vec<f64> = (0..40).map(|k| (c.points[k + 1] - c.points[k]).norm()).collect();
        let max = chords.iter().cloned().fold(0.0, f64::max);
        let min = chords.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min < 1.2);
    }

    proptest! {
        #[test]
        fn projection_is_scale_consistent(x in -3.0f64..3.0, y in -3.0f64..3.0, k in 0.1f64..10.0) {
            let c = bent();
            let scaled = Curve::new(c.points.iter().map(|p| p * k).collect()).unwrap();
            let (s, d) = c.project_with_distance(&point(x, y));
            let (sk, dk) = scaled.project_with_distance(&point(k * x, k * y));
            prop_assert!((s - sk).abs() < 1e-9);
            prop_assert!((dk - k * d).abs() < 1e-9 * k.max(1.0));
        }

        #[test]
        fn interior_minima_are_orthogonal(x in -3.0f64..3.0, y in -3.0f64..3.0) {
            let c = bent();
            let (s, d) = c.project_with_distance(&point(x, y));
            let at = c.at(s);
            let on_vertex = c.s.iter().any(|v| (v - s).abs() < 1e-12);
            if !on_vertex {
                let k = c.s.partition_point(|v| *v <= s) - 1;
                let r = c.tangent(k).dot(&(point(x, y) - at)).abs();
                prop_assert!(r <= 1e-8 * d.max(1e-300) + 1e-14);
            }
        }

        #[test]
        fn smoothed_values_in_unit_interval(x in -4.0f64..4.0, y in -4.0f64..4.0, delta in 0.01f64..0.5) {
            let sc = SmoothedCommittor::new(bent(), Rescale::Logistic { steepness: 6.0 }, delta, 2).unwrap();
            let v = sc.value(&point(x, y));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn straight_line_is_reproduced_in_the_interior() {
        let c = Curve::segment(point(-1.0, 0.0), point(1.0, 0.0)).unwrap();
        let sc = SmoothedCommittor::new(c, Rescale::Identity, 0.05, 2).unwrap();
        for &(x, y) in &[(-0.5, 0.0), (0.0, 0.3), (0.37, -0.8), (0.7, 0.1)] {
            let (v, g) = sc.value_and_gradient(&point(x, y));
            assert!((v - 0.5 * (x + 1.0)).abs() < 1e-6, "{x},{y}: {v}");
            assert!((g - point(0.5, 0.0)).norm() < 1e-6, "{g:?}");
        }
    }

    #[test]
    fn vanishing_width_recovers_raw_coordinate() {
        let sc = SmoothedCommittor::new(bent(), Rescale::Logistic { steepness: 4.0 }, 1e-3, 2).unwrap();
        let mut rng = crate::rng::RngStream::new(3, 0);
        for _ in 0..200 {
            let x = point(2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0);
            assert!((sc.value(&x) - sc.raw(&x)).abs() < 5e-3);
        }
    }

    #[test]
    fn levels_are_nested_along_a_curved_path() {
        let sc = SmoothedCommittor::new(bent(), Rescale::Identity, 0.1, 2).unwrap();
        let vals: Vec<f64> = (0..=100).map(|k| sc.value(&bent().at(k as f64 / 100.0))).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
        // Decreasing levels are met in reverse order along the curve.
        let first_at = |z: f64| vals.iter().position(|v| *v >= z).unwrap();
        let z = [0.8, 0.6, 0.4, 0.2];
        assert!(z.windows(2).all(|w| first_at(w[0]) > first_at(w[1])));
    }

    #[test]
    fn straight_curve_gives_planar_milestones() {
        let c = Curve::segment(point(-1.0, 0.0), point(1.0, 0.0)).unwrap();
        let m = milestones_from_curve(c, Rescale::Identity, 0.05, vec![0.75, 0.5, 0.25], 2, None).unwrap();
        let f = m.level_function();
        for &y in &[-0.5, 0.0, 0.5] {
            for (i, &z) in m.levels().iter().enumerate() {
                let x = 2.0 * z - 1.0;
                assert!((f.value(&point(x, y)) - z).abs() < 1e-6, "milestone {i} at y = {y}");
            }
        }
        assert!(milestones_from_curve(bent(), Rescale::Identity, 0.05, vec![1.0, 0.5], 2, None).is_err());
        assert!(SmoothedCommittor::new(bent(), Rescale::Identity, 0.0, 2).is_err());
    }

    #[test]
    fn one_dimensional_smoothing() {
        let c = Curve::segment(point(-1.0, 0.0), point(1.0, 0.0)).unwrap();
        let sc = SmoothedCommittor::new(c, Rescale::Identity, 0.02, 1).unwrap();
        assert!((sc.value(&point(0.2, 0.0)) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn tabulated_rescale_interpolates() {
        let r = Rescale::Tabulated { s: vec![0.2, 0.6, 1.0], q: vec![0.1, 0.5, 0.5] };
        r.validate().unwrap();
        assert_eq!(r.apply(0.0), 0.1);
        assert!((r.apply(0.4) - 0.3).abs() < 1e-15);
        assert_eq!(r.apply(0.8), 0.5);
        assert!(Rescale::Tabulated { s: vec![0.0, 1.0], q: vec![0.6, 0.2] }.validate().is_err());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<Rescale>(&json).unwrap(), r);
    }
}
