//! Milestones as level sets `{f = z_i}` of a scalar function with strictly
//! decreasing levels `z_0 > z_1 > ... > z_N`, the milestoning index process
//! and the coarse-grained chain of first hits.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::NodalField;
use crate::integrate::{
    first_crossing, project_to_level, CrossingRule, HitEvent, StepConfig, TrajectoryState,
};
use crate::model::DiffusionModel;
use crate::rng::RngStream;
use crate::Point;

/// Threshold below which a level-function gradient counts as degenerate.
pub const REGULARITY_THRESHOLD: f64 = 1e-8;

/// A scalar function whose level sets define milestones.
pub trait LevelFunction: Send + Sync {
    fn value(&self, x: &Point) -> f64;
    fn gradient(&self, x: &Point) -> Point;
}

/// `f(x) = n . x + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineLevel {
    pub normal: Point,
    pub offset: f64,
}

impl AffineLevel {
    pub fn new(normal: Point, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// `f(x) = x_axis`.
    pub fn coordinate(axis: usize) -> Self {
        let mut n = Point::zeros();
        n[axis] = 1.0;
        Self { normal: n, offset: 0.0 }
    }
}

impl LevelFunction for AffineLevel {
    #[inline]
    fn value(&self, x: &Point) -> f64 {
        self.normal.dot(x) + self.offset
    }
    #[inline]
    fn gradient(&self, _x: &Point) -> Point {
        self.normal
    }
}

impl LevelFunction for NodalField {
    #[inline]
    fn value(&self, x: &Point) -> f64 {
        self.value_at(x)
    }
    #[inline]
    fn gradient(&self, x: &Point) -> Point {
        self.gradient_at(x)
    }
}

/// A level function from closures.
pub struct FnLevel<F, G> {
    pub f: F,
    pub grad: G,
}

impl<F, G> LevelFunction for FnLevel<F, G>
where
    F: Fn(&Point) -> f64 + Send + Sync,
    G: Fn(&Point) -> Point + Send + Sync,
{
    fn value(&self, x: &Point) -> f64 {
        (self.f)(x)
    }
    fn gradient(&self, x: &Point) -> Point {
        (self.grad)(x)
    }
}

#[derive(Clone)]
pub struct MilestoneSet {
    f: Arc<dyn LevelFunction>,
    levels: Vec<f64>,
}

impl Debug for MilestoneSet {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fmt.debug_struct("MilestoneSet").field("levels", &self.levels).finish_non_exhaustive()
    }
}

impl MilestoneSet {
    pub fn new(f: Arc<dyn LevelFunction>, levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("milestone set needs at least one level"));
        }
        if levels.iter().any(|z| !z.is_finite()) {
            return Err(invalid("levels must be finite"));
        }
        if levels.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid(format!("levels must be strictly decreasing: {levels:?}")));
        }
        Ok(Self { f, levels })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> f64 {
        self.levels[i]
    }

    /// Number of milestones, `N + 1`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level_function(&self) -> &dyn LevelFunction {
        self.f.as_ref()
    }

    pub fn level_function_arc(&self) -> Arc<dyn LevelFunction> {
        self.f.clone()
    }

    /// The region between the neighbors of milestone `i`:
    /// `z_{i+1} <= f <= z_{i-1}`, one-sided for the first and last index.
    pub fn cell(&self, i: usize) -> Result<Cell> {
        if i >= self.len() {
            return Err(invalid(format!("index {i} outside 0..{}", self.len())));
        }
        Ok(Cell {
            index: i,
            upper: i.checked_sub(1).map(|k| self.levels[k]),
            lower: self.levels.get(i + 1).copied(),
        })
    }

    /// Keeps only the selected milestones, in order.
    pub fn restrict(&self, subset: &[usize]) -> Result<MilestoneSet> {
        if subset.is_empty() {
            return Err(invalid("empty milestone subset"));
        }
        if subset.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("subset must be sorted and without repeats"));
        }
        if let Some(&bad) = subset.iter().find(|&&k| k >= self.len()) {
            return Err(invalid(format!("index {bad} outside 0..{}", self.len())));
        }
        Self::new(self.f.clone(), subset.iter().map(|&k| self.levels[k]).collect())
    }

    /// Checks `|grad f| > threshold` at the given points of milestone `i`.
    pub fn check_regular(&self, i: usize, points: &[Point]) -> Result<()> {
        for p in points {
            let g = self.f.gradient(p).norm();
            if !(g > REGULARITY_THRESHOLD) {
                return Err(Error::IrregularLevel { level: self.levels[i], grad_norm: g, at: *p });
            }
        }
        Ok(())
    }

    /// A point on milestone `i`, found by bisection on `f` along the segment
    /// `from -> to`, which must bracket the level.
    pub fn anchor_point(&self, i: usize, from: Point, to: Point) -> Result<Point> {
        let z = self.levels[i];
        let g = |t: f64| self.f.value(&(from + t * (to - from))) - z;
        let (mut lo, mut hi) = (0.0, 1.0);
        let (glo, ghi) = (g(lo), g(hi));
        if glo == 0.0 {
            return Ok(from);
        }
        if glo * ghi > 0.0 {
            return Err(invalid(format!("guide segment does not bracket level {z}")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let gm = g(mid);
            if gm == 0.0 {
                lo = mid;
                hi = mid;
                break;
            }
            if (gm > 0.0) == (glo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let p = from + 0.5 * (lo + hi) * (to - from);
        Ok(project_to_level(self.f.as_ref(), p, z, 1e-12))
    }
}

/// `Omega_i`: `lower <= f <= upper`, either side possibly unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub upper: Option<f64>,
    pub lower: Option<f64>,
}

impl Cell {
    pub fn contains_value(&self, v: f64) -> bool {
        self.upper.is_none_or(|u| v <= u) && self.lower.is_none_or(|l| v >= l)
    }

    pub fn is_one_sided(&self) -> bool {
        self.upper.is_none() || self.lower.is_none()
    }
}

/// The index process update: the index of a level `f_value` sits on
/// (within tolerance), otherwise the previous index.
pub fn assign_index(f_value: f64, previous: Option<usize>, levels: &[f64]) -> Option<usize> {
    levels
        .iter()
        .position(|z| (f_value - z).abs() < crate::integrate::CROSSING_TOLERANCE)
        .or(previous)
}

/// First hits of milestones different from the current index, in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoarseChain {
    pub events: Vec<HitEvent>,
}

impl CoarseChain {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.index).collect()
    }

    /// `alpha_n = tau_n - tau_{n-1}` for `n >= 1`.
    pub fn lags(&self) -> Vec<f64> {
        self.events.windows(2).map(|w| w[1].time - w[0].time).collect()
    }

    /// Checks increasing times, changing indices and nearest-neighbor jumps.
    pub fn validate(&self) -> Result<()> {
        for w in self.events.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Inconsistent(format!(
                    "jump times not increasing: {} then {}",
                    w[0].time, w[1].time
                )));
            }
            if w[0].index.abs_diff(w[1].index) != 1 {
                return Err(Error::Inconsistent(format!(
                    "non-neighbor jump {} -> {}",
                    w[0].index, w[1].index
                )));
            }
        }
        Ok(())
    }

    /// The chain seen through a subset of milestones (given by their global
    /// indices, sorted): events on other milestones are erased, then repeats
    /// are collapsed and indices renumbered within the subset.
    pub fn restrict(&self, subset: &[usize]) -> CoarseChain {
        let mut out: Vec<HitEvent> = Vec::new();
        for e in &self.events {
            if let Some(k) = subset.iter().position(|&s| s == e.index) {
                if out.last().is_none_or(|l| l.index != k) {
                    out.push(HitEvent { index: k, ..*e });
                }
            }
        }
        CoarseChain { events: out }
    }
}

/// Streaming index process for a (local) list of nested levels.
#[derive(Debug, Clone)]
pub(crate) struct IndexTracker {
    levels: Vec<f64>,
    ids: Vec<usize>,
    current: Option<usize>,
}

impl IndexTracker {
    pub fn new(levels: Vec<f64>, ids: Vec<usize>, current: Option<usize>) -> Self {
        Self { levels, ids, current }
    }

    fn candidates(&self) -> (Vec<f64>, Vec<usize>) {
        match self.current {
            None => (self.levels.clone(), (0..self.levels.len()).collect()),
            Some(c) => {
                let mut z = Vec::with_capacity(2);
                let mut s = Vec::with_capacity(2);
                if c > 0 {
                    z.push(self.levels[c - 1]);
                    s.push(c - 1);
                }
                if c + 1 < self.levels.len() {
                    z.push(self.levels[c + 1]);
                    s.push(c + 1);
                }
                (z, s)
            }
        }
    }

    /// Processes the straight step `x0 -> x1` (with `f` values `f0, f1`)
    /// starting at time `t0`; returns the number of events emitted.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        model: &DiffusionModel,
        f: &dyn LevelFunction,
        (x0, f0): (&Point, f64),
        (x1, f1): (&Point, f64),
        t0: f64,
        dt: f64,
        rule: CrossingRule,
        tol: f64,
        rng: &mut RngStream,
        emit: &mut dyn FnMut(HitEvent),
    ) -> usize {
        let mut from = 0.0;
        let mut emitted = 0;
        loop {
            let (z, slots) = self.candidates();
            if z.is_empty() {
                return emitted;
            }
            let fa = f0 + from * (f1 - f0);
            let xa = x0 + from * (x1 - x0);
            // Bridge excursions are drawn only for the step as a whole.
            let r = if emitted == 0 { rule } else { CrossingRule::Linear };
            let Some(c) = first_crossing(model, f, &z, None, (&xa, fa), f1, r, dt * (1.0 - from), rng)
            else {
                return emitted;
            };
            let th = from + c.fraction * (1.0 - from);
            let slot = slots[c.slot];
            let guess = x0 + th * (x1 - x0);
            emit(HitEvent {
                index: self.ids[slot],
                position: project_to_level(f, guess, self.levels[slot], tol),
                time: t0 + th * dt,
            });
            emitted += 1;
            self.current = Some(slot);
            if th >= 1.0 {
                return emitted;
            }
            from = th;
        }
    }
}

/// Simulates one free trajectory for `total_time`, calling `on_event` for
/// every first hit of a milestone different from the current index.
pub fn drive_chain(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    initial: Point,
    total_time: f64,
    cfg: &StepConfig,
    rng: &mut RngStream,
    on_event: &mut dyn FnMut(HitEvent),
) -> Result<TrajectoryState> {
    cfg.validate()?;
    if !model.bounds().contains(&initial, model.dim()) {
        return Err(invalid("initial point outside the bounding box"));
    }
    let f = mset.level_function();
    let n = mset.len();
    let mut tracker = IndexTracker::new(mset.levels().to_vec(), (0..n).collect(), None);
    let mut state = TrajectoryState::new(initial);
    let mut fx = f.value(&initial);
    let steps = (total_time / cfg.dt).floor() as u64;
    for _ in 0..steps {
        let next = crate::integrate::em_step(model, &state, cfg.dt, rng)?;
        let fn_ = f.value(&next.position);
        tracker.step(
            model,
            f,
            (&state.position, fx),
            (&next.position, fn_),
            state.time,
            cfg.dt,
            cfg.crossing,
            cfg.tolerance,
            rng,
            on_event,
        );
        state = next;
        fx = fn_;
    }
    Ok(state)
}

/// Records the coarse-grained chain of one trajectory.
pub fn extract_chain(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    initial: Point,
    total_time: f64,
    cfg: &StepConfig,
    rng: &mut RngStream,
) -> Result<CoarseChain> {
    let mut events = Vec::new();
    drive_chain(model, mset, initial, total_time, cfg, rng, &mut |e| events.push(e))?;
    Ok(CoarseChain { events })
}

/// Records the coarse-grained chain of one trajectory until it holds
/// `n_events` events. Fails as censored if no milestone is hit for
/// `cfg.max_time`.
pub fn extract_chain_events(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    initial: Point,
    n_events: usize,
    cfg: &StepConfig,
    rng: &mut RngStream,
) -> Result<CoarseChain> {
    cfg.validate()?;
    if !model.bounds().contains(&initial, model.dim()) {
        return Err(invalid("initial point outside the bounding box"));
    }
    let f = mset.level_function();
    let n = mset.len();
    let mut tracker = IndexTracker::new(mset.levels().to_vec(), (0..n).collect(), None);
    let mut state = TrajectoryState::new(initial);
    let mut fx = f.value(&initial);
    let mut events: Vec<HitEvent> = Vec::with_capacity(n_events);
    let mut last_time = 0.0;
    while events.len() < n_events {
        let next = crate::integrate::em_step(model, &state, cfg.dt, rng)?;
        let fn_ = f.value(&next.position);
        tracker.step(
            model,
            f,
            (&state.position, fx),
            (&next.position, fn_),
            state.time,
            cfg.dt,
            cfg.crossing,
            cfg.tolerance,
            rng,
            &mut |e| events.push(e),
        );
        if let Some(e) = events.last() {
            last_time = e.time;
        }
        if next.time - last_time > cfg.max_time {
            return Err(Error::Censored { elapsed: next.time - last_time });
        }
        state = next;
        fx = fn_;
    }
    events.truncate(n_events);
    Ok(CoarseChain { events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Benchmark;
    use crate::point;
    use proptest::prelude::*;

    fn linear(levels: Vec<f64>) -> MilestoneSet {
        MilestoneSet::new(Arc::new(AffineLevel::coordinate(0)), levels).unwrap()
    }

    #[test]
    fn assign_index_cases() {
        let z = [1.0, 0.5, 0.0];
        assert_eq!(assign_index(0.0, Some(1), &z), Some(2));
        assert_eq!(assign_index(0.5, Some(1), &z), Some(1));
        assert_eq!(assign_index(0.3, None, &z), None);
        assert_eq!(assign_index(0.3, Some(0), &z), Some(0));
    }

    #[test]
    fn levels_must_decrease() {
        let f: Arc<dyn LevelFunction> = Arc::new(AffineLevel::coordinate(0));
        assert!(MilestoneSet::new(f.clone(), vec![0.0, 0.5]).is_err());
        assert!(MilestoneSet::new(f.clone(), vec![0.5, 0.5]).is_err());
        assert!(MilestoneSet::new(f, vec![]).is_err());
    }

    #[test]
    fn cells_at_the_ends_are_one_sided() {
        let m = linear(vec![0.8, 0.6, 0.4, 0.2]);
        let c0 = m.cell(0).unwrap();
        assert_eq!((c0.upper, c0.lower), (None, Some(0.6)));
        let c3 = m.cell(3).unwrap();
        assert_eq!((c3.upper, c3.lower), (Some(0.4), None));
        let c1 = m.cell(1).unwrap();
        assert_eq!((c1.upper, c1.lower), (Some(0.8), Some(0.4)));
        assert!(c1.contains_value(0.6) && !c1.contains_value(0.9));
        assert!(m.cell(4).is_err());
    }

    #[test]
    fn restriction_cases() {
        let m = linear(vec![0.8, 0.65, 0.5, 0.35, 0.2]);
        assert_eq!(m.restrict(&[0, 4]).unwrap().levels(), &[0.8, 0.2]);
        assert_eq!(m.restrict(&[0, 1, 2, 3, 4]).unwrap().levels(), m.levels());
        assert_eq!(m.restrict(&[2, 4]).unwrap().levels(), &[0.5, 0.2]);
        assert!(m.restrict(&[]).is_err());
    }

    #[test]
    fn ou_chain_has_only_neighbor_jumps() {
        let model = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let m = linear(vec![0.5, 0.0, -0.5]);
        for rule in [CrossingRule::Linear, CrossingRule::BrownianBridge] {
            let mut rng = RngStream::new(3, 0);
            let cfg = StepConfig::new(1e-3).with_crossing(rule);
            let chain = extract_chain(&model, &m, point(0.1, 0.0), 200.0, &cfg, &mut rng).unwrap();
            assert!(chain.len() > 100);
            chain.validate().unwrap();
            for e in &chain.events {
                assert!((e.position.x - m.level(e.index)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn short_run_gives_empty_chain() {
        let model = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let m = linear(vec![3.0, -3.0]);
        let mut rng = RngStream::new(3, 0);
        let chain = extract_chain(&model, &m, point(0.0, 0.0), 0.01, &StepConfig::new(1e-3), &mut rng).unwrap();
        assert!(chain.is_empty());
    }

    #[test]
    fn restricted_chain_matches_restricted_milestones() {
        let model = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let full = linear(vec![0.8, 0.4, 0.0, -0.4, -0.8]);
        let sub = [0usize, 2, 4];
        let cfg = StepConfig::new(1e-3);
        let a = extract_chain(&model, &full, point(0.1, 0.0), 300.0, &cfg, &mut RngStream::new(8, 1)).unwrap();
        let b = extract_chain(&model, &full.restrict(&sub).unwrap(), point(0.1, 0.0), 300.0, &cfg, &mut RngStream::new(8, 1))
            .unwrap();
        assert!(b.len() > 20);
        assert_eq!(a.restrict(&sub), b);
    }

    #[test]
    fn anchor_by_bisection() {
        let m = linear(vec![0.3, -0.2]);
        let p = m.anchor_point(1, point(-1.0, 0.0), point(1.0, 0.0)).unwrap();
        assert!((p.x + 0.2).abs() < 1e-12);
        assert!(m.anchor_point(0, point(0.5, 0.0), point(1.0, 0.0)).is_err());
    }

    #[test]
    fn irregular_points_detected() {
        let f = FnLevel { f: |x: &Point| x.x * x.x, grad: |x: &Point| point(2.0 * x.x, 0.0) };
        let m = MilestoneSet::new(Arc::new(f), vec![0.0]).unwrap();
        assert!(matches!(
            m.check_regular(0, &[point(0.0, 0.0)]),
            Err(Error::IrregularLevel { .. })
        ));
    }

    proptest! {
        #[test]
        fn assign_index_is_idempotent(z in proptest::collection::vec(-5.0f64..5.0, 1..6), prev in 0usize..6, k in 0usize..6) {
            let mut z = z;
            z.sort_by(|a, b| b.total_cmp(a));
            z.dedup();
            let k = k % z.len();
            let once = assign_index(z[k], Some(prev), &z);
            let twice = assign_index(z[k], once, &z);
            prop_assert_eq!(once, twice);
            prop_assert_eq!(once, Some(k));
        }
    }
}
