//! Euler–Maruyama stepping, level-crossing detection and reflective cells.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::milestones::{Cell, LevelFunction};
use crate::model::DiffusionModel;
use crate::rng::RngStream;
use crate::Point;

/// Default crossing tolerance in level-function units.
pub const CROSSING_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub position: Point,
    pub time: f64,
}

impl TrajectoryState {
    pub fn new(position: Point) -> Self {
        Self { position, time: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitEvent {
    pub index: usize,
    pub position: Point,
    pub time: f64,
}

/// How crossings between two consecutive steps are detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingRule {
    /// Sign change of `f - z` between the step endpoints.
    #[default]
    Linear,
    /// Sign change, or else a Brownian-bridge excursion across the level
    /// drawn with probability `exp(-2 d0 d1 / (s^2 dt))`, where `d0, d1` are
    /// the endpoint distances in `f` and `s^2 = 2 grad f . a grad f`.
    BrownianBridge,
}

/// Time stepping parameters shared by all samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub dt: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub crossing: CrossingRule,
    #[serde(default = "default_max_time")]
    pub max_time: f64,
}

fn default_tolerance() -> f64 {
    CROSSING_TOLERANCE
}

fn default_max_time() -> f64 {
    1e4
}

impl StepConfig {
    pub fn new(dt: f64) -> Self {
        Self { dt, tolerance: CROSSING_TOLERANCE, crossing: CrossingRule::Linear, max_time: 1e4 }
    }

    pub fn with_crossing(mut self, rule: CrossingRule) -> Self {
        self.crossing = rule;
        self
    }

    pub fn with_max_time(mut self, t: f64) -> Self {
        self.max_time = t;
        self
    }

    /// Default step for a model's dimension.
    pub fn default_for(dim: usize) -> Self {
        Self::new(if dim == 1 { 1e-3 } else { 5e-4 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.max_time > 0.0) {
            return Err(invalid("max_time must be positive"));
        }
        Ok(())
    }
}

/// One Euler–Maruyama step of `dX = (b + div a) dt + sqrt(2) sigma dW`.
pub fn em_step(
    model: &DiffusionModel,
    state: &TrajectoryState,
    dt: f64,
    rng: &mut RngStream,
) -> Result<TrajectoryState> {
    if !(dt > 0.0) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    Ok(TrajectoryState { position: propose(model, state, dt, rng)?, time: state.time + dt })
}

#[inline]
fn propose(model: &DiffusionModel, state: &TrajectoryState, dt: f64, rng: &mut RngStream) -> Result<Point> {
    let x = &state.position;
    let drift = model.drift(x) + model.tensor_divergence(x);
    let s = model.noise(x);
    let scale = (2.0 * dt).sqrt();
    let next = if model.dim() == 1 {
        Point::new(x.x + drift.x * dt + scale * s[(0, 0)] * rng.normal(), 0.0)
    } else {
        let z = Point::new(rng.normal(), rng.normal());
        x + drift * dt + scale * (s * z)
    };
    if !next.x.is_finite() || !next.y.is_finite() {
        return Err(Error::BlowUp { time: state.time, position: *x });
    }
    Ok(next)
}

/// Moves `x` onto `{f = z}` along `grad f`: one Newton step, repeated (up to
/// a few times) until `|f - z| < tol`.
pub fn project_to_level(f: &dyn LevelFunction, x: Point, z: f64, tol: f64) -> Point {
    let mut y = x;
    for _ in 0..8 {
        let r = f.value(&y) - z;
        if r.abs() < tol {
            break;
        }
        let g = f.gradient(&y);
        let g2 = g.norm_squared();
        if !(g2 > 0.0) {
            break;
        }
        y -= g * (r / g2);
    }
    y
}

/// Fraction along a step at which the linear interpolant of `f` reaches
/// `z`, if `f - z` changes sign (or the endpoint lands on `z`).
#[inline]
pub fn crossing_fraction(f0: f64, f1: f64, z: f64) -> Option<f64> {
    if f0 == f1 || f0 == z {
        return None;
    }
    if (f0 - z) * (f1 - z) <= 0.0 {
        Some(((z - f0) / (f1 - f0)).clamp(0.0, 1.0))
    } else {
        None
    }
}

/// Probability that a Brownian bridge with `f` endpoints `f0, f1` and
/// variance rate `s2` crosses `z` during a step of length `dt`.
#[inline]
pub fn bridge_probability(f0: f64, f1: f64, z: f64, s2: f64, dt: f64) -> f64 {
    let e = 2.0 * (f0 - z) * (f1 - z) / (s2 * dt);
    if e <= 0.0 {
        1.0
    } else if e > 50.0 {
        0.0
    } else {
        (-e).exp()
    }
}

/// Variance rate of `f(X)`: `2 grad f . a grad f`.
#[inline]
pub(crate) fn level_variance_rate(model: &DiffusionModel, f: &dyn LevelFunction, x: &Point) -> f64 {
    let g = f.gradient(x);
    let a = model.tensor(x);
    if model.dim() == 1 {
        2.0 * a[(0, 0)] * g.x * g.x
    } else {
        2.0 * g.dot(&(a * g))
    }
}

/// A crossing found on a step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Crossing {
    /// Position of the level in the caller's target list.
    pub slot: usize,
    pub fraction: f64,
}

/// Earliest crossing among `targets` on the step `x0 -> x1`, skipping
/// `skip`. With the bridge rule, excursions without a sign change are drawn
/// once no sign change is found.
pub(crate) fn first_crossing(
    model: &DiffusionModel,
    f: &dyn LevelFunction,
    targets: &[f64],
    skip: Option<usize>,
    (x0, f0): (&Point, f64),
    f1: f64,
    rule: CrossingRule,
    dt: f64,
    rng: &mut RngStream,
) -> Option<Crossing> {
    let mut best: Option<Crossing> = None;
    for (slot, &z) in targets.iter().enumerate() {
        if Some(slot) == skip {
            continue;
        }
        if let Some(th) = crossing_fraction(f0, f1, z) {
            if best.is_none_or(|b| th < b.fraction) {
                best = Some(Crossing { slot, fraction: th });
            }
        }
    }
    if best.is_some() || rule == CrossingRule::Linear {
        return best;
    }
    let mut s2 = None;
    for (slot, &z) in targets.iter().enumerate() {
        if Some(slot) == skip {
            continue;
        }
        let (d0, d1) = (f0 - z, f1 - z);
        // Cheap rejection before evaluating the gradient.
        if d0 * d1 > 0.0 && d0.abs().min(d1.abs()) > 0.0 {
            let s2 = *s2.get_or_insert_with(|| level_variance_rate(model, f, x0));
            let p = bridge_probability(f0, f1, z, s2, dt);
            if p > 0.0 && rng.uniform() < p {
                let th = d0.abs() / (d0.abs() + d1.abs());
                return Some(Crossing { slot, fraction: th });
            }
        }
    }
    None
}

/// Simulates until the first crossing of any target level.
///
/// `targets` are `(index, level)` pairs. If the start lies within
/// tolerance of a target and `departing` is false, that target is hit at
/// time zero; with `departing` set, it is ignored until the trajectory has
/// left its tolerance band.
pub fn run_until_hit(
    model: &DiffusionModel,
    state: &TrajectoryState,
    targets: &[(usize, f64)],
    f: &dyn LevelFunction,
    cfg: &StepConfig,
    rng: &mut RngStream,
    departing: bool,
) -> Result<HitEvent> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(invalid("no target levels"));
    }
    let levels: Vec<f64> = targets.iter().map(|t| t.1).collect();
    let mut f0 = f.value(&state.position);
    let mut excluded = None;
    for (slot, &(index, z)) in targets.iter().enumerate() {
        if (f0 - z).abs() < cfg.tolerance {
            if departing {
                excluded = Some(slot);
            } else {
                return Ok(HitEvent { index, position: state.position, time: state.time });
            }
        }
    }
    let start = state.time;
    let mut cur = *state;
    while cur.time - start < cfg.max_time {
        let x1 = propose(model, &cur, cfg.dt, rng)?;
        let f1 = f.value(&x1);
        if let Some(c) = first_crossing(
            model,
            f,
            &levels,
            excluded,
            (&cur.position, f0),
            f1,
            cfg.crossing,
            cfg.dt,
            rng,
        ) {
            let (index, z) = targets[c.slot];
            let guess = cur.position + c.fraction * (x1 - cur.position);
            return Ok(HitEvent {
                index,
                position: project_to_level(f, guess, z, cfg.tolerance),
                time: cur.time + c.fraction * cfg.dt,
            });
        }
        if let Some(slot) = excluded {
            if (f1 - levels[slot]).abs() >= cfg.tolerance {
                excluded = None;
            }
        }
        cur = TrajectoryState { position: x1, time: cur.time + cfg.dt };
        f0 = f1;
    }
    Err(Error::Censored { elapsed: cur.time - start })
}

/// Reflections allowed within one confined step.
pub const MAX_FOLDS: usize = 64;

/// Outcome of one confined step.
#[derive(Debug, Clone)]
pub(crate) struct CellStep {
    pub state: TrajectoryState,
    /// The unconstrained proposal, before any reflection.
    pub proposal: Point,
    pub proposal_f: f64,
    /// Foot points and their levels, one per reflection, in path order.
    pub feet: Vec<(Point, f64)>,
    pub f: f64,
}

pub(crate) fn cell_step(
    model: &DiffusionModel,
    state: &TrajectoryState,
    cell: &Cell,
    f: &dyn LevelFunction,
    dt: f64,
    tol: f64,
    rng: &mut RngStream,
) -> Result<CellStep> {
    let x1 = propose(model, state, dt, rng)?;
    let f1 = f.value(&x1);
    let (mut y, mut fy) = (x1, f1);
    let mut feet = Vec::new();
    loop {
        let bound = match (cell.upper, cell.lower) {
            (Some(u), _) if fy > u + tol => u,
            (_, Some(l)) if fy < l - tol => l,
            _ => break,
        };
        if feet.len() == MAX_FOLDS {
            return Err(Error::StepTooLarge { f_value: f1 });
        }
        let foot = project_to_level(f, y, bound, tol);
        y = 2.0 * foot - y;
        fy = f.value(&y);
        feet.push((foot, bound));
    }
    Ok(CellStep {
        state: TrajectoryState { position: y, time: state.time + dt },
        proposal: x1,
        proposal_f: f1,
        feet,
        f: fy,
    })
}

/// One step confined to `cell`: an Euler–Maruyama proposal, mirrored across
/// the bounding level sets along `grad f` until it lies in the cell.
pub fn run_in_cell(
    model: &DiffusionModel,
    state: &TrajectoryState,
    cell: &Cell,
    f: &dyn LevelFunction,
    dt: f64,
    rng: &mut RngStream,
) -> Result<TrajectoryState> {
    if !(dt > 0.0) {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    Ok(cell_step(model, state, cell, f, dt, CROSSING_TOLERANCE, rng)?.state)
}
