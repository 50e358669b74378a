//! Transition statistics of the milestone index chain, from one long
//! trajectory or from independent reflected cells, plus the first-hitting
//! kernel between milestone bins and a Markov-memory diagnostic.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::LevelSetMesh;
use crate::error::{invalid, Error, Result};
use crate::integrate::{cell_step, crossing_fraction, run_until_hit, CrossingRule, HitEvent, StepConfig, TrajectoryState};
use crate::milestones::{drive_chain, CoarseChain, IndexTracker, MilestoneSet};
use crate::model::DiffusionModel;
use crate::rng::RngStream;
use crate::special::chi_square_sf;
use crate::stats::{mean_var, ratio_batch_se};
use crate::Point;

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 20;

/// Indices with fewer departures than this trigger an under-sampling warning.
pub const MIN_DEPARTURES: u64 = 100;

/// Uniform random subsample of a stream of points with bounded memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub cap: usize,
    pub seen: u64,
    pub items: Vec<Point>,
}

impl Reservoir {
    pub fn new(cap: usize) -> Self {
        Self { cap, seen: 0, items: Vec::new() }
    }

    pub fn offer(&mut self, p: Point, rng: &mut RngStream) {
        self.seen += 1;
        if self.items.len() < self.cap {
            self.items.push(p);
        } else {
            let k = rng.below(self.seen) as usize;
            if k < self.cap {
                self.items[k] = p;
            }
        }
    }

    /// Pools two reservoirs, keeping each side's share proportional to the
    /// number of points it has seen. Reservoir contents are in random
    /// order, so leading items form a uniform subsample.
    pub fn merge(&mut self, other: &Reservoir) {
        let seen = self.seen + other.seen;
        if self.items.len() + other.items.len() <= self.cap {
            self.items.extend_from_slice(&other.items);
        } else {
            let take_self = ((self.cap as f64) * self.seen as f64 / seen.max(1) as f64).round() as usize;
            let take_self = take_self.min(self.items.len()).max(self.cap.saturating_sub(other.items.len()));
            let take_other = (self.cap - take_self).min(other.items.len());
            self.items.truncate(take_self);
            self.items.extend_from_slice(&other.items[..take_other]);
        }
        self.seen = seen;
    }
}

/// Sufficient statistics for milestoning estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionStats {
    /// `N_ij`: completed sojourns in `i` ending at `j`.
    pub counts: Vec<Vec<u64>>,
    /// Sums of the lags of those sojourns.
    pub lag_sums: Vec<Vec<f64>>,
    /// `R_i`: total time assigned to index `i` over completed sojourns.
    pub residence: Vec<f64>,
    pub total_time: f64,
    /// Per-batch departure counts `[batch][i][j]`.
    pub batch_counts: Vec<Vec<Vec<u64>>>,
    /// Per-batch residence times `[batch][i]`.
    pub batch_residence: Vec<Vec<f64>>,
    /// Hit positions per milestone.
    pub hits: Vec<Reservoir>,
    pub censored: u64,
}

impl TransitionStats {
    pub fn new(n: usize, reservoir_cap: usize) -> Self {
        Self {
            counts: vec![vec![0; n]; n],
            lag_sums: vec![vec![0.0; n]; n],
            residence: vec![0.0; n],
            total_time: 0.0,
            batch_counts: vec![vec![vec![0; n]; n]; BATCHES],
            batch_residence: vec![vec![0.0; n]; BATCHES],
            hits: vec![Reservoir::new(reservoir_cap); n],
            censored: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.residence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residence.is_empty()
    }

    /// Statistics of a recorded chain over `n` milestones; batches split the
    /// chain's time span into equal parts.
    pub fn from_chain(chain: &CoarseChain, n: usize, total_time: f64, reservoir_cap: usize, rng: &mut RngStream) -> Result<Self> {
        chain.validate()?;
        if let Some(e) = chain.events.iter().find(|e| e.index >= n) {
            return Err(invalid(format!("chain visits index {} outside 0..{n}", e.index)));
        }
        let mut s = Self::new(n, reservoir_cap);
        for w in chain.events.windows(2) {
            let batch = ((w[1].time / total_time) * BATCHES as f64) as usize;
            s.record(w[0].index, w[1].index, w[1].time - w[0].time, batch);
        }
        for e in &chain.events {
            s.hits[e.index].offer(e.position, rng);
        }
        s.total_time = total_time;
        Ok(s)
    }

    /// Records a completed sojourn in `i` that ended at `j` after `lag`.
    pub fn record(&mut self, i: usize, j: usize, lag: f64, batch: usize) {
        let b = batch.min(BATCHES - 1);
        self.counts[i][j] += 1;
        self.lag_sums[i][j] += lag;
        self.residence[i] += lag;
        self.batch_counts[b][i][j] += 1;
        self.batch_residence[b][i] += lag;
    }

    /// `N_i = sum_j N_ij`.
    pub fn departures(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn total_departures(&self) -> u64 {
        (0..self.len()).map(|i| self.departures(i)).sum()
    }

    /// `p_ij = N_ij / N_i`; rows without departures are zero.
    pub fn p_hat(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| {
            let ni = self.departures(i);
            if ni == 0 {
                0.0
            } else {
                self.counts[i][j] as f64 / ni as f64
            }
        })
    }

    /// Binomial standard errors `sqrt(p (1 - p) / N_i)`.
    pub fn p_se(&self) -> DMatrix<f64> {
        let p = self.p_hat();
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| {
            let ni = self.departures(i) as f64;
            if ni == 0.0 {
                f64::NAN
            } else {
                (p[(i, j)] * (1.0 - p[(i, j)]) / ni).sqrt()
            }
        })
    }

    /// `t_i = R_i / N_i`.
    pub fn t_hat(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            let ni = self.departures(i);
            if ni == 0 {
                f64::NAN
            } else {
                self.residence[i] / ni as f64
            }
        })
    }

    /// Batch-means standard errors of `t_i`.
    pub fn t_se(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| {
            let num: Vec<f64> = self.batch_residence.iter().map(|r| r[i]).collect();
            let den: Vec<f64> = self
                .batch_counts
                .iter()
                .map(|c| c[i].iter().sum::<u64>() as f64)
                .collect();
            ratio_batch_se(&num, &den)
        })
    }

    /// Empirical index distribution: share of departures from each index.
    pub fn pi_hat(&self) -> DVector<f64> {
        let total = self.total_departures().max(1) as f64;
        DVector::from_fn(self.len(), |i, _| self.departures(i) as f64 / total)
    }

    /// Batch-means standard errors of the empirical index distribution.
    pub fn pi_se(&self) -> DVector<f64> {
        let n = self.len();
        DVector::from_fn(n, |i, _| {
            let num: Vec<f64> = self.batch_counts.iter().map(|c| c[i].iter().sum::<u64>() as f64).collect();
            let den: Vec<f64> = self.batch_counts.iter().map(|c| c.iter().flatten().sum::<u64>() as f64).collect();
            ratio_batch_se(&num, &den)
        })
    }

    /// Indices with fewer than [`MIN_DEPARTURES`] departures.
    pub fn undersampled(&self, floor: u64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.departures(i) < floor).collect()
    }

    /// Adds `other` into `self`. Counts and times add exactly.
    pub fn merge(&mut self, other: &TransitionStats) -> Result<()> {
        if other.len() != self.len() {
            return Err(invalid("cannot merge statistics of different sizes"));
        }
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                self.counts[i][j] += other.counts[i][j];
                self.lag_sums[i][j] += other.lag_sums[i][j];
            }
            self.residence[i] += other.residence[i];
            self.hits[i].merge(&other.hits[i]);
        }
        for b in 0..BATCHES {
            for i in 0..n {
                self.batch_residence[b][i] += other.batch_residence[b][i];
                for j in 0..n {
                    self.batch_counts[b][i][j] += other.batch_counts[b][i][j];
                }
            }
        }
        self.total_time += other.total_time;
        self.censored += other.censored;
        Ok(())
    }

    /// Serializable summary: estimators and their standard errors.
    pub fn report(&self) -> StatsReport {
        let to_rows = |m: DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        StatsReport {
            counts: self.counts.clone(),
            departures: (0..self.len()).map(|i| self.departures(i)).collect(),
            residence: self.residence.clone(),
            total_time: self.total_time,
            p_hat: to_rows(self.p_hat()),
            p_se: to_rows(self.p_se()),
            t_hat: self.t_hat().iter().copied().collect(),
            t_se: self.t_se().iter().copied().collect(),
            pi_hat: self.pi_hat().iter().copied().collect(),
            hits_retained: self.hits.iter().map(|h| h.items.len()).collect(),
            censored: self.censored,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub counts: Vec<Vec<u64>>,
    pub departures: Vec<u64>,
    pub residence: Vec<f64>,
    pub total_time: f64,
    pub p_hat: Vec<Vec<f64>>,
    pub p_se: Vec<Vec<f64>>,
    pub t_hat: Vec<f64>,
    pub t_se: Vec<f64>,
    pub pi_hat: Vec<f64>,
    pub hits_retained: Vec<usize>,
    pub censored: u64,
}

/// Options shared by the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Reservoir capacity for hit positions per milestone.
    pub reservoir_cap: usize,
    /// Start of a long run; defaults to the anchor point of milestone 0.
    pub initial: Option<Point>,
    /// Segment crossing every milestone, used to place starting points.
    pub guide: Option<(Point, Point)>,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { reservoir_cap: 100_000, initial: None, guide: None }
    }
}

/// The segment along which starting points on milestones are located:
/// between the first two potential minima if there are any, otherwise
/// across the box along `x`.
pub fn default_guide(model: &DiffusionModel) -> (Point, Point) {
    let b = model.bounds();
    if model.dim() == 1 {
        return (Point::new(b.lo[0], 0.0), Point::new(b.hi[0], 0.0));
    }
    if let Some(pot) = model.potential() {
        let m = pot.minima();
        if m.len() >= 2 {
            return (m[0], m[1]);
        }
    }
    let yc = 0.5 * (b.lo[1] + b.hi[1]);
    (Point::new(b.lo[0], yc), Point::new(b.hi[0], yc))
}

pub(crate) fn anchor(model: &DiffusionModel, mset: &MilestoneSet, i: usize, opts: &SamplingOptions) -> Result<Point> {
    let (a, b) = opts.guide.unwrap_or_else(|| default_guide(model));
    mset.anchor_point(i, a, b)
}

/// Statistics from one trajectory of length `total_time`.
pub fn estimate_long(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    total_time: f64,
    cfg: &StepConfig,
    rng: &mut RngStream,
    opts: &SamplingOptions,
) -> Result<TransitionStats> {
    let n = mset.len();
    let initial = match opts.initial {
        Some(p) => p,
        None => anchor(model, mset, 0, opts)?,
    };
    let mut stats = TransitionStats::new(n, opts.reservoir_cap);
    let mut sampler = rng.derive(u64::MAX);
    let mut last: Option<HitEvent> = None;
    drive_chain(model, mset, initial, total_time, cfg, rng, &mut |e| {
        if let Some(prev) = last {
            let batch = ((e.time / total_time) * BATCHES as f64) as usize;
            stats.record(prev.index, e.index, e.time - prev.time, batch);
        }
        stats.hits[e.index].offer(e.position, &mut sampler);
        last = Some(e);
    })?;
    stats.total_time = total_time;
    warn_undersampled(&stats);
    Ok(stats)
}

fn warn_undersampled(stats: &TransitionStats) {
    let low = stats.undersampled(MIN_DEPARTURES);
    if !low.is_empty() {
        warn!("indices {low:?} have fewer than {MIN_DEPARTURES} departures");
    }
}

/// Statistics of row `i` from a trajectory confined to the cell of
/// milestone `i`, reflected at its neighbors.
pub fn estimate_cell(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    i: usize,
    transitions: u64,
    cfg: &StepConfig,
    rng: &mut RngStream,
    opts: &SamplingOptions,
) -> Result<TransitionStats> {
    cfg.validate()?;
    let n = mset.len();
    let cell = mset.cell(i)?;
    let f = mset.level_function();
    let mut ids = Vec::with_capacity(3);
    if i > 0 {
        ids.push(i - 1);
    }
    ids.push(i);
    if i + 1 < n {
        ids.push(i + 1);
    }
    let levels: Vec<f64> = ids.iter().map(|&k| mset.level(k)).collect();
    let home = ids.iter().position(|&k| k == i).expect("home index present");
    let mut tracker = IndexTracker::new(levels, ids.clone(), Some(home));
    let start = anchor(model, mset, i, opts)?;
    let mut stats = TransitionStats::new(n, opts.reservoir_cap);
    let mut sampler = rng.derive(u64::MAX);
    let mut state = TrajectoryState::new(start);
    let mut fx = f.value(&start);
    let mut last = HitEvent { index: i, position: start, time: 0.0 };
    let mut burned_in = false;
    let mut recorded = 0u64;
    let mut events: Vec<HitEvent> = Vec::with_capacity(4);
    while recorded < transitions {
        if state.time > cfg.max_time * transitions as f64 {
            return Err(Error::Censored { elapsed: state.time });
        }
        let step = cell_step(model, &state, &cell, f, cfg.dt, cfg.tolerance, rng)?;
        events.clear();
        let mut emit = |e: HitEvent| events.push(e);
        tracker.step(
            model,
            f,
            (&state.position, fx),
            (&step.proposal, step.proposal_f),
            state.time,
            cfg.dt,
            cfg.crossing,
            cfg.tolerance,
            rng,
            &mut emit,
        );
        if let Some(&(_, zb)) = step.feet.first() {
            // The folded remainder of the step, foot to foot, shares the
            // time after the first contact in proportion to length.
            let th = crossing_fraction(fx, step.proposal_f, zb).unwrap_or(1.0);
            let mut nodes: Vec<(Point, f64)> = step.feet.clone();
            nodes.push((step.state.position, step.f));
            let lens: Vec<f64> = nodes.windows(2).map(|w| (w[1].0 - w[0].0).norm()).collect();
            let total: f64 = lens.iter().sum();
            let window = (1.0 - th) * cfg.dt;
            let mut t = state.time + th * cfg.dt;
            for (k, w) in nodes.windows(2).enumerate() {
                let span = if total > 0.0 { window * lens[k] / total } else { window / lens.len() as f64 };
                if span > 0.0 {
                    tracker.step(model, f, (&w[0].0, w[0].1), (&w[1].0, w[1].1), t, span, CrossingRule::Linear, cfg.tolerance, rng, &mut emit);
                }
                t += span;
            }
        }
        for e in &events {
            if last.index == i {
                if burned_in {
                    let batch = (recorded * BATCHES as u64 / transitions) as usize;
                    stats.record(i, e.index, e.time - last.time, batch);
                    recorded += 1;
                }
                burned_in = true;
            }
            if e.index == i && burned_in {
                stats.hits[i].offer(e.position, &mut sampler);
            }
            last = *e;
        }
        state = step.state;
        fx = step.f;
    }
    stats.total_time = state.time;
    Ok(stats)
}

/// Statistics from independent reflected cells, one per milestone, run in
/// parallel on streams `(seed, id + i)` and merged in index order.
pub fn estimate_cells(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    per_cell_transitions: u64,
    cfg: &StepConfig,
    rng: &RngStream,
    opts: &SamplingOptions,
) -> Result<TransitionStats> {
    let n = mset.len();
    let per_cell: Vec<Result<TransitionStats>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            estimate_cell(model, mset, i, per_cell_transitions, cfg, &mut r, opts)
        })
        .collect();
    let mut total = TransitionStats::new(n, opts.reservoir_cap);
    for s in per_cell {
        total.merge(&s?)?;
    }
    warn_undersampled(&total);
    Ok(total)
}

/// Stationary distribution `pi = pi p` of a row-stochastic matrix.
pub fn stationary_index(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(invalid("transition matrix must be square and nonempty"));
    }
    let reach = |forward: bool| -> Vec<bool> {
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0usize];
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let w = if forward { p[(u, v)] } else { p[(v, u)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen
    };
    let (fwd, bwd) = (reach(true), reach(false));
    let bad: Vec<usize> = (0..n).filter(|&k| !fwd[k] || !bwd[k]).collect();
    if !bad.is_empty() {
        return Err(Error::Reducible(bad));
    }
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = crate::linalg::dense_solve(a, rhs)?;
    Ok(pi.map(|v| v.max(0.0)))
}

/// Normalized histogram of hit positions along a milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitHistogram {
    pub edges: Vec<f64>,
    /// Probability density per unit arc length (a single mass of 1 in 1D).
    pub density: Vec<f64>,
    /// Arc-length coordinates of the hits.
    pub samples: Vec<f64>,
}

/// Projects the hits of milestone `i` onto `mesh` and bins their arc-length
/// coordinates into `bins` equal-width bins.
pub fn hit_histogram(stats: &TransitionStats, i: usize, mesh: &LevelSetMesh, bins: usize) -> Result<HitHistogram> {
    let hits = &stats.hits.get(i).ok_or_else(|| invalid(format!("no milestone {i}")))?.items;
    if hits.len() < 500 {
        return Err(Error::InsufficientSamples(format!(
            "milestone {i} has {} retained hits, need 500",
            hits.len()
        )));
    }
    if mesh.dim == 1 {
        return Ok(HitHistogram { edges: vec![0.0, 0.0], density: vec![1.0], samples: vec![0.0; hits.len()] });
    }
    let samples: Vec<f64> = hits.iter().map(|p| mesh.arc_coordinate(p)).collect();
    let len = mesh.length();
    let bins = bins.max(1);
    let width = len / bins as f64;
    let mut counts = vec![0usize; bins];
    for s in &samples {
        counts[((s / width) as usize).min(bins - 1)] += 1;
    }
    let total = samples.len() as f64;
    Ok(HitHistogram {
        edges: (0..=bins).map(|b| b as f64 * width).collect(),
        density: counts.iter().map(|c| *c as f64 / total / width).collect(),
        samples,
    })
}

/// How kernel trajectories are started within a bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// From one representative point per bin.
    #[default]
    BinCenters,
    /// Cycling through retained hit positions that fall in the bin.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Bins per milestone in 2D (always one in 1D).
    pub bins: usize,
    pub samples_per_bin: usize,
    pub start: StartMode,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { bins: 20, samples_per_bin: 200, start: StartMode::BinCenters }
    }
}

/// One launch from a bin: elapsed time and the arrival `(milestone, bin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Launch {
    pub elapsed: f64,
    pub target: usize,
    pub target_bin: usize,
}

/// First-hitting statistics from the bins of one milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneKernel {
    pub index: usize,
    /// Arc-length bin edges (`[0, 0]` in 1D).
    pub edges: Vec<f64>,
    /// Empirical hitting weights `mu_i(b)`.
    pub weights: Vec<f64>,
    /// Representative start point per bin.
    pub centers: Vec<Point>,
    /// Mean time to the first hit of another milestone, per bin.
    pub tau: Vec<f64>,
    pub counts: Vec<u64>,
    /// Arrival frequencies per bin as `(milestone, bin, probability)`.
    pub transitions: Vec<Vec<(usize, usize, f64)>>,
    pub launches: Vec<Vec<Launch>>,
    pub censored: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub milestones: Vec<MilestoneKernel>,
}

impl KernelEstimate {
    pub fn censored(&self) -> u64 {
        self.milestones.iter().map(|m| m.censored).sum()
    }

    pub fn launches(&self) -> u64 {
        self.milestones.iter().map(|m| m.counts.iter().sum::<u64>()).sum()
    }

    /// `sum_b mu_i(b) tau_i(b)`.
    pub fn weighted_tau(&self, i: usize) -> f64 {
        let m = &self.milestones[i];
        m.weights.iter().zip(&m.tau).map(|(w, t)| w * t).sum()
    }
}

fn bin_of(edges: &[f64], s: f64) -> usize {
    let nb = edges.len() - 1;
    if nb <= 1 {
        return 0;
    }
    edges[1..nb].partition_point(|e| *e <= s).min(nb - 1)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

struct Binning {
    edges: Vec<f64>,
    weights: Vec<f64>,
    centers: Vec<Point>,
    starts: Vec<Vec<Point>>,
}

/// Bins are equal-mass under the empirical hits when available (so that
/// every bin carries weight `1 / B`), equal-length otherwise.
fn bin_milestone(mesh: &LevelSetMesh, hits: Option<&[Point]>, bins: usize) -> Binning {
    if mesh.dim == 1 {
        let starts = hits.map(|h| h.to_vec()).unwrap_or_default();
        return Binning { edges: vec![0.0, 0.0], weights: vec![1.0], centers: vec![mesh.points[0]], starts: vec![starts] };
    }
    let len = mesh.length();
    match hits.filter(|h| h.len() >= 2 * bins) {
        Some(h) => {
            let mut s: Vec<f64> = h.iter().map(|p| mesh.arc_coordinate(p)).collect();
            s.sort_by(f64::total_cmp);
            let mut edges: Vec<f64> = (0..=bins).map(|b| quantile(&s, b as f64 / bins as f64)).collect();
            edges[0] = 0.0;
            edges[bins] = len;
            let mut starts = vec![Vec::new(); bins];
            let mut counts = vec![0usize; bins];
            for p in h {
                let b = bin_of(&edges, mesh.arc_coordinate(p));
                counts[b] += 1;
                starts[b].push(*p);
            }
            let total = h.len() as f64;
            Binning {
                centers: (0..bins).map(|b| mesh.point_at(quantile(&s, (b as f64 + 0.5) / bins as f64))).collect(),
                weights: counts.iter().map(|c| *c as f64 / total).collect(),
                edges,
                starts,
            }
        }
        None => {
            let edges: Vec<f64> = (0..=bins).map(|b| len * b as f64 / bins as f64).collect();
            Binning {
                centers: (0..bins).map(|b| mesh.point_at(0.5 * (edges[b] + edges[b + 1]))).collect(),
                weights: vec![1.0 / bins as f64; bins],
                edges,
                starts: vec![Vec::new(); bins],
            }
        }
    }
}

/// Estimates the first-hitting kernel between milestone bins by launching
/// free trajectories from each bin and recording the first arrival at a
/// different milestone. `hits` (per milestone) supply equal-mass bins, the
/// weights `mu_i(b)` and the starting points of the empirical mode.
#[allow(clippy::too_many_arguments)]
pub fn estimate_kernel(
    model: &DiffusionModel,
    mset: &MilestoneSet,
    meshes: &[LevelSetMesh],
    hits: Option<&[Vec<Point>]>,
    opts: &KernelOptions,
    cfg: &StepConfig,
    rng: &RngStream,
) -> Result<KernelEstimate> {
    let n = mset.len();
    if meshes.len() != n {
        return Err(invalid(format!("{} meshes for {n} milestones", meshes.len())));
    }
    if opts.samples_per_bin == 0 {
        return Err(invalid("samples_per_bin must be positive"));
    }
    let bins = if model.dim() == 1 { 1 } else { opts.bins.max(1) };
    let binnings: Vec<Binning> = (0..n)
        .map(|i| bin_milestone(&meshes[i], hits.map(|h| h[i].as_slice()), bins))
        .collect();
    if opts.start == StartMode::Empirical {
        for (i, b) in binnings.iter().enumerate() {
            if let Some(k) = b.starts.iter().position(|s| s.is_empty()) {
                return Err(Error::InsufficientSamples(format!("milestone {i} bin {k} has no hit positions")));
            }
        }
    }
    let f = mset.level_function();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..binnings[i].centers.len()).map(move |b| (i, b))).collect();
    let results: Vec<Result<(Vec<Launch>, u64)>> = jobs
        .par_iter()
        .map(|&(i, b)| {
            let mut r = rng.derive(((i as u64) << 32) | b as u64);
            let mut targets = Vec::with_capacity(2);
            if i > 0 {
                targets.push((i - 1, mset.level(i - 1)));
            }
            if i + 1 < n {
                targets.push((i + 1, mset.level(i + 1)));
            }
            let mut launches = Vec::with_capacity(opts.samples_per_bin);
            let mut censored = 0u64;
            for k in 0..opts.samples_per_bin {
                let start = match opts.start {
                    StartMode::BinCenters => binnings[i].centers[b],
                    StartMode::Empirical => {
                        let s = &binnings[i].starts[b];
                        s[k % s.len()]
                    }
                };
                match run_until_hit(model, &TrajectoryState::new(start), &targets, f, cfg, &mut r, true) {
                    Ok(hit) => {
                        let s = meshes[hit.index].arc_coordinate(&hit.position);
                        launches.push(Launch {
                            elapsed: hit.time,
                            target: hit.index,
                            target_bin: bin_of(&binnings[hit.index].edges, s),
                        });
                    }
                    Err(Error::Censored { .. }) => censored += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((launches, censored))
        })
        .collect();
    let mut milestones: Vec<MilestoneKernel> = binnings
        .iter()
        .enumerate()
        .map(|(i, b)| MilestoneKernel {
            index: i,
            edges: b.edges.clone(),
            weights: b.weights.clone(),
            centers: b.centers.clone(),
            tau: Vec::new(),
            counts: Vec::new(),
            transitions: Vec::new(),
            launches: Vec::new(),
            censored: 0,
        })
        .collect();
    for (&(i, b), res) in jobs.iter().zip(results) {
        let (launches, censored) = res?;
        let mk = &mut milestones[i];
        mk.censored += censored;
        if launches.is_empty() {
            return Err(Error::InsufficientSamples(format!("milestone {i} bin {b}: every launch was censored")));
        }
        let total = launches.len() as f64;
        let mut freq: Vec<(usize, usize, f64)> = Vec::new();
        for l in &launches {
            match freq.iter_mut().find(|e| e.0 == l.target && e.1 == l.target_bin) {
                Some(e) => e.2 += 1.0,
                None => freq.push((l.target, l.target_bin, 1.0)),
            }
        }
        freq.sort_by_key(|e| (e.0, e.1));
        for e in &mut freq {
            e.2 /= total;
        }
        mk.tau.push(launches.iter().map(|l| l.elapsed).sum::<f64>() / total);
        mk.counts.push(launches.len() as u64);
        mk.transitions.push(freq);
        mk.launches.push(launches);
    }
    Ok(KernelEstimate { milestones })
}

/// Per-cell result of the memory diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCell {
    pub previous: usize,
    pub current: usize,
    pub events: u64,
    pub chi_square: f64,
    pub dof: usize,
    pub p_value: f64,
    pub rejected: bool,
    /// Largest |z| over next indices of the conditional lag-mean comparison.
    pub lag_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub cells: Vec<MemoryCell>,
    /// `(previous, current)` pairs skipped for lack of data or freedom.
    pub excluded: Vec<(usize, usize)>,
    /// Per-test significance after Bonferroni correction.
    pub threshold: f64,
    pub max_lag_z: f64,
}

impl MemoryReport {
    pub fn rejections(&self) -> usize {
        self.cells.iter().filter(|c| c.rejected).count()
    }
}

/// Compares second-order transition frequencies `P(next | prev, cur)` with
/// first-order `P(next | cur)` by a chi-square statistic per `(prev, cur)`
/// cell, and the lag means `E[lag | prev, cur, next]` with
/// `E[lag | cur, next]` by z-scores.
pub fn memory_diagnostic(chain: &CoarseChain) -> Result<MemoryReport> {
    memory_diagnostic_with(chain, 10_000, 1e-3)
}

/// [`memory_diagnostic`] with an explicit minimum chain length and family
/// significance level.
pub fn memory_diagnostic_with(chain: &CoarseChain, min_events: usize, alpha: f64) -> Result<MemoryReport> {
    if chain.len() < min_events {
        return Err(Error::InsufficientSamples(format!("chain has {} events, need {min_events}", chain.len())));
    }
    let idx = chain.indices();
    let times: Vec<f64> = chain.events.iter().map(|e| e.time).collect();
    let n = idx.iter().max().map_or(0, |m| m + 1);
    // first[cur][next], second[prev][cur][next], lags by (cur, next) and (prev, cur, next).
    let mut first = vec![vec![0u64; n]; n];
    let mut second = vec![vec![vec![0u64; n]; n]; n];
    let mut pair_lags: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; n];
    let mut cell_lags: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![vec![Vec::new(); n]; n]; n];
    for k in 1..idx.len() - 1 {
        let (p, c, x) = (idx[k - 1], idx[k], idx[k + 1]);
        let lag = times[k + 1] - times[k];
        first[c][x] += 1;
        second[p][c][x] += 1;
        pair_lags[c][x].push(lag);
        cell_lags[p][c][x].push(lag);
    }
    let mut cells = Vec::new();
    let mut excluded = Vec::new();
    for p in 0..n {
        for c in 0..n {
            let total: u64 = second[p][c].iter().sum();
            if total == 0 {
                continue;
            }
            let ctot: u64 = first[c].iter().sum();
            let mut chi = 0.0;
            let mut outcomes = 0usize;
            let mut small = false;
            for x in 0..n {
                if first[c][x] == 0 {
                    continue;
                }
                outcomes += 1;
                let e = total as f64 * first[c][x] as f64 / ctot as f64;
                if e < 5.0 {
                    small = true;
                }
                let o = second[p][c][x] as f64;
                chi += (o - e) * (o - e) / e;
            }
            if outcomes < 2 || small {
                excluded.push((p, c));
                continue;
            }
            let mut lag_z: f64 = 0.0;
            for x in 0..n {
                let (cl, pl) = (&cell_lags[p][c][x], &pair_lags[c][x]);
                if cl.len() < 2 || cl.len() == pl.len() {
                    continue;
                }
                let (mc, _) = mean_var(cl);
                let (mp, vp) = mean_var(pl);
                let se = (vp * (1.0 / cl.len() as f64 - 1.0 / pl.len() as f64)).sqrt();
                if se > 0.0 {
                    lag_z = lag_z.max(((mc - mp) / se).abs());
                }
            }
            cells.push(MemoryCell {
                previous: p,
                current: c,
                events: total,
                chi_square: chi,
                dof: outcomes - 1,
                p_value: chi_square_sf(chi, (outcomes - 1) as f64),
                rejected: false,
                lag_z,
            });
        }
    }
    let threshold = alpha / cells.len().max(1) as f64;
    for c in &mut cells {
        c.rejected = c.p_value < threshold;
    }
    let max_lag_z = cells.iter().map(|c| c.lag_z).fold(0.0, f64::max);
    Ok(MemoryReport { cells, excluded, threshold, max_lag_z })
}
