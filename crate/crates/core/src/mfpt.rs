//! Mean first passage times between milestones: the discrete Poisson
//! problem on the index chain, its binned counterpart on the first-hitting
//! kernel, direct Monte Carlo on a milestone pair and a 1D quadrature oracle.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimate::{anchor, KernelEstimate, SamplingOptions, TransitionStats, BATCHES};
use crate::integrate::{em_step, StepConfig, TrajectoryState};
use crate::linalg::dense_solve;
use crate::milestones::{IndexTracker, MilestoneSet};
use crate::model::DiffusionModel;
use crate::point;
use crate::quadrature::integrate;
use crate::rng::RngStream;
use crate::stats::mean_var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Optimal,
    Exact,
    Empirical,
    Oracle,
}

/// `T_{i,j}` for all `i` and a fixed target `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MFPTSolution {
    pub target: usize,
    pub values: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
    pub residual: f64,
    pub method: Method,
}

impl MFPTSolution {
    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn stderr(&self, i: usize) -> Option<f64> {
        self.stderr.as_ref().map(|s| s[i])
    }
}

fn check_square(p: &DMatrix<f64>, t: &DVector<f64>, j: usize) -> Result<usize> {
    let n = p.nrows();
    if p.ncols() != n || t.len() != n {
        return Err(invalid(format!("p is {}x{}, t has {} entries", p.nrows(), p.ncols(), t.len())));
    }
    if j >= n {
        return Err(invalid(format!("target {j} outside 0..{n}")));
    }
    if n < 2 {
        return Err(invalid("need at least two milestones"));
    }
    Ok(n)
}

/// Indices (other than `j`) from which `j` cannot be reached.
fn cannot_reach(p: &DMatrix<f64>, j: usize) -> Vec<usize> {
    let n = p.nrows();
    let mut seen = vec![false; n];
    seen[j] = true;
    let mut stack = vec![j];
    while let Some(v) = stack.pop() {
        for u in 0..n {
            if !seen[u] && p[(u, v)] > 0.0 {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    (0..n).filter(|&k| !seen[k]).collect()
}

fn others(n: usize, j: usize) -> Vec<usize> {
    (0..n).filter(|&k| k != j).collect()
}

/// Solves `T_i = t_i + sum_k p_ik T_k` for `i != j` with `T_j = 0` by
/// deleting row and column `j`.
pub fn solve_optimal(p: &DMatrix<f64>, t: &DVector<f64>, j: usize) -> Result<MFPTSolution> {
    let n = check_square(p, t, j)?;
    for i in 0..n {
        let row: f64 = p.row(i).sum();
        if i != j && ((row - 1.0).abs() > 1e-9 || p.row(i).iter().any(|v| *v < 0.0)) {
            return Err(invalid(format!("row {i} of p is not stochastic (sum {row})")));
        }
        if i != j && !(t[i] > 0.0) {
            return Err(invalid(format!("t_{i} = {} is not positive", t[i])));
        }
    }
    let stuck = cannot_reach(p, j);
    if !stuck.is_empty() {
        return Err(Error::Reducible(stuck));
    }
    let idx = others(n, j);
    let m = idx.len();
    let a = DMatrix::from_fn(m, m, |r, c| if r == c { 1.0 } else { 0.0 } - p[(idx[r], idx[c])]);
    let b = DVector::from_fn(m, |r, _| t[idx[r]]);
    let x = dense_solve(a.clone(), b.clone())?;
    let residual = (&a * &x - &b).amax() / b.amax().max(f64::MIN_POSITIVE);
    let mut values = vec![0.0; n];
    for (r, &i) in idx.iter().enumerate() {
        values[i] = x[r];
    }
    if let Some(k) = idx.iter().find(|&&k| !(values[k] > 0.0)) {
        return Err(Error::Inconsistent(format!("T_{k},{j} = {} is not positive", values[*k])));
    }
    Ok(MFPTSolution { target: j, values, stderr: None, residual, method: Method::Optimal })
}

/// First-order error propagation for [`solve_optimal`]:
/// `Var T_s = sum_i G_si^2 (Var t_i + Var(sum_k p_ik T_k))`, where `G` is
/// the inverse of the restricted `I - p` and the second term is the
/// multinomial variance of row `i` with `departures[i]` draws. Pass
/// `departures[i] = 0` for rows taken as exact.
pub fn optimal_stderr(
    p: &DMatrix<f64>,
    t_se: &DVector<f64>,
    departures: &[u64],
    sol: &MFPTSolution,
) -> Result<Vec<f64>> {
    let n = p.nrows();
    let j = sol.target;
    if t_se.len() != n || departures.len() != n || sol.values.len() != n {
        return Err(invalid("dimension mismatch in error propagation"));
    }
    let idx = others(n, j);
    let m = idx.len();
    let a = DMatrix::from_fn(m, m, |r, c| if r == c { 1.0 } else { 0.0 } - p[(idx[r], idx[c])]);
    let g = a.try_inverse().ok_or_else(|| Error::Singular("restricted I - p".into()))?;
    let tv = &sol.values;
    let row_var: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let ti = if t_se[i].is_finite() { t_se[i] * t_se[i] } else { 0.0 };
            let ni = departures[i];
            let pv = if ni == 0 {
                0.0
            } else {
                let m1: f64 = (0..n).map(|k| p[(i, k)] * tv[k]).sum();
                let m2: f64 = (0..n).map(|k| p[(i, k)] * tv[k] * tv[k]).sum();
                (m2 - m1 * m1).max(0.0) / ni as f64
            };
            ti + pv
        })
        .collect();
    let mut se = vec![0.0; n];
    for (r, &s) in idx.iter().enumerate() {
        let v: f64 = (0..m).map(|c| g[(r, c)] * g[(r, c)] * row_var[c]).sum();
        se[s] = v.sqrt();
    }
    Ok(se)
}

/// [`solve_optimal`] on sampled `p-hat`, `t-hat`, with standard errors.
pub fn solve_optimal_from_stats(stats: &TransitionStats, j: usize) -> Result<MFPTSolution> {
    let p = stats.p_hat();
    let t = stats.t_hat();
    let mut sol = solve_optimal(&p, &t, j)?;
    let departures: Vec<u64> = (0..stats.len()).map(|i| stats.departures(i)).collect();
    sol.stderr = Some(optimal_stderr(&p, &stats.t_se(), &departures, &sol)?);
    Ok(sol)
}

/// Iterates `T <- t + p T` with `T_j = 0` from zero until the sup-change
/// drops below `tol`. Converges to the minimal nonnegative solution.
pub fn value_iteration(p: &DMatrix<f64>, t: &DVector<f64>, j: usize, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = check_square(p, t, j)?;
    let mut x = vec![0.0; n];
    for _ in 0..max_iter {
        let mut next = vec![0.0; n];
        let mut change: f64 = 0.0;
        for i in 0..n {
            if i == j {
                continue;
            }
            next[i] = t[i] + (0..n).map(|k| p[(i, k)] * x[k]).sum::<f64>();
            change = change.max((next[i] - x[i]).abs());
        }
        x = next;
        if change < tol {
            return Ok(x);
        }
    }
    Err(Error::NoConvergence(format!("value iteration did not settle in {max_iter} sweeps")))
}

/// Binned `T_j(x)` on every milestone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMFPTField {
    pub target: usize,
    /// `values[i][b]`; identically zero on the target.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExactSolver {
    #[default]
    Direct,
    /// Fixed-point sweeps; falls back to the direct solve if they stall.
    FixedPoint,
}

const FIXED_POINT_TOL: f64 = 1e-10;
const FIXED_POINT_SWEEPS: usize = 200_000;

/// Solves `T_j(x) = tau(x) + int nu(x, dy) T_j(y)` on the bins of `kernel`
/// with `T_j = 0` on milestone `j`, then averages over the hitting weights
/// `mu_i(b)` to get `T_{i,j}`. Standard errors propagate the per-bin
/// sample variance of `elapsed + T_j(arrival)`.
pub fn solve_exact(kernel: &KernelEstimate, j: usize, solver: ExactSolver) -> Result<(ExactMFPTField, MFPTSolution)> {
    let n = kernel.milestones.len();
    if j >= n || n < 2 {
        return Err(invalid(format!("target {j} invalid for {n} milestones")));
    }
    let mut offset = vec![usize::MAX; n];
    let mut m = 0;
    for (i, mk) in kernel.milestones.iter().enumerate() {
        if i != j {
            offset[i] = m;
            m += mk.tau.len();
        }
    }
    let unknown = |i: usize, b: usize| if i == j { None } else { Some(offset[i] + b) };
    let mut nu = DMatrix::zeros(m, m);
    let mut tau = DVector::zeros(m);
    for (i, mk) in kernel.milestones.iter().enumerate() {
        if i == j {
            continue;
        }
        if mk.transitions.len() != mk.tau.len() {
            return Err(Error::InsufficientSamples(format!("milestone {i} kernel rows incomplete")));
        }
        for b in 0..mk.tau.len() {
            let r = offset[i] + b;
            tau[r] = mk.tau[b];
            for &(k, bb, prob) in &mk.transitions[b] {
                if bb >= kernel.milestones[k].tau.len() {
                    return Err(invalid(format!("arrival bin {bb} outside milestone {k}")));
                }
                if let Some(c) = unknown(k, bb) {
                    nu[(r, c)] += prob;
                }
            }
        }
    }
    let a = DMatrix::identity(m, m) - &nu;
    let direct = || dense_solve(a.clone(), tau.clone());
    let x = match solver {
        ExactSolver::Direct => direct()?,
        ExactSolver::FixedPoint => {
            let mut x = DVector::zeros(m);
            let mut done = false;
            for _ in 0..FIXED_POINT_SWEEPS {
                let next = &tau + &nu * &x;
                let change = (&next - &x).amax();
                x = next;
                if change < FIXED_POINT_TOL {
                    done = true;
                    break;
                }
            }
            if done {
                x
            } else {
                log::warn!("fixed-point sweeps did not settle; using the direct solve");
                direct()?
            }
        }
    };
    let residual = (&a * &x - &tau).amax() / tau.amax().max(f64::MIN_POSITIVE);
    let mut field = vec![Vec::new(); n];
    for (i, mk) in kernel.milestones.iter().enumerate() {
        field[i] = (0..mk.tau.len()).map(|b| unknown(i, b).map_or(0.0, |r| x[r])).collect();
    }
    if let Some((i, _)) = field.iter().enumerate().find(|(i, v)| *i != j && v.iter().any(|t| !(*t > 0.0))) {
        return Err(Error::Inconsistent(format!("binned T_{j} on milestone {i} is not positive")));
    }
    // Per-row variance of the one-step estimate elapsed + T(arrival).
    let mut row_var = DVector::zeros(m);
    for (i, mk) in kernel.milestones.iter().enumerate() {
        if i == j {
            continue;
        }
        for (b, launches) in mk.launches.iter().enumerate() {
            let ys: Vec<f64> = launches.iter().map(|l| l.elapsed + field[l.target][l.target_bin]).collect();
            let (_, v) = mean_var(&ys);
            row_var[offset[i] + b] = if v.is_finite() { v / ys.len() as f64 } else { 0.0 };
        }
    }
    let at = a.transpose();
    let lu = at.lu();
    let mut values = vec![0.0; n];
    let mut se = vec![0.0; n];
    for (i, mk) in kernel.milestones.iter().enumerate() {
        if i == j {
            continue;
        }
        values[i] = mk.weights.iter().zip(&field[i]).map(|(w, t)| w * t).sum();
        let mut mu = DVector::zeros(m);
        for (b, w) in mk.weights.iter().enumerate() {
            mu[offset[i] + b] = *w;
        }
        let v = lu.solve(&mu).ok_or_else(|| Error::Singular("transposed kernel system".into()))?;
        se[i] = v.iter().zip(row_var.iter()).map(|(vi, ri)| vi * vi * ri).sum::<f64>().sqrt();
    }
    Ok((
        ExactMFPTField { target: j, values: field },
        MFPTSolution { target: j, values, stderr: Some(se), residual, method: Method::Exact },
    ))
}

/// Direct estimate of the two mean passage times of a milestone pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMFPT {
    /// From milestone 0 of the pair to milestone 1.
    pub forward: f64,
    pub forward_se: f64,
    pub backward: f64,
    pub backward_se: f64,
    /// Completed forward passages.
    pub transitions: u64,
}

fn pooled_batches(samples: &[Vec<f64>]) -> (f64, f64) {
    let mut means = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for s in samples {
        sum += s.iter().sum::<f64>();
        count += s.len();
        let nb = BATCHES.min(s.len());
        for b in 0..nb {
            let (lo, hi) = (b * s.len() / nb, (b + 1) * s.len() / nb);
            means.push(s[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
    }
    let (_, v) = mean_var(&means);
    (sum / count.max(1) as f64, (v / means.len() as f64).sqrt())
}

/// Runs the two-milestone chain of `pair` on `replicas` independent
/// streams until `n_transitions` passages `0 -> 1` are collected in total.
/// A lag counts toward `T_{0,1}` when the sojourn it closes started at
/// milestone 0, and toward `T_{1,0}` otherwise.
pub fn mfpt_empirical(
    model: &DiffusionModel,
    pair: &MilestoneSet,
    n_transitions: u64,
    cfg: &StepConfig,
    rng: &RngStream,
    replicas: usize,
    opts: &SamplingOptions,
) -> Result<EmpiricalMFPT> {
    cfg.validate()?;
    if pair.len() != 2 {
        return Err(invalid(format!("expected a milestone pair, got {} milestones", pair.len())));
    }
    if replicas == 0 || n_transitions < replicas as u64 {
        return Err(invalid("need at least one passage per replica"));
    }
    let start = match opts.initial {
        Some(p) => p,
        None => anchor(model, pair, 0, opts)?,
    };
    let f = pair.level_function();
    let per: Vec<u64> = (0..replicas as u64)
        .map(|r| n_transitions / replicas as u64 + u64::from(r < n_transitions % replicas as u64))
        .collect();
    let runs: Vec<Result<(Vec<f64>, Vec<f64>)>> = per
        .par_iter()
        .enumerate()
        .map(|(r, &want)| {
            let mut rng = rng.derive(r as u64);
            let mut tracker = IndexTracker::new(pair.levels().to_vec(), vec![0, 1], None);
            let mut state = TrajectoryState::new(start);
            let mut fx = f.value(&start);
            let mut last: Option<(usize, f64)> = None;
            let mut burned_in = false;
            let (mut fwd, mut bwd) = (Vec::new(), Vec::new());
            while (fwd.len() as u64) < want {
                let next = em_step(model, &state, cfg.dt, &mut rng)?;
                let fnext = f.value(&next.position);
                let mut events = Vec::with_capacity(2);
                tracker.step(
                    model,
                    f,
                    (&state.position, fx),
                    (&next.position, fnext),
                    state.time,
                    cfg.dt,
                    cfg.crossing,
                    cfg.tolerance,
                    &mut rng,
                    &mut |e| events.push(e),
                );
                for e in events {
                    if let Some((k, t0)) = last {
                        if burned_in {
                            if k == 0 { &mut fwd } else { &mut bwd }.push(e.time - t0);
                        }
                        burned_in = true;
                    }
                    last = Some((e.index, e.time));
                }
                if next.time - last.map_or(0.0, |l| l.1) > cfg.max_time {
                    return Err(Error::Censored { elapsed: next.time - last.map_or(0.0, |l| l.1) });
                }
                state = next;
                fx = fnext;
            }
            Ok((fwd, bwd))
        })
        .collect();
    let mut fwd = Vec::with_capacity(replicas);
    let mut bwd = Vec::with_capacity(replicas);
    for r in runs {
        let (a, b) = r?;
        fwd.push(a);
        bwd.push(b);
    }
    let (forward, forward_se) = pooled_batches(&fwd);
    let (backward, backward_se) = pooled_batches(&bwd);
    Ok(EmpiricalMFPT { forward, forward_se, backward, backward_se, transitions: n_transitions })
}

/// Mean first passage time of a reversible 1D diffusion with constant
/// scalar `a` from `x_start` to `x_target`, reflecting at the far end of
/// the model's interval `[-L, L]`:
/// `int_{x_start}^{x_target} dy a^{-1} e^{beta V(y)} int_{-L}^{y} e^{-beta V(z)} dz`.
pub fn mfpt_quadrature_1d(model: &DiffusionModel, x_start: f64, x_target: f64) -> Result<f64> {
    let b = model.bounds();
    mfpt_quadrature_1d_on(model, x_start, x_target, b.lo[0], b.hi[0])
}

/// [`mfpt_quadrature_1d`] on an explicit truncation interval `[lo, hi]`.
pub fn mfpt_quadrature_1d_on(model: &DiffusionModel, x_start: f64, x_target: f64, lo: f64, hi: f64) -> Result<f64> {
    if model.dim() != 1 || !model.is_reversible() {
        return Err(invalid("quadrature oracle needs a reversible 1D model"));
    }
    let (Some(pot), Some(beta)) = (model.potential(), model.beta()) else {
        return Err(invalid("quadrature oracle needs a potential and beta"));
    };
    if !model.has_constant_tensor() {
        return Err(invalid("quadrature oracle needs a constant diffusion coefficient"));
    }
    if !(lo < x_start.min(x_target) && x_start.max(x_target) < hi) {
        return Err(invalid("start and target must lie inside the truncation interval"));
    }
    for edge in [lo, hi] {
        let k = pot.hessian(&point(edge, 0.0))[(0, 0)];
        if !(k > 0.0) {
            return Err(invalid(format!("potential is not confining at the interval edge {edge} (V'' = {k})")));
        }
    }
    let a = model.tensor(&point(0.0, 0.0))[(0, 0)];
    let v = |x: f64| beta * pot.value(&point(x, 0.0));
    // Mirror so that the passage runs left to right with reflection at `lo`.
    let (s, t, reflect) = if x_start < x_target { (x_start, x_target, lo) } else { (x_target, x_start, hi) };
    let outer = |y: f64| -> f64 {
        let vy = v(y);
        let (l, r) = if x_start < x_target { (reflect, y) } else { (y, reflect) };
        integrate(|z| (vy - v(z)).exp(), l, r, 0.0, 1e-11).unwrap_or(f64::NAN) / a
    };
    integrate(outer, s, t, 0.0, 1e-10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::committor::analytic_q;
    use crate::estimate::{KernelOptions, Launch, MilestoneKernel};
    use crate::model::Benchmark;
    use proptest::prelude::*;

    fn birth_death() -> DMatrix<f64> {
        analytic_q(&[1.0, 0.5, 0.0]).unwrap()
    }

    #[test]
    fn one_step_chain() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let s = solve_optimal(&p, &DVector::from_vec(vec![2.5, 1.0]), 1).unwrap();
        assert_eq!(s.values, vec![2.5, 0.0]);
    }

    #[test]
    fn three_state_hand_solution() {
        let s = solve_optimal(&birth_death(), &DVector::from_element(3, 1.0), 2).unwrap();
        assert!((s.values[0] - 4.0).abs() < 1e-12);
        assert!((s.values[1] - 3.0).abs() < 1e-12);
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn unreachable_target_is_reducible() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let t = DVector::from_element(3, 1.0);
        assert!(matches!(solve_optimal(&p, &t, 2), Err(Error::Reducible(v)) if v == vec![0, 1]));
    }

    #[test]
    fn nonpositive_times_rejected() {
        let t = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        assert!(solve_optimal(&birth_death(), &t, 2).is_err());
    }

    #[test]
    fn monotone_in_residence_times() {
        let p = birth_death();
        let base = solve_optimal(&p, &DVector::from_element(3, 1.0), 2).unwrap();
        for i in 0..2 {
            let mut t = DVector::from_element(3, 1.0);
            t[i] += 0.1;
            let s = solve_optimal(&p, &t, 2).unwrap();
            assert!(s.values[0] > base.values[0] && s.values[1] > base.values[1]);
        }
    }

    fn random_chain(n: usize, raw: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        // Nearest-neighbour chain with interior forward probabilities from `raw`.
        let mut p = DMatrix::zeros(n, n);
        p[(0, 1)] = 1.0;
        p[(n - 1, n - 2)] = 1.0;
        for i in 1..n - 1 {
            let f = 0.05 + 0.9 * raw[i];
            p[(i, i + 1)] = f;
            p[(i, i - 1)] = 1.0 - f;
        }
        let t = DVector::from_fn(n, |i, _| 0.1 + raw[(i + 3) % raw.len()]);
        (p, t)
    }

    proptest! {
        #[test]
        fn direct_solution_is_minimal_fixed_point(n in 3usize..8, raw in proptest::collection::vec(0.0f64..1.0, 8), j in 0usize..8) {
            let j = j % n;
            let (p, t) = random_chain(n, &raw);
            let s = solve_optimal(&p, &t, j).unwrap();
            let v = value_iteration(&p, &t, j, 1e-13, 5_000_000).unwrap();
            for i in 0..n {
                prop_assert!((s.values[i] - v[i]).abs() < 1e-9 * s.values[i].max(1.0));
            }
        }

        #[test]
        fn relabeling_permutes_solution(n in 3usize..7, raw in proptest::collection::vec(0.0f64..1.0, 8), seed in 0u64..1000) {
            let (p, t) = random_chain(n, &raw);
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = RngStream::new(seed, 0);
            for k in (1..n).rev() {
                perm.swap(k, rng.below(k as u64 + 1) as usize);
            }
            let pp = DMatrix::from_fn(n, n, |r, c| p[(perm[r], perm[c])]);
            let tp = DVector::from_fn(n, |r, _| t[perm[r]]);
            let target = n - 1;
            let s = solve_optimal(&p, &t, target).unwrap();
            let jp = perm.iter().position(|&k| k == target).unwrap();
            let sp = solve_optimal(&pp, &tp, jp).unwrap();
            for r in 0..n {
                prop_assert!((sp.values[r] - s.values[perm[r]]).abs() < 1e-9 * s.values[perm[r]].max(1.0));
            }
        }
    }

    fn one_bin_kernel(p: &DMatrix<f64>, tau: &[f64]) -> KernelEstimate {
        let n = p.nrows();
        let milestones = (0..n)
            .map(|i| MilestoneKernel {
                index: i,
                edges: vec![0.0, 0.0],
                weights: vec![1.0],
                centers: vec![point(0.0, 0.0)],
                tau: vec![tau[i]],
                counts: vec![1],
                transitions: vec![(0..n).filter(|&k| p[(i, k)] > 0.0).map(|k| (k, 0, p[(i, k)])).collect()],
                launches: vec![vec![Launch { elapsed: tau[i], target: (i + 1) % n, target_bin: 0 }]],
                censored: 0,
            })
            .collect();
        KernelEstimate { milestones }
    }

    #[test]
    fn exact_reduces_to_optimal_with_one_bin() {
        let p = analytic_q(&[1.0, 0.7, 0.45, 0.2, 0.0]).unwrap();
        let tau = [0.3, 1.1, 0.9, 1.4, 0.2];
        let opt = solve_optimal(&p, &DVector::from_row_slice(&tau), 4).unwrap();
        for solver in [ExactSolver::Direct, ExactSolver::FixedPoint] {
            let (field, ex) = solve_exact(&one_bin_kernel(&p, &tau), 4, solver).unwrap();
            assert!(field.values[4].iter().all(|v| *v == 0.0));
            for i in 0..5 {
                assert!((ex.values[i] - opt.values[i]).abs() < 1e-9, "{i}: {} vs {}", ex.values[i], opt.values[i]);
            }
        }
    }

    #[test]
    fn exact_with_two_bins_matches_hand_solution() {
        // Milestone 0 has two bins; both go to milestone 1 (target).
        let mut k = one_bin_kernel(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), &[1.0, 1.0]);
        let m0 = &mut k.milestones[0];
        m0.weights = vec![0.25, 0.75];
        m0.tau = vec![2.0, 4.0];
        m0.counts = vec![1, 1];
        m0.transitions = vec![vec![(1, 0, 1.0)], vec![(1, 0, 1.0)]];
        m0.launches = vec![vec![], vec![]];
        let (field, sol) = solve_exact(&k, 1, ExactSolver::Direct).unwrap();
        assert_eq!(field.values[0], vec![2.0, 4.0]);
        assert!((sol.values[0] - 3.5).abs() < 1e-12);
        let _ = KernelOptions::default();
    }

    #[test]
    fn delta_method_matches_replicate_spread() {
        // Resample p rows and t from their sampling laws and compare the
        // spread of T with the propagated standard error.
        let q = analytic_q(&[1.0, 0.6, 0.3, 0.0]).unwrap();
        let t = DVector::from_vec(vec![0.5, 1.0, 1.2, 0.4]);
        let t_se = DVector::from_vec(vec![0.01, 0.02, 0.03, 0.01]);
        let dep = [400u64, 400, 400, 400];
        let base = solve_optimal(&q, &t, 3).unwrap();
        let se = optimal_stderr(&q, &t_se, &dep, &base).unwrap();
        let mut rng = RngStream::new(9, 0);
        let draws: Vec<f64> = (0..2000)
            .map(|_| {
                let mut p = q.clone();
                for i in 1..3 {
                    let k = (0..dep[i]).filter(|_| rng.uniform() < q[(i, i + 1)]).count() as f64;
                    p[(i, i + 1)] = k / dep[i] as f64;
                    p[(i, i - 1)] = 1.0 - p[(i, i + 1)];
                }
                let tt = DVector::from_fn(4, |i, _| t[i] + t_se[i] * rng.normal());
                solve_optimal(&p, &tt, 3).unwrap().values[0]
            })
            .collect();
        let (_, v) = mean_var(&draws);
        let ratio = v.sqrt() / se[0];
        assert!((0.85..1.15).contains(&ratio), "spread ratio {ratio}");
    }

    #[test]
    fn quadrature_oracle_for_ou() {
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        let t = mfpt_quadrature_1d(&m, -1.0, 1.0).unwrap();
        // Regression constant, cross-checked with mpmath at 30 digits.
        assert!((t - OU_MINUS1_TO_1).abs() < 1e-7 * t, "{t}");
        let wide = mfpt_quadrature_1d_on(&m, -1.0, 1.0, -12.0, 12.0).unwrap();
        assert!((wide - t).abs() < 1e-6 * t);
        let back = mfpt_quadrature_1d(&m, 1.0, -1.0).unwrap();
        assert!((back - t).abs() < 1e-8 * t);
    }

    const OU_MINUS1_TO_1: f64 = 2.995_314_656_420_847;

    #[test]
    fn quadrature_oracle_matches_free_diffusion_formula() {
        // Harmonic with tiny stiffness is nearly free: T ~ ((b+L)^2 - (a+L)^2) / (2a).
        let pot = std::sync::Arc::new(crate::model::Harmonic { stiffness: 1e-12 });
        let m = crate::model::make_overdamped_langevin(pot, 1.0).unwrap();
        let t = mfpt_quadrature_1d_on(&m, 0.0, 1.0, -1.0, 3.0).unwrap();
        assert!((t - 1.5).abs() < 1e-8, "{t}");
    }

    #[test]
    fn quadrature_rejects_unconfined_and_two_dimensional() {
        let flat = crate::model::make_overdamped_langevin(std::sync::Arc::new(crate::model::Flat { dim: 1 }), 1.0).unwrap();
        assert!(mfpt_quadrature_1d_on(&flat, 0.0, 1.0, -2.0, 2.0).is_err());
        let m2 = Benchmark::DoubleWell2d { beta: 1.0 }.build().unwrap();
        assert!(mfpt_quadrature_1d(&m2, 0.0, 1.0).is_err());
    }

    #[test]
    fn empirical_ou_matches_quadrature() {
        use crate::milestones::AffineLevel;
        let m = Benchmark::Ou1d { beta: 1.0 }.build().unwrap();
        // f = -x so that levels decrease from x = -1 to x = 1.
        let f = std::sync::Arc::new(AffineLevel::new(point(-1.0, 0.0), 0.0));
        let pair = MilestoneSet::new(f, vec![1.0, -1.0]).unwrap();
        let cfg = StepConfig::new(1e-3).with_crossing(crate::integrate::CrossingRule::BrownianBridge);
        let e = mfpt_empirical(&m, &pair, 4000, &cfg, &RngStream::new(5, 0), 4, &SamplingOptions::default()).unwrap();
        let oracle = mfpt_quadrature_1d(&m, -1.0, 1.0).unwrap();
        assert!((e.forward - oracle).abs() < 3.0 * e.forward_se, "{} +- {} vs {oracle}", e.forward, e.forward_se);
        // Symmetric potential.
        assert!((e.forward - e.backward).abs() < 3.0 * (e.forward_se.powi(2) + e.backward_se.powi(2)).sqrt());
    }
}
