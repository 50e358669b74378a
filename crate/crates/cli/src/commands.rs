use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use milestoning::committor::{
    default_density, milestone_density, solve_backward_committor, surface_integral_z, CommittorField,
};
use milestoning::contour::{level_set, LevelSetMesh};
use milestoning::estimate::{
    estimate_cells, estimate_kernel, estimate_long, hit_histogram, KernelEstimate, KernelOptions, SamplingOptions,
    StartMode, TransitionStats,
};
use milestoning::grid::{Grid, NodalField};
use milestoning::integrate::StepConfig;
use milestoning::io::{load_curve, save_field, save_table};
use milestoning::mfpt::{mfpt_empirical, mfpt_quadrature_1d, solve_exact, solve_optimal_from_stats, ExactSolver};
use milestoning::milestones::{AffineLevel, MilestoneSet};
use milestoning::model::{DensityField, DiffusionModel};
use milestoning::rng::RngStream;
use milestoning::stats::z_score;
use milestoning::surfaces::SmoothedCommittor;
use milestoning::validation;
use milestoning::point;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, ConfigError, ExperimentConfig, MethodName, MilestoneSpec, SampleMode};
use crate::Common;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Committor,
    Sample,
    Mfpt,
    Validate,
    Exact,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Committor => "committor",
            Kind::Sample => "sample",
            Kind::Mfpt => "mfpt",
            Kind::Validate => "validate",
            Kind::Exact => "exact",
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(String),
    Validation(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Validation(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Validation(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<milestoning::Error> for Failure {
    fn from(e: milestoning::Error) -> Self {
        Failure::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("i/o: {e}"))
    }
}

type Outcome<T> = Result<T, Failure>;

/// Resolved settings shared by the subcommands.
struct Run {
    cfg: ExperimentConfig,
    hash: String,
    seed: u64,
    out: PathBuf,
    force: bool,
    model: DiffusionModel,
    grid: Grid,
}

/// Header embedded in every report.
#[derive(Serialize)]
struct Header<'a> {
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    command: &'a str,
}

pub fn run(kind: Kind, common: &Common) -> Outcome<()> {
    let started = Instant::now();
    let (mut cfg, _) = config::load(&common.config)?;
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let seed = common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| Failure::Config("no seed: set \"seed\" in the config or pass --seed".into()))?;
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    if rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global().is_err() {
        warn!("worker pool already initialized");
    }
    let model = cfg.model.build()?;
    let grid = build_grid(&cfg, &model)?;
    let hash = config_hash(&cfg, seed);
    let run = Run { cfg, hash, seed, out, force: common.force, model, grid };
    match kind {
        Kind::Committor => cmd_committor(&run)?,
        Kind::Sample => cmd_sample(&run)?,
        Kind::Mfpt => cmd_mfpt(&run)?,
        Kind::Validate => cmd_validate(&run)?,
        Kind::Exact => cmd_exact(&run)?,
    }
    write_metadata(&run, kind, started)?;
    Ok(())
}

/// SHA-256 of the effective configuration, excluding the output directory
/// and worker count, which do not affect results.
fn config_hash(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut c = cfg.clone();
    c.out = None;
    c.workers = 1;
    c.seed = Some(seed);
    let text = serde_json::to_string(&c).expect("config serializes");
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

fn build_grid(cfg: &ExperimentConfig, model: &DiffusionModel) -> Outcome<Grid> {
    Ok(match cfg.grid.nodes {
        None => model.reference_grid()?,
        Some(n) => Grid::new(model.dim(), model.bounds(), n)?,
    })
}

fn header<'a>(run: &'a Run, command: &'a str) -> Header<'a> {
    Header { version: VERSION, config_hash: &run.hash, seed: run.seed, command }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numerical(format!("json: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Wall-clock facts kept out of the reports so that reports are
/// reproducible byte for byte.
fn write_metadata(run: &Run, kind: Kind, started: Instant) -> Outcome<()> {
    #[derive(Serialize)]
    struct Metadata<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        workers: usize,
        finished_unix: u64,
        elapsed_seconds: f64,
    }
    let finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &run.out.join(format!("{}_metadata.json", kind.name())),
        &Metadata {
            header: header(run, kind.name()),
            workers: run.cfg.workers,
            finished_unix,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    )
}

struct Committor {
    rho: DensityField,
    q: CommittorField,
}

fn committor(run: &Run) -> Outcome<Committor> {
    let (a, b) = run.cfg.regions()?;
    let rho = default_density(&run.model, &run.grid)?;
    let q = solve_backward_committor(&run.model, &rho, a, b, &run.grid, run.cfg.grid.advection)?;
    Ok(Committor { rho, q })
}

/// The milestones, the grid field whose level sets they are, and the
/// level-set meshes.
struct Milestones {
    set: MilestoneSet,
    meshes: Vec<LevelSetMesh>,
}

fn milestones(run: &Run) -> Outcome<Milestones> {
    let spec = run.cfg.milestone_spec()?;
    let levels = spec.levels().to_vec();
    let (set, field): (MilestoneSet, NodalField) = match spec {
        MilestoneSpec::Linear { normal, .. } => {
            let f = AffineLevel::new(point(normal[0], normal[1]), 0.0);
            let field = NodalField::from_fn(run.grid.clone(), |p| f.normal.dot(p))?;
            (MilestoneSet::new(Arc::new(f), levels.clone())?, field)
        }
        MilestoneSpec::Committor { .. } => {
            let c = committor(run)?;
            (MilestoneSet::new(Arc::new(c.q.field.clone()), levels.clone())?, c.q.field)
        }
        MilestoneSpec::Curve { path, rescale, delta, .. } => {
            let curve = load_curve(path, run.model.dim())?;
            let sc = SmoothedCommittor::new(curve, rescale.clone(), *delta, run.model.dim())?;
            let field = sc.tabulate(run.grid.clone())?;
            (MilestoneSet::new(Arc::new(field.clone()), levels.clone())?, field)
        }
    };
    let meshes = levels.iter().map(|&z| level_set(&field, z, true)).collect::<Result<_, _>>()?;
    Ok(Milestones { set, meshes })
}

fn step_config(run: &Run) -> StepConfig {
    StepConfig::new(run.cfg.sampling.dt).with_crossing(run.cfg.sampling.crossing)
}

fn sampling_options(run: &Run) -> SamplingOptions {
    SamplingOptions { reservoir_cap: run.cfg.sampling.reservoir_cap, ..SamplingOptions::default() }
}

fn cmd_committor(run: &Run) -> Outcome<()> {
    let c = committor(run)?;
    let levels = run.cfg.milestone_spec()?.levels().to_vec();
    save_field(&run.out.join("q_minus.bin"), &c.q.field)?;
    save_field(&run.out.join("density.bin"), &NodalField::new(run.grid.clone(), c.rho.values().to_vec())?)?;
    let mut z_rows = Vec::new();
    for (i, &z) in levels.iter().enumerate() {
        let mesh = milestoning::committor::extract_level_set(&c.q, z)?;
        let zi = surface_integral_z(&run.model, &c.rho, &c.q, &mesh)?;
        let dens = milestone_density(&run.model, &c.rho, &c.q, &mesh)?;
        let rows: Vec<Vec<f64>> = mesh
            .points
            .iter()
            .zip(&mesh.arc)
            .zip(&dens.values)
            .map(|((p, s), v)| vec![*s, p.x, p.y, *v])
            .collect();
        save_table(&run.out.join(format!("rho_{i}.csv")), &["s", "x", "y", "density"], &rows)?;
        z_rows.push(vec![i as f64, z, zi]);
    }
    save_table(&run.out.join("Z.csv"), &["index", "level", "Z"], &z_rows)?;
    let zs: Vec<f64> = z_rows.iter().map(|r| r[2]).collect();
    let mean = zs.iter().sum::<f64>() / zs.len() as f64;
    let spread = zs.iter().map(|z| (z - mean).abs()).fold(0.0, f64::max) / mean;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        levels: &'a [f64],
        z: Vec<f64>,
        relative_spread: f64,
    }
    write_json(
        &run.out.join("committor_report.json"),
        &Report { header: header(run, "committor"), levels: &levels, z: zs, relative_spread: spread },
    )
}

fn sample_stats(run: &Run, ms: &Milestones) -> Outcome<TransitionStats> {
    let s = &run.cfg.sampling;
    let cfg = step_config(run);
    let opts = sampling_options(run);
    let stats = match s.mode {
        SampleMode::Long => {
            let t = s
                .total_time
                .ok_or_else(|| Failure::Config("sampling mode \"long\" needs sampling.total_time".into()))?;
            estimate_long(&run.model, &ms.set, t, &cfg, &mut RngStream::new(run.seed, 0), &opts)?
        }
        SampleMode::Cells => {
            let k = s.per_cell_transitions.ok_or_else(|| {
                Failure::Config("sampling mode \"cells\" needs sampling.per_cell_transitions".into())
            })?;
            estimate_cells(&run.model, &ms.set, k, &cfg, &RngStream::new(run.seed, 0), &opts)?
        }
    };
    let thin: Vec<usize> = (0..stats.len()).filter(|&i| stats.departures(i) < s.min_departures).collect();
    if !thin.is_empty() {
        let msg = format!(
            "under-sampled milestones {thin:?}: fewer than {} departures (use --force to continue)",
            s.min_departures
        );
        if !run.force {
            return Err(Failure::Numerical(msg));
        }
        warn!("{msg}");
    }
    Ok(stats)
}

fn kernel(run: &Run, ms: &Milestones, stats: Option<&TransitionStats>) -> Outcome<KernelEstimate> {
    let opts: KernelOptions = run.cfg.kernel.unwrap_or_default();
    let hits: Option<Vec<Vec<_>>> = match (opts.start, stats) {
        (StartMode::Empirical, Some(s)) => Some(s.hits.iter().map(|r| r.items.clone()).collect()),
        (StartMode::Empirical, None) => {
            return Err(Failure::Numerical("kernel start \"empirical\" needs sampled hits".into()));
        }
        _ => None,
    };
    Ok(estimate_kernel(&run.model, &ms.set, &ms.meshes, hits.as_deref(), &opts, &step_config(run), &RngStream::new(run.seed, 1))?)
}

fn write_kernel(run: &Run, k: &KernelEstimate) -> Outcome<()> {
    for m in &k.milestones {
        let rows: Vec<Vec<f64>> = (0..m.weights.len())
            .map(|b| {
                let (lo, hi) = (m.edges[b], m.edges[(b + 1).min(m.edges.len() - 1)]);
                vec![b as f64, lo, hi, m.weights[b], m.tau[b], m.counts[b] as f64, m.centers[b].x, m.centers[b].y]
            })
            .collect();
        save_table(
            &run.out.join(format!("kernel_{}.csv", m.index)),
            &["bin", "s_lo", "s_hi", "weight", "tau", "launches", "center_x", "center_y"],
            &rows,
        )?;
    }
    Ok(())
}

fn cmd_sample(run: &Run) -> Outcome<()> {
    let ms = milestones(run)?;
    let stats = sample_stats(run, &ms)?;
    for (i, r) in stats.hits.iter().enumerate() {
        let rows: Vec<Vec<f64>> = r.items.iter().map(|p| vec![p.x, p.y]).collect();
        save_table(&run.out.join(format!("hits_{i}.csv")), &["x", "y"], &rows)?;
        if run.model.dim() == 2 {
            match hit_histogram(&stats, i, &ms.meshes[i], run.cfg.sampling.histogram_bins) {
                Ok(h) => {
                    let rows: Vec<Vec<f64>> =
                        h.density.iter().enumerate().map(|(b, d)| vec![h.edges[b], h.edges[b + 1], *d]).collect();
                    save_table(&run.out.join(format!("histogram_{i}.csv")), &["s_lo", "s_hi", "density"], &rows)?;
                }
                Err(e) => warn!("no histogram for milestone {i}: {e}"),
            }
        }
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        mode: SampleMode,
        levels: &'a [f64],
        stats: milestoning::estimate::StatsReport,
    }
    write_json(
        &run.out.join("stats.json"),
        &Report { header: header(run, "sample"), mode: run.cfg.sampling.mode, levels: ms.set.levels(), stats: stats.report() },
    )?;
    if run.cfg.kernel.is_some() {
        let k = kernel(run, &ms, Some(&stats))?;
        write_kernel(run, &k)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct Estimate {
    value: f64,
    stderr: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Comparison {
    a: MethodName,
    b: MethodName,
    z: Option<f64>,
}

fn cmd_mfpt(run: &Run) -> Outcome<()> {
    let ms = milestones(run)?;
    let (i, j) = run.cfg.target_pair()?;
    let mut methods = run.cfg.methods.clone();
    if methods.is_empty() {
        methods.push(MethodName::Optimal);
    }
    methods.sort();
    methods.dedup();
    // Check every method's inputs before any sampling.
    for m in &methods {
        match m {
            MethodName::Exact if run.cfg.kernel.is_none() => {
                return Err(Failure::Numerical("method \"exact\" needs a \"kernel\" section".into()));
            }
            MethodName::Empirical if run.cfg.empirical.is_none() => {
                return Err(Failure::Numerical("method \"empirical\" needs an \"empirical\" section".into()));
            }
            MethodName::Oracle if run.model.dim() != 1 || !run.model.is_reversible() => {
                return Err(Failure::Numerical("method \"oracle\" needs a reversible 1D model".into()));
            }
            _ => {}
        }
    }
    let needs_stats = methods.iter().any(|m| {
        *m == MethodName::Optimal
            || (*m == MethodName::Exact && run.cfg.kernel.is_some_and(|k| k.start == StartMode::Empirical))
    });
    let stats = if needs_stats { Some(sample_stats(run, &ms)?) } else { None };
    let mut results: BTreeMap<MethodName, Estimate> = BTreeMap::new();
    for m in &methods {
        let est = match m {
            MethodName::Optimal => {
                let sol = solve_optimal_from_stats(stats.as_ref().expect("sampled above"), j)?;
                Estimate { value: sol.value(i), stderr: sol.stderr(i) }
            }
            MethodName::Exact => {
                let k = kernel(run, &ms, stats.as_ref())?;
                let (_, sol) = solve_exact(&k, j, ExactSolver::Direct)?;
                Estimate { value: sol.value(i), stderr: sol.stderr(i) }
            }
            MethodName::Empirical => {
                let spec = run.cfg.empirical.expect("checked above");
                let pair = ms.set.restrict(&[i.min(j), i.max(j)])?;
                let e = mfpt_empirical(
                    &run.model,
                    &pair,
                    spec.transitions,
                    &step_config(run),
                    &RngStream::new(run.seed, 2),
                    spec.replicas,
                    &sampling_options(run),
                )?;
                if i < j {
                    Estimate { value: e.forward, stderr: Some(e.forward_se) }
                } else {
                    Estimate { value: e.backward, stderr: Some(e.backward_se) }
                }
            }
            MethodName::Oracle => {
                let x = |k: usize| ms.meshes[k].points[0].x;
                Estimate { value: mfpt_quadrature_1d(&run.model, x(i), x(j))?, stderr: Some(0.0) }
            }
        };
        results.insert(*m, est);
    }
    let mut comparisons = Vec::new();
    let keys: Vec<MethodName> = results.keys().copied().collect();
    for (k, a) in keys.iter().enumerate() {
        for b in &keys[k + 1..] {
            let (ea, eb) = (&results[a], &results[b]);
            let z = match (ea.stderr, eb.stderr) {
                (Some(sa), Some(sb)) if sa.is_finite() && sb.is_finite() && sa * sa + sb * sb > 0.0 => {
                    Some(z_score(ea.value, sa, eb.value, sb))
                }
                _ => None,
            };
            comparisons.push(Comparison { a: *a, b: *b, z });
        }
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        levels: &'a [f64],
        from: usize,
        to: usize,
        methods: BTreeMap<MethodName, Estimate>,
        z_scores: Vec<Comparison>,
    }
    for (m, e) in &results {
        println!("{m:?}: T = {} (se {})", e.value, e.stderr.map_or("n/a".into(), |s| s.to_string()));
    }
    write_json(
        &run.out.join("mfpt_report.json"),
        &Report {
            header: header(run, "mfpt"),
            levels: ms.set.levels(),
            from: i,
            to: j,
            methods: results,
            z_scores: comparisons,
        },
    )
}

fn cmd_exact(run: &Run) -> Outcome<()> {
    let ms = milestones(run)?;
    let (i, j) = run.cfg.target_pair()?;
    let opts = run.cfg.kernel.unwrap_or_default();
    let stats = if opts.start == StartMode::Empirical { Some(sample_stats(run, &ms)?) } else { None };
    let k = kernel(run, &ms, stats.as_ref())?;
    write_kernel(run, &k)?;
    let (field, sol) = solve_exact(&k, j, ExactSolver::Direct)?;
    let mut rows = Vec::new();
    for (m, vals) in field.values.iter().enumerate() {
        for (b, v) in vals.iter().enumerate() {
            rows.push(vec![m as f64, b as f64, *v]);
        }
    }
    save_table(&run.out.join("exact_field.csv"), &["milestone", "bin", "T"], &rows)?;
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        levels: &'a [f64],
        from: usize,
        to: usize,
        value: f64,
        stderr: Option<f64>,
        values: &'a [f64],
        residual: f64,
        censored: u64,
    }
    println!("exact: T = {} (se {:?})", sol.value(i), sol.stderr(i));
    write_json(
        &run.out.join("exact_report.json"),
        &Report {
            header: header(run, "exact"),
            levels: ms.set.levels(),
            from: i,
            to: j,
            value: sol.value(i),
            stderr: sol.stderr(i),
            values: &sol.values,
            residual: sol.residual,
            censored: k.censored(),
        },
    )
}

fn cmd_validate(run: &Run) -> Outcome<()> {
    let spec = &run.cfg.validation;
    let known = validation::ALL;
    if let Some(bad) = spec.criteria.iter().find(|c| !known.iter().any(|k| k.eq_ignore_ascii_case(c))) {
        return Err(Failure::Config(format!("unknown criterion {bad:?}; expected one of {known:?}")));
    }
    let which: Vec<&str> = spec.criteria.iter().map(String::as_str).collect();
    let report = validation::run(&spec.budget, run.seed, &which);
    for c in &report.criteria {
        println!("{}", c.line());
    }
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        passed: bool,
        report: &'a validation::ValidationReport,
    }
    write_json(
        &run.out.join("validation_report.json"),
        &Report { header: header(run, "validate"), passed: report.all_passed(), report: &report },
    )?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("failed criteria: {}", report.failures().join(", "))))
    }
}
