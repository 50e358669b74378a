//! Experiment configuration, read from JSON.
//!
//! ```json
//! {
//!   "model": { "name": "double_well_2d", "beta": 1.0 },
//!   "grid": { "nodes": [201, 201] },
//!   "a": { "kind": "ball", "center": [-1, 0], "radius": 0.2 },
//!   "b": { "kind": "ball", "center": [1, 0], "radius": 0.2 },
//!   "milestones": { "kind": "committor", "levels": [0.8, 0.65, 0.5, 0.35, 0.2] },
//!   "sampling": { "mode": "cells", "per_cell_transitions": 10000, "dt": 0.001 },
//!   "seed": 7,
//!   "target": [0, 4],
//!   "out": "out"
//! }
//! ```

use std::path::{Path, PathBuf};

use milestoning::committor::{Advection, Region};
use milestoning::estimate::KernelOptions;
use milestoning::integrate::CrossingRule;
use milestoning::model::Benchmark;
use milestoning::surfaces::Rescale;
use milestoning::validation::Budget;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Benchmark,
    #[serde(default)]
    pub grid: GridSpec,
    pub a: Option<Region>,
    pub b: Option<Region>,
    pub milestones: Option<MilestoneSpec>,
    #[serde(default)]
    pub sampling: SamplingSpec,
    pub kernel: Option<KernelOptions>,
    pub empirical: Option<EmpiricalSpec>,
    #[serde(default)]
    pub methods: Vec<MethodName>,
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub workers: usize,
    pub target: Option<[usize; 2]>,
    #[serde(default)]
    pub validation: ValidationSpec,
    pub out: Option<PathBuf>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Nodes per axis; defaults to the model's reference grid.
    pub nodes: Option<[usize; 2]>,
    #[serde(default)]
    pub advection: Advection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MilestoneSpec {
    /// Level sets of `normal . x`.
    Linear { normal: [f64; 2], levels: Vec<f64> },
    /// Isocommittor surfaces of the backward committor between `a` and `b`.
    Committor { levels: Vec<f64> },
    /// Level sets of a smoothed committor built from a curve file.
    Curve {
        path: PathBuf,
        #[serde(default)]
        rescale: Rescale,
        delta: f64,
        levels: Vec<f64>,
    },
}

impl MilestoneSpec {
    pub fn levels(&self) -> &[f64] {
        match self {
            MilestoneSpec::Linear { levels, .. }
            | MilestoneSpec::Committor { levels }
            | MilestoneSpec::Curve { levels, .. } => levels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Long,
    #[default]
    Cells,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default)]
    pub mode: SampleMode,
    pub total_time: Option<f64>,
    pub per_cell_transitions: Option<u64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_crossing")]
    pub crossing: CrossingRule,
    /// Smallest acceptable number of departures per milestone.
    #[serde(default = "default_floor")]
    pub min_departures: u64,
    #[serde(default = "default_cap")]
    pub reservoir_cap: usize,
    /// Bins of the hit histograms.
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_crossing() -> CrossingRule {
    CrossingRule::BrownianBridge
}
fn default_floor() -> u64 {
    milestoning::estimate::MIN_DEPARTURES
}
fn default_cap() -> usize {
    100_000
}
fn default_bins() -> usize {
    40
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            mode: SampleMode::Cells,
            total_time: None,
            per_cell_transitions: None,
            dt: default_dt(),
            crossing: default_crossing(),
            min_departures: default_floor(),
            reservoir_cap: default_cap(),
            histogram_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalSpec {
    pub transitions: u64,
    #[serde(default = "one")]
    pub replicas: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Optimal,
    Exact,
    Empirical,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    #[serde(default)]
    pub budget: Budget,
    /// Criteria to run; all when empty.
    #[serde(default)]
    pub criteria: Vec<String>,
}

/// A configuration problem, reported with exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reads and checks a configuration. Relative paths inside it are taken
/// relative to the configuration file.
pub fn load(path: &Path) -> Result<(ExperimentConfig, String), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(MilestoneSpec::Curve { path: p, .. }) = &mut cfg.milestones {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok((cfg, text))
}

impl ExperimentConfig {
    /// Checks that do not depend on the subcommand.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.workers == 0 {
            return err("workers must be at least 1".into());
        }
        if !(self.sampling.dt > 0.0) {
            return err(format!("sampling.dt must be positive, got {}", self.sampling.dt));
        }
        if let Some(m) = &self.milestones {
            let l = m.levels();
            if l.len() < 2 {
                return err("milestones need at least two levels".into());
            }
            if l.windows(2).any(|w| !(w[0] > w[1])) {
                return err(format!("milestone levels must be strictly decreasing: {l:?}"));
            }
            if let MilestoneSpec::Curve { path, .. } = m {
                if !path.exists() {
                    return err(format!("curve file {} does not exist", path.display()));
                }
            }
        }
        if let (Some([i, j]), Some(m)) = (self.target, &self.milestones) {
            let n = m.levels().len();
            if i >= n || j >= n || i == j {
                return err(format!("target ({i}, {j}) is not a pair of distinct milestones among {n}"));
            }
        }
        Ok(())
    }

    pub fn milestone_spec(&self) -> Result<&MilestoneSpec, ConfigError> {
        self.milestones.as_ref().ok_or_else(|| ConfigError("config has no \"milestones\" section".into()))
    }

    pub fn regions(&self) -> Result<(Region, Region), ConfigError> {
        match (self.a, self.b) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(ConfigError("committor milestones need both \"a\" and \"b\" regions".into())),
        }
    }

    /// Target pair, defaulting to the first and last milestones.
    pub fn target_pair(&self) -> Result<(usize, usize), ConfigError> {
        let n = self.milestone_spec()?.levels().len();
        Ok(self.target.map_or((0, n - 1), |[i, j]| (i, j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_config_parses() {
        let text = r#"{
          "model": { "name": "double_well_2d", "beta": 1.0 },
          "grid": { "nodes": [101, 101] },
          "a": { "kind": "ball", "center": [-1, 0], "radius": 0.2 },
          "b": { "kind": "ball", "center": [1, 0], "radius": 0.2 },
          "milestones": { "kind": "committor", "levels": [0.8, 0.5, 0.2] },
          "sampling": { "mode": "cells", "per_cell_transitions": 100 },
          "methods": ["optimal", "oracle"],
          "seed": 3
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.sampling.crossing, CrossingRule::BrownianBridge);
        assert_eq!(cfg.target_pair().unwrap(), (0, 2));
        assert_eq!(cfg.workers, 1);
    }

    #[test]
    fn unknown_fields_and_bad_levels_rejected() {
        let bad = r#"{ "model": { "name": "ou_1d" }, "seeed": 1 }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{ "model": { "name": "ou_1d" }, "milestones": { "kind": "linear", "normal": [1, 0], "levels": [0.0, 0.5] } }"#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
