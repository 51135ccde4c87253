//! Experiment configuration (TOML or JSON).
//!
//! Seed splitting: replica `r` at scale `N` of a command with stream tag `c`
//! (see [`crate::rng::tags`]) uses `rng::stream(master, [c, N, r])`, so any
//! single replica can be rerun from the master seed alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::configuration::{Configuration, InitialSpec};
use crate::error::{Error, Result};
use crate::lattice::{KernelDef, KernelSpec, ScalingParams, Site};
use crate::observables::TestFn;
use crate::perturbation::{table_from_json, PerturbationTable};
use crate::simulator::{RateModel, DEFAULT_BUDGET};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub run: RunBlock,
    #[serde(default)]
    pub analysis: AnalysisBlock,
    #[serde(default)]
    pub output: OutputBlock,
    /// Directory relative paths are resolved against (the config file's directory).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    /// Thinning for kernels beyond nearest neighbour when the table allows it, dense otherwise.
    #[default]
    Auto,
    Dense,
    Thinning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kernel: KernelDef,
    #[serde(default)]
    pub table: TableDef,
    pub n_ladder: Vec<u64>,
    pub initial: InitialSpec,
    #[serde(default)]
    pub engine: EngineChoice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "A")]
    pub a: Vec<Vec<i32>>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TableDef {
    #[default]
    Zero,
    /// Lotka-Volterra perturbation with parameters `theta0^N`, `theta1^N`.
    Lv { theta0: f64, theta1: f64 },
    Entries {
        entries: Vec<TableRow>,
        #[serde(default)]
        k_delta: Option<f64>,
    },
    /// A table file, resolved relative to the config file.
    File { path: PathBuf },
}

fn default_horizon() -> f64 {
    1.0
}
fn default_replicas() -> u64 {
    100
}
fn default_budget() -> u64 {
    DEFAULT_BUDGET
}
fn default_grid_points() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_replicas")]
    pub replicas: u64,
    /// Per-replica event budget.
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Master seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub log_events: bool,
    /// Number of report times after 0 on `[0, horizon]`.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            horizon: default_horizon(),
            replicas: default_replicas(),
            budget: default_budget(),
            seed: 0,
            log_events: false,
            grid_points: default_grid_points(),
        }
    }
}

/// Limit parameters to verify against, when no constants report is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub theta: f64,
    #[serde(default)]
    pub theta_se: f64,
    pub b: f64,
    #[serde(default)]
    pub b_se: f64,
    pub sigma2: f64,
}

fn default_test_functions() -> Vec<TestFn> {
    vec![TestFn::Constant { c: 1.0 }]
}
fn default_eps_exponent() -> f64 {
    0.25
}
fn default_constants_horizon() -> f64 {
    50.0
}
fn default_constants_reps() -> u64 {
    10_000
}
fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisBlock {
    #[serde(default = "default_test_functions")]
    pub test_functions: Vec<TestFn>,
    /// `eps_N* = N^{-eps_exponent}`.
    #[serde(default = "default_eps_exponent")]
    pub eps_exponent: f64,
    /// Base horizon `T` of the coalescing ladder `T, 2T, 4T`.
    #[serde(default = "default_constants_horizon")]
    pub constants_horizon: f64,
    #[serde(default = "default_constants_reps")]
    pub constants_reps: u64,
    /// Level of the trend gates.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// JSON report written by `estimate-constants`.
    #[serde(default)]
    pub constants_report: Option<PathBuf>,
    #[serde(default)]
    pub targets: Option<Targets>,
    /// Overrides the table's `k_delta` certificate for the coupling.
    #[serde(default)]
    pub k_delta: Option<f64>,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            test_functions: default_test_functions(),
            eps_exponent: default_eps_exponent(),
            constants_horizon: default_constants_horizon(),
            constants_reps: default_constants_reps(),
            alpha: default_alpha(),
            constants_report: None,
            targets: None,
            k_delta: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Used when `--out` is not given.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads a `.toml` or `.json` file (other extensions: JSON, then TOML).
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let mut cfg = match ext {
            "toml" => Self::from_toml(&text)?,
            "json" => Self::from_json(&text)?,
            _ => Self::from_json(&text).or_else(|_| Self::from_toml(&text))?,
        };
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let ladder = &self.model.n_ladder;
        if ladder.is_empty() {
            return bad("model.n_ladder is empty");
        }
        if ladder[0] == 0 || ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad("model.n_ladder must be positive and strictly increasing");
        }
        if self.run.replicas == 0 {
            return bad("run.replicas must be at least 1");
        }
        if !(self.run.horizon > 0.0 && self.run.horizon.is_finite()) {
            return bad("run.horizon must be positive and finite");
        }
        if self.run.budget == 0 {
            return bad("run.budget must be positive");
        }
        let a = &self.analysis;
        if !(a.eps_exponent > 0.0 && a.eps_exponent < 1.0) {
            return bad("analysis.eps_exponent must lie in (0, 1)");
        }
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return bad("analysis.alpha must lie in (0, 1)");
        }
        if !(a.constants_horizon > 0.0) || a.constants_reps == 0 {
            return bad("analysis.constants_horizon and constants_reps must be positive");
        }
        let kernel = self.kernel()?;
        for f in &a.test_functions {
            f.validate(kernel.dim()).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.table(&kernel)?;
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        self.model.kernel.build().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn table(&self, kernel: &KernelSpec) -> Result<PerturbationTable> {
        let d = kernel.dim();
        let t = match &self.model.table {
            TableDef::Zero => Ok(PerturbationTable::zero(d)),
            TableDef::Lv { theta0, theta1 } => {
                if !(theta0.is_finite() && theta1.is_finite()) {
                    return Err(Error::Config("LV parameters must be finite".into()));
                }
                Ok(PerturbationTable::lv(kernel, *theta0, *theta1))
            }
            TableDef::Entries { entries, k_delta } => {
                let mut rows = Vec::with_capacity(entries.len());
                for r in entries {
                    let mut set = Vec::with_capacity(r.a.len());
                    for c in &r.a {
                        if c.len() != d {
                            return Err(Error::DimensionMismatch { expected: d, got: c.len() });
                        }
                        set.push(Site::new(c)?);
                    }
                    rows.push((set, r.beta, r.delta));
                }
                PerturbationTable::from_entries(d, rows, *k_delta)
            }
            TableDef::File { path } => {
                let p = self.resolve(path);
                let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                table_from_json(d, &text, None)
            }
        };
        t.map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    /// The perturbed model at scale `n`.
    pub fn model_at(&self, n: u64) -> Result<RateModel> {
        let kernel = self.kernel()?;
        let table = self.table(&kernel)?;
        RateModel::perturbed(kernel, n, table)
    }

    pub fn initial_at(&self, n: u64) -> Result<Configuration> {
        let kernel = self.kernel()?;
        let scaling = ScalingParams::new(n, &kernel)?;
        self.model.initial.build(kernel.dim(), Some(&scaling))
    }

    /// Report times `0, T/k, ..., T`.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.run.grid_points.max(1);
        (0..=k).map(|i| self.run.horizon * i as f64 / k as f64).collect()
    }

    pub fn eps_star(&self, n: u64) -> f64 {
        (n as f64).powf(-self.analysis.eps_exponent)
    }
}
