//! Experiment orchestration behind the `svlv` command line.
//!
//! Each command has a pure form returning a typed report and a `cmd_*` form
//! that also writes CSV/JSON artifacts and a `report.json` of gate results.

pub mod config;
mod constants;
mod convergence;
mod coupling;
mod decomposition;
mod simulate;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{EngineChoice, ExperimentConfig, TableDef, Targets};
pub use constants::{cmd_estimate_constants, estimate_constants, ConstantsReport, SetRecord};
pub use convergence::{cmd_verify_convergence, verify_convergence, ConvergenceReport, LadderPoint, QuantityVerdict};
pub use coupling::{cmd_coupling_check, coupling_check, CouplingCell, CouplingReport};
pub use decomposition::{cmd_decomposition_check, decomposition_check, DecompositionCell, DecompositionCheckReport};
pub use simulate::{cmd_simulate, simulate, ReplicaRow, SimulateReport, SimulateSummary};

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::report::write_json;
use crate::simulator::{run, Engine, EventEngine, Observer, RateModel, RunSummary, SimRng, ThinningEngine};

/// One pass/fail check of a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Gate {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Gate {
        Gate { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandReport {
    pub command: String,
    pub seed: u64,
    pub passed: bool,
    pub gates: Vec<Gate>,
    pub warnings: Vec<String>,
}

impl CommandReport {
    pub fn new(command: &str, seed: u64, gates: Vec<Gate>, warnings: Vec<String>) -> CommandReport {
        CommandReport { command: command.to_string(), seed, passed: gates.iter().all(|g| g.passed), gates, warnings }
    }

    /// Process exit code: 0 when every gate passes, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join("report.json"), self)
    }
}

pub(crate) fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Builds the engine for `model` per `choice`.
pub fn make_engine(choice: EngineChoice, model: Arc<RateModel>, config: Configuration, rng: SimRng) -> Result<Box<dyn Engine + Send>> {
    match choice {
        EngineChoice::Dense => Ok(Box::new(EventEngine::new(model, config, rng)?)),
        EngineChoice::Thinning => Ok(Box::new(ThinningEngine::new(model, config, rng)?)),
        EngineChoice::Auto => {
            if model.kernel().support().len() > 2 * model.dim() {
                if let Ok(e) = ThinningEngine::new(Arc::clone(&model), config.clone(), rng.clone()) {
                    return Ok(Box::new(e));
                }
            }
            Ok(Box::new(EventEngine::new(model, config, rng)?))
        }
    }
}

/// Outcome of one replica; a blown event budget is a flag, not an error.
pub(crate) struct ReplicaOutcome {
    pub summary: Option<RunSummary>,
    pub final_config: Configuration,
    pub events: u64,
}

impl ReplicaOutcome {
    pub fn budget_exceeded(&self) -> bool {
        self.summary.is_none()
    }
}

pub(crate) fn run_replica(
    choice: EngineChoice,
    model: Arc<RateModel>,
    initial: Configuration,
    rng: SimRng,
    horizon: f64,
    budget: u64,
    observers: &mut [&mut dyn Observer],
) -> Result<ReplicaOutcome> {
    let mut engine = make_engine(choice, model, initial, rng)?;
    let start = engine.events();
    match run(engine.as_mut(), horizon, observers, budget) {
        Ok(s) => Ok(ReplicaOutcome { events: s.events, summary: Some(s), final_config: engine.config().clone() }),
        Err(Error::BudgetExceeded { .. }) => {
            Ok(ReplicaOutcome { summary: None, final_config: engine.config().clone(), events: engine.events() - start })
        }
        Err(e) => Err(e),
    }
}

/// The five subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    EstimateConstants,
    VerifyConvergence,
    CouplingCheck,
    DecompositionCheck,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::EstimateConstants => "estimate-constants",
            Command::VerifyConvergence => "verify-convergence",
            Command::CouplingCheck => "coupling-check",
            Command::DecompositionCheck => "decomposition-check",
        }
    }
}

/// Runs `command` and writes its artifacts to `out`.
pub fn run_command(command: Command, cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let report = match command {
        Command::Simulate => cmd_simulate(cfg, seed, out)?,
        Command::EstimateConstants => cmd_estimate_constants(cfg, seed, out)?,
        Command::VerifyConvergence => cmd_verify_convergence(cfg, seed, out)?,
        Command::CouplingCheck => cmd_coupling_check(cfg, seed, out)?,
        Command::DecompositionCheck => cmd_decomposition_check(cfg, seed, out)?,
    };
    report.write(out)?;
    Ok(report)
}
