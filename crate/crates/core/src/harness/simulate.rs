use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare_out, run_replica, CommandReport, ExperimentConfig, Gate};
use crate::error::Result;
use crate::lattice::ScalingParams;
use crate::report::{fmt_f64, write_csv, write_json};
use crate::rng::{stream, tags};
use crate::simulator::{EventLog, MassTracker, Observer};
use crate::stats::Summary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub n: u64,
    pub replica: u64,
    pub initial_mass: f64,
    pub terminal_mass: f64,
    pub terminal_sites: usize,
    pub events: u64,
    pub absorbed: bool,
    pub budget_exceeded: bool,
    /// `int_0^T X_s(1) ds`.
    pub mass_integral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub n: u64,
    pub replicas: u64,
    pub seed: u64,
    pub initial_mass: f64,
    pub mean_terminal_mass: f64,
    pub se: f64,
    pub extinct: u64,
    pub budget_exceeded: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub rows: Vec<ReplicaRow>,
    pub summaries: Vec<SimulateSummary>,
    #[serde(skip)]
    pub logs: Vec<(u64, u64, EventLog)>,
}

/// Runs `R` replicas per `N`; event logs are kept when `run.log_events` is set.
pub fn simulate(cfg: &ExperimentConfig, seed: u64) -> Result<SimulateReport> {
    let kernel = cfg.kernel()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut logs = Vec::new();
    for &n in &cfg.model.n_ladder {
        let model = Arc::new(cfg.model_at(n)?);
        let scaling = ScalingParams::new(n, &kernel)?;
        let initial = cfg.initial_at(n)?;
        let x0 = initial.len() as f64 * scaling.atom_mass();
        let results: Vec<Result<(ReplicaRow, Option<EventLog>)>> = (0..cfg.run.replicas)
            .into_par_iter()
            .map(|r| {
                let mut tracker = MassTracker::new(Vec::new());
                let mut log = EventLog::new(kernel.dim());
                let mut obs: Vec<&mut dyn Observer> = vec![&mut tracker];
                if cfg.run.log_events {
                    obs.push(&mut log);
                }
                let out = run_replica(
                    cfg.model.engine,
                    Arc::clone(&model),
                    initial.clone(),
                    stream(seed, &[tags::SIMULATE, n, r]),
                    cfg.run.horizon,
                    cfg.run.budget,
                    &mut obs,
                )?;
                let row = ReplicaRow {
                    n,
                    replica: r,
                    initial_mass: x0,
                    terminal_mass: out.final_config.len() as f64 * scaling.atom_mass(),
                    terminal_sites: out.final_config.len(),
                    events: out.events,
                    absorbed: out.final_config.is_empty(),
                    budget_exceeded: out.budget_exceeded(),
                    mass_integral: tracker.integral * scaling.atom_mass(),
                };
                Ok((row, cfg.run.log_events.then_some(log)))
            })
            .collect();
        let mut cell = Vec::with_capacity(results.len());
        for res in results {
            let (row, log) = res?;
            if let Some(l) = log {
                logs.push((n, row.replica, l));
            }
            cell.push(row);
        }
        let finished: Vec<f64> = cell.iter().filter(|r| !r.budget_exceeded).map(|r| r.terminal_mass).collect();
        let s = Summary::of(&finished);
        summaries.push(SimulateSummary {
            n,
            replicas: cfg.run.replicas,
            seed,
            initial_mass: x0,
            mean_terminal_mass: s.mean,
            se: s.se,
            extinct: cell.iter().filter(|r| r.absorbed).count() as u64,
            budget_exceeded: cell.iter().filter(|r| r.budget_exceeded).count() as u64,
        });
        rows.extend(cell);
    }
    Ok(SimulateReport { rows, summaries, logs })
}

pub const REPLICA_HEADER: [&str; 9] =
    ["n", "replica", "initial_mass", "terminal_mass", "terminal_sites", "events", "absorbed", "budget_exceeded", "mass_integral"];

pub fn cmd_simulate(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let rep = simulate(cfg, seed)?;
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.replica.to_string(),
                fmt_f64(r.initial_mass),
                fmt_f64(r.terminal_mass),
                r.terminal_sites.to_string(),
                r.events.to_string(),
                r.absorbed.to_string(),
                r.budget_exceeded.to_string(),
                fmt_f64(r.mass_integral),
            ]
        })
        .collect();
    write_csv(&out.join("replicas.csv"), &REPLICA_HEADER, &rows)?;
    write_json(&out.join("summary.json"), &rep.summaries)?;
    if !rep.logs.is_empty() {
        let dir = out.join("logs");
        std::fs::create_dir_all(&dir)?;
        for (n, r, log) in &rep.logs {
            let f = std::fs::File::create(dir.join(format!("n{n}_r{r}.csv")))?;
            log.write_csv(std::io::BufWriter::new(f))?;
        }
    }
    let mut gates = Vec::new();
    let mut warnings = Vec::new();
    let kernel = cfg.kernel()?;
    let voter = cfg.table(&kernel)?.is_zero();
    for s in &rep.summaries {
        if s.budget_exceeded > 0 {
            warnings.push(format!("N = {}: {} replicas exceeded the event budget", s.n, s.budget_exceeded));
        }
        if voter {
            // |xi_t| is a martingale for the voter model
            let dev = (s.mean_terminal_mass - s.initial_mass).abs();
            let ok = if s.se > 0.0 { dev <= 4.0 * s.se } else { dev <= 1e-12 * s.initial_mass.max(1.0) };
            gates.push(Gate::new(
                format!("voter mass martingale N={}", s.n),
                ok,
                format!("mean X_T(1) = {} ± {} vs X_0(1) = {}", s.mean_terminal_mass, s.se, s.initial_mass),
            ));
        }
    }
    Ok(CommandReport::new("simulate", seed, gates, warnings))
}
