use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare_out, run_replica, CommandReport, EngineChoice, ExperimentConfig, Gate};
use crate::error::{Error, Result};
use crate::report::{fmt_f64, write_csv, write_json};
use crate::rng::{derive_seed, stream, tags};
use crate::simulator::{CoupledEngine, RateModel, BIASED, PERTURBED, VOTER};
use crate::stats::{chi2_two_sample, Chi2Test, Summary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingCell {
    pub n: u64,
    pub replicas: u64,
    pub k_delta: f64,
    pub c_bar: f64,
    /// Voter speed of the coupled voter and biased voter processes.
    pub v: f64,
    pub initial_sites: usize,
    pub violations: u64,
    pub budget_exceeded: u64,
    pub rings: u64,
    /// Mean terminal `|xi|`, `|xihat|`, `|xibar|` with standard errors.
    pub mean_sites: [f64; 3],
    pub se_sites: [f64; 3],
    pub mean_bar_sq: f64,
    pub se_bar_sq: f64,
    /// `e^{bT} |xibar_0|`.
    pub first_moment_bound: f64,
    /// `e^{2bT} (|xibar_0|^2 + (b + 2v)/b (1 - e^{-bT}) |xibar_0|)`.
    pub second_moment_bound: f64,
    /// Terminal sizes of the coupled marginals against independent runs.
    pub perturbed_marginal: Option<Chi2Test>,
    pub voter_marginal: Option<Chi2Test>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub seed: u64,
    pub horizon: f64,
    pub cells: Vec<CouplingCell>,
}

/// `(b + 2v) (1 - e^{-bT}) / b`, equal to `2 v T` at `b = 0`.
fn second_moment_factor(b: f64, v: f64, t: f64) -> f64 {
    if b == 0.0 {
        2.0 * v * t
    } else {
        (b + 2.0 * v) * (-(-b * t).exp_m1()) / b
    }
}

struct CoupledReplica {
    sites: [usize; 3],
    violation: bool,
    budget_exceeded: bool,
    rings: u64,
    independent: [Option<usize>; 2],
}

pub fn coupling_check(cfg: &ExperimentConfig, seed: u64) -> Result<CouplingReport> {
    let kernel = cfg.kernel()?;
    let table = cfg.table(&kernel)?;
    let horizon = cfg.run.horizon;
    let mut cells = Vec::new();
    for &n in &cfg.model.n_ladder {
        let k_delta = match cfg.analysis.k_delta {
            Some(k) => k,
            None => table
                .validate(&kernel, n, derive_seed(seed, &[tags::VALIDATION, n]))
                .certified_k_delta()
                .ok_or_else(|| Error::Config(format!("no k_delta certificate for the table at N = {n}; set analysis.k_delta")))?,
        };
        let model = Arc::new(cfg.model_at(n)?);
        let voter = Arc::new(RateModel::voter(kernel.clone(), n)?);
        let initial = cfg.initial_at(n)?;
        let probe = CoupledEngine::new(Arc::clone(&model), k_delta, initial.clone(), stream(seed, &[tags::COUPLING, n]))?;
        let (c_bar, v) = (probe.c_bar(), probe.model(BIASED).speed());
        let reps: Vec<Result<CoupledReplica>> = (0..cfg.run.replicas)
            .into_par_iter()
            .map(|r| {
                let mut e = CoupledEngine::new(Arc::clone(&model), k_delta, initial.clone(), stream(seed, &[tags::COUPLING, n, r, 0]))?;
                let (violation, budget_exceeded) = match e.run(horizon, cfg.run.budget, |_, _| {}) {
                    Ok(()) => (!e.dominated(), false),
                    Err(Error::DominationViolation { .. }) => (true, false),
                    Err(Error::BudgetExceeded { .. }) => (false, true),
                    Err(err) => return Err(err),
                };
                let mut independent = [None, None];
                for (k, m) in [&model, &voter].into_iter().enumerate() {
                    let o = run_replica(
                        EngineChoice::Auto,
                        Arc::clone(m),
                        initial.clone(),
                        stream(seed, &[tags::COUPLING, n, r, 1 + k as u64]),
                        horizon,
                        cfg.run.budget,
                        &mut [],
                    )?;
                    if !o.budget_exceeded() {
                        independent[k] = Some(o.final_config.len());
                    }
                }
                Ok(CoupledReplica {
                    sites: [e.config(PERTURBED).len(), e.config(VOTER).len(), e.config(BIASED).len()],
                    violation,
                    budget_exceeded,
                    rings: e.stats().rings,
                    independent,
                })
            })
            .collect();
        let reps: Vec<CoupledReplica> = reps.into_iter().collect::<Result<_>>()?;
        let done: Vec<&CoupledReplica> = reps.iter().filter(|r| !r.budget_exceeded).collect();
        let col = |k: usize| -> Summary { Summary::of(&done.iter().map(|r| r.sites[k] as f64).collect::<Vec<_>>()) };
        let sums = [col(0), col(1), col(2)];
        let sq = Summary::of(&done.iter().map(|r| (r.sites[BIASED] as f64).powi(2)).collect::<Vec<_>>());
        let x0 = initial.len() as f64;
        let marginal = |k: usize, which: usize| -> Option<Chi2Test> {
            let coupled: Vec<usize> = done.iter().map(|r| r.sites[which]).collect();
            let indep: Vec<usize> = reps.iter().filter_map(|r| r.independent[k]).collect();
            chi2_two_sample(&coupled, &indep).ok()
        };
        cells.push(CouplingCell {
            n,
            replicas: cfg.run.replicas,
            k_delta,
            c_bar,
            v,
            initial_sites: initial.len(),
            violations: reps.iter().filter(|r| r.violation).count() as u64,
            budget_exceeded: (reps.len() - done.len()) as u64,
            rings: reps.iter().map(|r| r.rings).sum(),
            mean_sites: [sums[0].mean, sums[1].mean, sums[2].mean],
            se_sites: [sums[0].se, sums[1].se, sums[2].se],
            mean_bar_sq: sq.mean,
            se_bar_sq: sq.se,
            first_moment_bound: (c_bar * horizon).exp() * x0,
            second_moment_bound: (2.0 * c_bar * horizon).exp() * (x0 * x0 + second_moment_factor(c_bar, v, horizon) * x0),
            perturbed_marginal: marginal(0, PERTURBED),
            voter_marginal: marginal(1, VOTER),
        });
    }
    Ok(CouplingReport { seed, horizon, cells })
}

/// One-sided check that an estimate does not exceed `bound` by more than 3 s.e.
fn below(mean: f64, se: f64, bound: f64) -> bool {
    mean <= bound + 3.0 * se
}

pub fn coupling_gates(rep: &CouplingReport) -> Vec<Gate> {
    let mut gates = Vec::new();
    for c in &rep.cells {
        gates.push(Gate::new(format!("domination N={}", c.n), c.violations == 0, format!("{} violating replicas", c.violations)));
        gates.push(Gate::new(
            format!("first moment bound N={}", c.n),
            below(c.mean_sites[BIASED], c.se_sites[BIASED], c.first_moment_bound),
            format!("E|xibar_T| = {} ± {} vs {}", c.mean_sites[BIASED], c.se_sites[BIASED], c.first_moment_bound),
        ));
        gates.push(Gate::new(
            format!("second moment bound N={}", c.n),
            below(c.mean_bar_sq, c.se_bar_sq, c.second_moment_bound),
            format!("E|xibar_T|^2 = {} ± {} vs {}", c.mean_bar_sq, c.se_bar_sq, c.second_moment_bound),
        ));
    }
    gates
}

pub const COUPLING_HEADER: [&str; 12] = [
    "n",
    "replicas",
    "violations",
    "budget_exceeded",
    "mean_xi",
    "mean_xihat",
    "mean_xibar",
    "mean_xibar_sq",
    "first_moment_bound",
    "second_moment_bound",
    "perturbed_marginal_p",
    "voter_marginal_p",
];

pub fn cmd_coupling_check(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let rep = coupling_check(cfg, seed)?;
    let p = |t: &Option<Chi2Test>| t.as_ref().map(|t| fmt_f64(t.p_value)).unwrap_or_default();
    let rows: Vec<Vec<String>> = rep
        .cells
        .iter()
        .map(|c| {
            vec![
                c.n.to_string(),
                c.replicas.to_string(),
                c.violations.to_string(),
                c.budget_exceeded.to_string(),
                fmt_f64(c.mean_sites[0]),
                fmt_f64(c.mean_sites[1]),
                fmt_f64(c.mean_sites[2]),
                fmt_f64(c.mean_bar_sq),
                fmt_f64(c.first_moment_bound),
                fmt_f64(c.second_moment_bound),
                p(&c.perturbed_marginal),
                p(&c.voter_marginal),
            ]
        })
        .collect();
    write_csv(&out.join("coupling.csv"), &COUPLING_HEADER, &rows)?;
    write_json(&out.join("coupling.json"), &rep)?;
    let mut warnings = Vec::new();
    for c in &rep.cells {
        if c.budget_exceeded > 0 {
            warnings.push(format!("N = {}: {} coupled replicas exceeded the event budget", c.n, c.budget_exceeded));
        }
        for (name, t) in [("perturbed", &c.perturbed_marginal), ("voter", &c.voter_marginal)] {
            if let Some(t) = t {
                if !t.passes(0.01) {
                    warnings.push(format!("N = {}: {name} marginal differs from independent runs (p = {})", c.n, t.p_value));
                }
            }
        }
    }
    Ok(CommandReport::new("coupling-check", seed, coupling_gates(&rep), warnings))
}
