use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare_out, run_replica, CommandReport, ExperimentConfig, Gate};
use crate::error::Result;
use crate::lattice::ScalingParams;
use crate::observables::{DecompositionReport, Decomposer, TestFn};
use crate::report::write_json;
use crate::rng::{stream, tags};
use crate::simulator::{MassTracker, Observer};
use crate::stats::Summary;

/// Identity residual tolerance (relative).
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;

/// Replica statistics for one `(N, phi)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCell {
    pub n: u64,
    pub test_fn: TestFn,
    pub replicas: u64,
    pub max_rel_residual: f64,
    pub grid: Vec<f64>,
    /// Mean and s.e. of `M_t(phi)` at each grid time.
    pub mean_m: Vec<f64>,
    pub se_m: Vec<f64>,
    /// Mean and s.e. of `M_t(phi)^2 - <M(phi)>_t`.
    pub mean_comp: Vec<f64>,
    pub se_comp: Vec<f64>,
    /// `E |<M(phi)>_2,T| N / (||phi||_inf^2 E int_0^T X_s(1) ds)`.
    pub m2_constant: f64,
    pub budget_exceeded: u64,
    /// Full report of replica 0.
    pub example: Option<DecompositionReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheckReport {
    pub seed: u64,
    pub cells: Vec<DecompositionCell>,
}

struct Rep {
    reports: Vec<DecompositionReport>,
    mass_integral: f64,
    budget_exceeded: bool,
}

pub fn decomposition_check(cfg: &ExperimentConfig, seed: u64) -> Result<DecompositionCheckReport> {
    let kernel = cfg.kernel()?;
    let grid = cfg.grid();
    let fns = &cfg.analysis.test_functions;
    let mut cells = Vec::new();
    for &n in &cfg.model.n_ladder {
        let model = Arc::new(cfg.model_at(n)?);
        let sc = ScalingParams::new(n, &kernel)?;
        let initial = cfg.initial_at(n)?;
        let reps: Vec<Result<Rep>> = (0..cfg.run.replicas)
            .into_par_iter()
            .map(|r| {
                let mut decs: Vec<Decomposer> =
                    fns.iter().map(|f| Decomposer::new(Arc::clone(&model), f.clone(), grid.clone())).collect::<Result<_>>()?;
                let mut tracker = MassTracker::new(Vec::new());
                let mut obs: Vec<&mut dyn Observer> = vec![&mut tracker];
                for d in decs.iter_mut() {
                    obs.push(d);
                }
                let o = run_replica(
                    cfg.model.engine,
                    Arc::clone(&model),
                    initial.clone(),
                    stream(seed, &[tags::DECOMPOSITION, n, r]),
                    cfg.run.horizon,
                    cfg.run.budget,
                    &mut obs,
                )?;
                drop(obs);
                Ok(Rep {
                    reports: decs.iter().map(|d| d.report()).collect(),
                    mass_integral: tracker.integral * sc.atom_mass(),
                    budget_exceeded: o.budget_exceeded(),
                })
            })
            .collect();
        let reps: Vec<Rep> = reps.into_iter().collect::<Result<_>>()?;
        let done: Vec<&Rep> = reps.iter().filter(|r| !r.budget_exceeded).collect();
        for (i, f) in fns.iter().enumerate() {
            let mut mean_m = Vec::new();
            let mut se_m = Vec::new();
            let mut mean_comp = Vec::new();
            let mut se_comp = Vec::new();
            for k in 0..grid.len() {
                let ms: Vec<f64> = done.iter().map(|r| r.reports[i].rows[k].m).collect();
                let cs: Vec<f64> = done.iter().map(|r| r.reports[i].rows[k].m.powi(2) - r.reports[i].rows[k].qv()).collect();
                let (a, b) = (Summary::of(&ms), Summary::of(&cs));
                mean_m.push(a.mean);
                se_m.push(a.se);
                mean_comp.push(b.mean);
                se_comp.push(b.se);
            }
            let qv2: f64 = done.iter().map(|r| r.reports[i].rows.last().map_or(0.0, |row| row.qv2.abs())).sum();
            let mi: f64 = done.iter().map(|r| r.mass_integral).sum();
            let sup2 = f.sup_norm().powi(2);
            cells.push(DecompositionCell {
                n,
                test_fn: f.clone(),
                replicas: done.len() as u64,
                max_rel_residual: done.iter().map(|r| r.reports[i].max_rel_residual).fold(0.0, f64::max),
                grid: grid.clone(),
                mean_m,
                se_m,
                mean_comp,
                se_comp,
                m2_constant: if mi > 0.0 && sup2 > 0.0 { qv2 * n as f64 / (sup2 * mi) } else { 0.0 },
                budget_exceeded: (reps.len() - done.len()) as u64,
                example: done.first().map(|r| r.reports[i].clone()),
            });
        }
    }
    Ok(DecompositionCheckReport { seed, cells })
}

fn within(mean: f64, se: f64, k: f64) -> bool {
    if se > 0.0 {
        mean.abs() <= k * se
    } else {
        mean.abs() <= 1e-12
    }
}

pub fn decomposition_gates(rep: &DecompositionCheckReport) -> Vec<Gate> {
    let mut gates = Vec::new();
    for (i, c) in rep.cells.iter().enumerate() {
        let tag = format!("N={} phi#{} ({})", c.n, i, c.test_fn.kind());
        gates.push(Gate::new(
            format!("identity residual {tag}"),
            c.max_rel_residual <= RESIDUAL_TOLERANCE,
            format!("max relative residual {}", c.max_rel_residual),
        ));
        let worst_m = (0..c.grid.len()).find(|&k| !within(c.mean_m[k], c.se_m[k], 4.0));
        gates.push(Gate::new(
            format!("martingale mean zero {tag}"),
            worst_m.is_none(),
            match worst_m {
                Some(k) => format!("t = {}: mean M = {} ± {}", c.grid[k], c.mean_m[k], c.se_m[k]),
                None => "all grid times within 4 s.e.".into(),
            },
        ));
        let worst_c = (0..c.grid.len()).find(|&k| !within(c.mean_comp[k], c.se_comp[k], 4.0));
        gates.push(Gate::new(
            format!("compensator {tag}"),
            worst_c.is_none(),
            match worst_c {
                Some(k) => format!("t = {}: mean(M^2 - <M>) = {} ± {}", c.grid[k], c.mean_comp[k], c.se_comp[k]),
                None => "all grid times within 4 s.e.".into(),
            },
        ));
    }
    gates
}

pub fn cmd_decomposition_check(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let rep = decomposition_check(cfg, seed)?;
    for (i, c) in rep.cells.iter().enumerate() {
        if let Some(ex) = &c.example {
            let f = std::fs::File::create(out.join(format!("decomposition_n{}_f{}.csv", c.n, i % cfg.analysis.test_functions.len())))?;
            ex.write_csv(std::io::BufWriter::new(f))?;
        }
    }
    let mut slim = rep.clone();
    slim.cells.iter_mut().for_each(|c| c.example = None);
    write_json(&out.join("decomposition.json"), &slim)?;
    let warnings = rep
        .cells
        .iter()
        .filter(|c| c.budget_exceeded > 0)
        .map(|c| format!("N = {}: {} replicas exceeded the event budget", c.n, c.budget_exceeded))
        .collect();
    Ok(CommandReport::new("decomposition-check", seed, decomposition_gates(&rep), warnings))
}
