use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{prepare_out, run_replica, CommandReport, ExperimentConfig, Gate, Targets};
use crate::error::{Error, Result};
use crate::lattice::ScalingParams;
use crate::report::{fmt_f64, write_csv, write_json};
use crate::rng::{stream, tags};
use crate::simulator::{MassTracker, Observer};
use crate::stats::{log_mean_slope, ratio_of_sums, trend_gate, TrendGate, Verdict};

/// Pooled replicate count below which no verdict is issued.
pub const MIN_POOLED_REPLICAS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub n: u64,
    pub replicas: u64,
    pub budget_exceeded: u64,
    pub extinct: u64,
    /// Slope of `log E X_t(1)`.
    pub drift: f64,
    pub drift_se: f64,
    /// `sum [M(1)]_T / sum int_0^T X_s(1) ds`, with `[M(1)]_T = jumps / N^2`.
    pub branching: f64,
    pub branching_se: f64,
    /// `(E X_T(|x|^2) / E X_T(1) - X_0(|x|^2) / X_0(1)) / (d T)`.
    pub sigma2: f64,
    pub sigma2_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityVerdict {
    pub quantity: String,
    pub target: f64,
    pub verdict: Verdict,
    pub gate: Option<TrendGate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub seed: u64,
    pub targets: Targets,
    pub ladder: Vec<LadderPoint>,
    pub verdicts: Vec<QuantityVerdict>,
}

/// Targets from `analysis.targets` or the `targets` block of a constants report.
pub fn load_targets(cfg: &ExperimentConfig) -> Result<Targets> {
    if let Some(t) = cfg.analysis.targets {
        return Ok(t);
    }
    let path = cfg
        .analysis
        .constants_report
        .as_ref()
        .ok_or_else(|| Error::Config("verify-convergence needs analysis.targets or analysis.constants_report".into()))?;
    let p = cfg.resolve(path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("constants report {}: {e}", p.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let t = v.get("targets").ok_or_else(|| Error::Config(format!("{} has no targets block", p.display())))?;
    serde_json::from_value(t.clone()).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

struct Replica {
    path: Vec<f64>,
    qv: f64,
    integral: f64,
    m2: f64,
    m0: f64,
    budget_exceeded: bool,
    extinct: bool,
}

/// Runs the ladder and measures drift, branching rate and diffusivity at each `N`.
pub fn ladder_points(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<LadderPoint>> {
    let kernel = cfg.kernel()?;
    let d = kernel.dim();
    let grid = cfg.grid();
    let t_end = cfg.run.horizon;
    let mut out = Vec::new();
    for &n in &cfg.model.n_ladder {
        let model = Arc::new(cfg.model_at(n)?);
        let sc = ScalingParams::new(n, &kernel)?;
        let initial = cfg.initial_at(n)?;
        let second = |c: &crate::configuration::Configuration| -> f64 {
            c.iter().map(|s| sc.position(s)[..d].iter().map(|v| v * v).sum::<f64>()).sum::<f64>() * sc.atom_mass()
        };
        let m0 = second(&initial) / (initial.len().max(1) as f64 * sc.atom_mass());
        let reps: Vec<Result<Replica>> = (0..cfg.run.replicas)
            .into_par_iter()
            .map(|r| {
                let mut tracker = MassTracker::new(grid.clone());
                let o = run_replica(
                    cfg.model.engine,
                    Arc::clone(&model),
                    initial.clone(),
                    stream(seed, &[tags::CONVERGENCE, n, r]),
                    t_end,
                    cfg.run.budget,
                    &mut [&mut tracker as &mut dyn Observer],
                )?;
                let nf = n as f64;
                Ok(Replica {
                    path: tracker.mass.iter().map(|&m| m as f64 * sc.atom_mass()).collect(),
                    qv: tracker.jumps as f64 / (nf * nf),
                    integral: tracker.integral * sc.atom_mass(),
                    m2: second(&o.final_config),
                    m0,
                    budget_exceeded: o.budget_exceeded(),
                    extinct: o.final_config.is_empty(),
                })
            })
            .collect();
        let mut done = Vec::new();
        let mut blown = 0;
        for r in reps {
            let r = r?;
            if r.budget_exceeded {
                blown += 1;
            } else {
                done.push(r);
            }
        }
        if done.is_empty() {
            return Err(Error::InvalidParameter(format!("every replica at N = {n} exceeded the event budget")));
        }
        let paths: Vec<Vec<f64>> = done.iter().map(|r| r.path.clone()).collect();
        let (drift, drift_se) = log_mean_slope(&grid, &paths)?;
        let (branching, branching_se) =
            ratio_of_sums(&done.iter().map(|r| r.qv).collect::<Vec<_>>(), &done.iter().map(|r| r.integral).collect::<Vec<_>>());
        let finals: Vec<f64> = done.iter().map(|r| *r.path.last().expect("grid ends at T")).collect();
        let (ratio, ratio_se) = ratio_of_sums(&done.iter().map(|r| r.m2).collect::<Vec<_>>(), &finals);
        let scale = d as f64 * t_end;
        out.push(LadderPoint {
            n,
            replicas: done.len() as u64,
            budget_exceeded: blown,
            extinct: done.iter().filter(|r| r.extinct).count() as u64,
            drift,
            drift_se,
            branching,
            branching_se,
            sigma2: (ratio - done[0].m0) / scale,
            sigma2_se: ratio_se / scale,
        });
    }
    Ok(out)
}

/// Trend verdicts for drift, branching rate and diffusivity against `targets`.
pub fn verdicts(ladder: &[LadderPoint], targets: &Targets, alpha: f64) -> Vec<QuantityVerdict> {
    let pooled = ladder.iter().map(|p| p.replicas).min().unwrap_or(0);
    let items: [(&str, f64, f64, fn(&LadderPoint) -> (f64, f64)); 3] = [
        ("drift", targets.theta, targets.theta_se, |p| (p.drift, p.drift_se)),
        ("branching", targets.b, targets.b_se, |p| (p.branching, p.branching_se)),
        ("sigma2", targets.sigma2, 0.0, |p| (p.sigma2, p.sigma2_se)),
    ];
    items
        .iter()
        .map(|(name, target, tse, get)| {
            if pooled < MIN_POOLED_REPLICAS {
                return QuantityVerdict { quantity: name.to_string(), target: *target, verdict: Verdict::InsufficientReplicas, gate: None };
            }
            let pts: Vec<(f64, f64)> = ladder
                .iter()
                .map(|p| {
                    let (e, s) = get(p);
                    (e, (s * s + tse * tse).sqrt())
                })
                .collect();
            let g = trend_gate(&pts, *target, alpha);
            QuantityVerdict { quantity: name.to_string(), target: *target, verdict: g.verdict, gate: Some(g) }
        })
        .collect()
}

pub fn verify_convergence(cfg: &ExperimentConfig, seed: u64) -> Result<ConvergenceReport> {
    let targets = load_targets(cfg)?;
    let ladder = ladder_points(cfg, seed)?;
    let verdicts = verdicts(&ladder, &targets, cfg.analysis.alpha);
    Ok(ConvergenceReport { seed, targets, ladder, verdicts })
}

pub const LADDER_HEADER: [&str; 11] =
    ["n", "replicas", "budget_exceeded", "extinct", "drift", "drift_se", "branching", "branching_se", "sigma2", "sigma2_se", "seed"];

pub fn cmd_verify_convergence(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let rep = verify_convergence(cfg, seed)?;
    let rows: Vec<Vec<String>> = rep
        .ladder
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                p.replicas.to_string(),
                p.budget_exceeded.to_string(),
                p.extinct.to_string(),
                fmt_f64(p.drift),
                fmt_f64(p.drift_se),
                fmt_f64(p.branching),
                fmt_f64(p.branching_se),
                fmt_f64(p.sigma2),
                fmt_f64(p.sigma2_se),
                seed.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("ladder.csv"), &LADDER_HEADER, &rows)?;
    write_json(&out.join("convergence.json"), &rep)?;
    let mut warnings = Vec::new();
    for p in &rep.ladder {
        if p.budget_exceeded > 0 {
            warnings.push(format!("N = {}: {} replicas exceeded the event budget and were dropped", p.n, p.budget_exceeded));
        }
    }
    let gates = rep
        .verdicts
        .iter()
        .map(|v| Gate::new(v.quantity.clone(), v.verdict.ok(), format!("{:?} toward {}", v.verdict, v.target)))
        .collect();
    Ok(CommandReport::new("verify-convergence", seed, gates, warnings))
}
