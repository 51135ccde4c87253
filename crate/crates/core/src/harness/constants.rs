use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{prepare_out, CommandReport, ExperimentConfig, Gate, Targets};
use crate::coalescing::{
    assemble_theta, estimate_beta_delta, estimate_gamma_e, estimate_gamma_n, estimate_sigma_limit, estimate_sigma_n, required_sets,
    sigma_long_range, BetaDelta, ConstantRecord, LadderEstimate, SigmaValue, TauEstimate, ThetaEstimate,
};
use crate::error::Result;
use crate::lattice::{KernelSpec, KernelVariant, Site};
use crate::perturbation::TableOrigin;
use crate::report::write_json;
use crate::rng::{derive_seed, tags};

/// `sigma_N(A)` at one scale, or the limit ladder for `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub set: Vec<Vec<i32>>,
    pub n: Option<u64>,
    pub eps: Option<f64>,
    pub estimate: TauEstimate,
    pub ladder: Option<LadderEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub kernel: String,
    pub seed: u64,
    pub records: Vec<ConstantRecord>,
    pub gamma_e: Option<LadderEstimate>,
    pub beta_delta: Option<BetaDelta>,
    pub sigma_n: Vec<SetRecord>,
    pub sigma_limit: Vec<SetRecord>,
    pub theta: ThetaEstimate,
    /// `analytic_long_range`, `lv_beta_delta` or `assembled`.
    pub theta_branch: String,
    /// Assembled from the `sigma` limits when the LV branch is taken, as a cross-check.
    pub theta_assembled: Option<ThetaEstimate>,
    pub targets: Targets,
    pub warnings: Vec<String>,
}

fn coords(set: &[Site], d: usize) -> Vec<Vec<i32>> {
    set.iter().map(|s| s.coords(d).to_vec()).collect()
}

fn is_long_range(kernel: &KernelSpec) -> bool {
    matches!(kernel.variant(), KernelVariant::LongRange { .. })
}

pub fn estimate_constants(cfg: &ExperimentConfig, seed: u64) -> Result<ConstantsReport> {
    let kernel = cfg.kernel()?;
    let table = cfg.table(&kernel)?;
    let d = kernel.dim();
    let reps = cfg.analysis.constants_reps;
    let horizon = cfg.analysis.constants_horizon;
    let sub = |path: &[u64]| derive_seed(seed, &[&[tags::CONSTANTS][..], path].concat());
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    let long = is_long_range(&kernel);
    if !long && d <= 2 {
        warnings.push(format!("d = {d} with a fixed kernel: the walk is recurrent and the escape constants vanish"));
    }

    let (gamma_e, beta_delta) = if long {
        (None, None)
    } else {
        let g = estimate_gamma_e(&kernel, horizon, reps, sub(&[1]))?;
        let bd = estimate_beta_delta(&kernel, horizon, reps, sub(&[2]))?;
        records.push(ConstantRecord::new("gamma_e", &g.extrapolated, &kernel, seed));
        records.push(ConstantRecord::new("beta", &bd.beta.extrapolated, &kernel, seed));
        records.push(ConstantRecord::new("delta", &bd.delta.extrapolated, &kernel, seed));
        (Some(g), Some(bd))
    };

    for &n in &cfg.model.n_ladder {
        let eps = cfg.eps_star(n);
        let g = estimate_gamma_n(&kernel, n, eps, reps, sub(&[3, n]))?;
        records.push(ConstantRecord::new(&format!("gamma_N[N={n}]"), &g, &kernel, seed));
    }

    let sets = required_sets(table.entries());
    let mut sigma_n = Vec::new();
    for (i, set) in sets.iter().enumerate() {
        for &n in &cfg.model.n_ladder {
            let eps = cfg.eps_star(n);
            let est = estimate_sigma_n(set, &kernel, n, eps, reps, sub(&[4, n, i as u64]))?;
            sigma_n.push(SetRecord { set: coords(set, d), n: Some(n), eps: Some(eps), estimate: est, ladder: None });
        }
    }

    let mut sigma_limit = Vec::new();
    let mut limits: BTreeMap<Vec<Site>, SigmaValue> = BTreeMap::new();
    if !long {
        for (i, set) in sets.iter().enumerate() {
            let lad = estimate_sigma_limit(set, &kernel, horizon, reps, sub(&[5, i as u64]))?;
            limits.insert(set.clone(), SigmaValue { value: lad.extrapolated.estimate, se: lad.extrapolated.se });
            sigma_limit.push(SetRecord { set: coords(set, d), n: None, eps: None, estimate: lad.extrapolated, ladder: Some(lad) });
        }
    }

    let (theta, theta_branch, theta_assembled) = if long {
        (assemble_theta(table.entries(), sigma_long_range)?, "analytic_long_range", None)
    } else {
        let assembled = assemble_theta(table.entries(), |s| limits.get(s).copied())?;
        match (table.origin(), &beta_delta) {
            (TableOrigin::Lv { theta0, theta1, .. }, Some(bd)) => {
                let (b, db) = (bd.beta.extrapolated.estimate, bd.beta.extrapolated.se);
                let (dl, dd) = (bd.delta.extrapolated.estimate, bd.delta.extrapolated.se);
                let th = ThetaEstimate {
                    theta: theta0 * b - theta1 * dl,
                    se: ((theta0 * db).powi(2) + (theta1 * dd).powi(2)).sqrt(),
                };
                (th, "lv_beta_delta", Some(assembled))
            }
            _ => (assembled, "assembled", None),
        }
    };
    records.push(ConstantRecord::new("theta", &TauEstimate { estimate: theta.theta, se: theta.se, reps, horizon }, &kernel, seed));

    let targets = match &gamma_e {
        Some(g) => Targets {
            theta: theta.theta,
            theta_se: theta.se,
            b: 2.0 * g.extrapolated.estimate,
            b_se: 2.0 * g.extrapolated.se,
            sigma2: kernel.sigma2(),
        },
        None => Targets { theta: theta.theta, theta_se: theta.se, b: 2.0, b_se: 0.0, sigma2: kernel.sigma2() },
    };

    Ok(ConstantsReport {
        kernel: kernel.id(),
        seed,
        records,
        gamma_e,
        beta_delta,
        sigma_n,
        sigma_limit,
        theta,
        theta_branch: theta_branch.to_string(),
        theta_assembled,
        targets,
        warnings,
    })
}

pub fn cmd_estimate_constants(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<CommandReport> {
    prepare_out(out)?;
    let rep = estimate_constants(cfg, seed)?;
    write_json(&out.join("constants.json"), &rep)?;
    let mut gates = Vec::new();
    if let Some(bd) = &rep.beta_delta {
        gates.push(Gate::new(
            "beta event inside delta event",
            bd.containment_violations == 0,
            format!("{} violating replicates", bd.containment_violations),
        ));
        let (b, d) = (&bd.beta.extrapolated, &bd.delta.extrapolated);
        gates.push(Gate::new(
            "beta <= delta",
            b.estimate <= d.estimate + 3.0 * (b.se.powi(2) + d.se.powi(2)).sqrt(),
            format!("beta = {} ± {}, delta = {} ± {}", b.estimate, b.se, d.estimate, d.se),
        ));
    }
    gates.push(Gate::new("theta finite", rep.theta.theta.is_finite(), format!("theta = {} ± {} ({})", rep.theta.theta, rep.theta.se, rep.theta_branch)));
    Ok(CommandReport::new("estimate-constants", seed, gates, rep.warnings.clone()))
}
