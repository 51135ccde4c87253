//! Acceptance run: every criterion is executed in order and reported on its
//! own `criterion N: PASS|FAIL` line. The test fails if any criterion fails.

mod common;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use common::{report, Brute};
use svlv::coalescing::{dual_probability, estimate_beta_delta, estimate_gamma_e, estimate_sigma_limit, estimate_sigma_n};
use svlv::configuration::cube_sites;
use svlv::harness::{
    cmd_coupling_check, decomposition_check, make_engine, simulate, verify_convergence, ConvergenceReport, EngineChoice,
    ExperimentConfig, LadderPoint,
};
use svlv::observables::{generator_gap, PerturbationStatistic, TestFn};
use svlv::rng::{derive_seed, stream, tags};
use svlv::sbm::{extinction_probability, feller_moments, simulate_feller, simulate_feller_euler};
use svlv::simulator::{run, Domain, EventEngine, EventLog, Observer, RateModel, Selection};
use svlv::stats::{chi2_two_sample, difference_z, two_proportion_z, Summary};
use svlv::{Configuration, Error, KernelSpec, PerturbationTable, Result, Site};

const SEED: u64 = 20_240_917;

type Check = Result<(bool, String)>;

fn nn3() -> KernelSpec {
    KernelSpec::nearest_neighbor(3).unwrap()
}

fn e(axis: usize, k: i32) -> Site {
    Site::axis(axis, k)
}

fn criterion(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|err| (false, format!("error: {err}")));
    report(&format!(
        "criterion {id}: {} {name} ({:.0}s) {detail}",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    ));
    pass
}

// 1. decomposition identity

fn decomposition_identity() -> Check {
    let fns3 = r#"test_functions = [
        { kind = "constant", c = 1.0 },
        { kind = "gaussian_bump", center = [0.1, 0.0, -0.1], width = 0.4 },
        { kind = "smooth_indicator", radius = 0.3, ramp = 0.4 },
        { kind = "time_dependent", knots = [{ time = 0.0, phi = { kind = "constant", c = 1.0 } }, { time = 0.3, phi = { kind = "gaussian_bump", center = [0.0, 0.0, 0.0], width = 0.5 } }] },
    ]"#;
    let fns2 = r#"test_functions = [
        { kind = "constant", c = 2.0 },
        { kind = "gaussian_bump", center = [0.2, -0.1], width = 0.3, amplitude = 1.5 },
        { kind = "smooth_indicator", radius = 0.2, ramp = 0.5 },
        { kind = "time_dependent", knots = [{ time = 0.1, phi = { kind = "smooth_indicator", radius = 0.5, ramp = 0.5 } }, { time = 0.2, phi = { kind = "constant", c = 1.0 } }, { time = 0.4, phi = { kind = "gaussian_bump", center = [0.0, 0.0], width = 0.6 } }] },
    ]"#;
    let models = [
        ("voter", r#"kernel = { variant = "nearest_neighbor", d = 3 }"#, fns3, 50),
        ("lv(3,-2)", "kernel = { variant = \"nearest_neighbor\", d = 3 }\ntable = { kind = \"lv\", theta0 = 3.0, theta1 = -2.0 }", fns3, 50),
        ("long-range lv(1,4)", "kernel = { variant = \"long_range\", d = 2, M_N = 4 }\ntable = { kind = \"lv\", theta0 = 1.0, theta1 = 4.0 }", fns2, 25),
        (
            "general table",
            "kernel = { variant = \"nearest_neighbor\", d = 2 }\ntable = { kind = \"entries\", entries = [{ A = [[1, 0]], beta = 1.0, delta = 0.0 }, { A = [[0, 1], [-1, 0]], beta = 0.5, delta = 2.0 }, { A = [], beta = 0.0, delta = 0.5 }] }",
            fns2,
            40,
        ),
    ];
    let mut worst = 0.0f64;
    let mut paths = 0;
    let mut events = 0;
    for (i, (_, model, fns, n)) in models.iter().enumerate() {
        let cfg = ExperimentConfig::from_toml(&format!(
            "[model]\n{model}\nn_ladder = [{n}]\ninitial = {{ kind = \"uniform_mass\", mass = 1.0, macro_half_width = 0.5, seed = 3 }}\n\
             [run]\nhorizon = 0.5\nreplicas = 10\n[analysis]\n{fns}\n"
        ))?;
        let rep = decomposition_check(&cfg, derive_seed(SEED, &[1, i as u64]))?;
        for c in &rep.cells {
            worst = worst.max(c.max_rel_residual);
            paths += c.replicas;
            events += c.example.as_ref().map_or(0, |x| x.events);
        }
    }
    Ok((worst <= 1e-9, format!("max relative residual {worst:.3e} over {paths} (path, phi) pairs; {events} events in the example paths")))
}

// 2. engine vs dense Gillespie

fn engine_oracle() -> Check {
    let k = nn3();
    let n = 10;
    let dom = Domain::Box { lo: 0, hi: 3 };
    let models = [
        ("voter", RateModel::voter(k.clone(), n)?.with_domain(dom)),
        ("lv(3,-2)", RateModel::perturbed(k.clone(), n, PerturbationTable::lv(&k, 3.0, -2.0))?.with_domain(dom)),
        ("biased voter", RateModel::biased_voter(k.clone(), &k, n, n as f64, 2.0)?.with_domain(dom)),
    ];
    let sites = cube_sites(3, 0, 3);
    let mut init = stream(SEED, &[2, tags::INITIAL]);
    let initial = Configuration::from_sites(3, sites.iter().copied().filter(|_| init.random::<f64>() < 0.5));
    let horizon = 1.0;
    let mut ok = true;
    let mut detail = Vec::new();
    for (m, (name, model)) in models.into_iter().enumerate() {
        let model = Arc::new(model);
        let mut mismatched = 0;
        let mut compared = 0;
        for s in 0..20u64 {
            let path = [2, m as u64, s];
            let mut engine = EventEngine::new(Arc::clone(&model), initial.clone(), stream(SEED, &path))?.with_selection(Selection::Canonical);
            let mut log = EventLog::new(3);
            run(&mut engine, horizon, &mut [&mut log as &mut dyn Observer], u64::MAX)?;
            let mut brute = Brute::new(model.kernel(), model.table(), model.speed(), sites.clone(), initial.clone());
            let reference = brute.run(horizon, &mut stream(SEED, &path));
            compared += reference.len();
            let same = log.events.len() == reference.len()
                && log.events.iter().zip(&reference).all(|(a, b)| a.site == b.1 && (a.time - b.0).abs() <= 1e-9 * b.0.max(1.0));
            if !same {
                mismatched += 1;
            }
        }
        let reps = 2000u64;
        let sparse: Vec<usize> = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<usize> {
                let mut e = EventEngine::new(Arc::clone(&model), initial.clone(), stream(SEED, &[2, m as u64, 1000 + r]))?;
                run(&mut e, horizon, &mut [], u64::MAX)?;
                Ok(svlv::simulator::Engine::config(&e).len())
            })
            .collect::<Result<_>>()?;
        let dense: Vec<usize> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut b = Brute::new(model.kernel(), model.table(), model.speed(), sites.clone(), initial.clone());
                b.run(horizon, &mut stream(SEED, &[2, m as u64, 1_000_000 + r]));
                b.config.len()
            })
            .collect();
        let chi = chi2_two_sample(&sparse, &dense)?;
        ok &= mismatched == 0 && chi.passes(0.01);
        detail.push(format!("{name}: {mismatched}/20 shared-seed paths differ ({compared} events), chi2 p = {:.3}", chi.p_value));
    }
    Ok((ok, detail.join("; ")))
}

// 3. voter mass martingale

fn sites_toml(sites: &[Site], d: usize) -> String {
    let items: Vec<String> = sites.iter().map(|s| format!("{:?}", s.coords(d))).collect();
    format!("[{}]", items.join(", "))
}

fn voter_martingale() -> Check {
    let cube = cube_sites(3, 0, 3);
    let cfg = ExperimentConfig::from_toml(&format!(
        "[model]\nkernel = {{ variant = \"nearest_neighbor\", d = 3 }}\nn_ladder = [100]\ninitial = {{ kind = \"sites\", sites = {} }}\n\
         [run]\nhorizon = 1.0\nreplicas = 2000\n",
        sites_toml(&cube, 3)
    ))?;
    let rep = simulate(&cfg, SEED)?;
    let masses: Vec<f64> = rep.rows.iter().filter(|r| !r.budget_exceeded).map(|r| r.terminal_mass).collect();
    let s = Summary::of(&masses);
    let x0 = rep.rows[0].initial_mass;
    Ok((
        (x0 - 0.64).abs() < 1e-12 && (s.mean - 0.64).abs() <= 4.0 * s.se && masses.len() == 2000,
        format!("E X_1(1) = {:.4} ± {:.4} (target 0.64, {} replicas)", s.mean, s.se, masses.len()),
    ))
}

// 4. pathwise domination and the biased voter moment bounds

fn domination() -> Check {
    let cfg = ExperimentConfig::from_toml(
        "[model]\nkernel = { variant = \"nearest_neighbor\", d = 3 }\ntable = { kind = \"lv\", theta0 = 5.0, theta1 = 5.0 }\n\
         n_ladder = [100]\ninitial = { kind = \"sites\", sites = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]] }\n\
         [run]\nhorizon = 1.0\nreplicas = 100\n",
    )?;
    let dir = tempfile::tempdir()?;
    let rep = cmd_coupling_check(&cfg, SEED, dir.path())?;
    let detail: Vec<String> = rep.gates.iter().map(|g| format!("{} {}: {}", if g.passed { "ok" } else { "FAILED" }, g.name, g.detail)).collect();
    let complete = rep.warnings.iter().all(|w| !w.contains("budget"));
    Ok((rep.passed && complete, detail.join("; ")))
}

// 5. coalescing constants

#[derive(Clone, Copy, Debug)]
struct Constants {
    gamma: (f64, f64),
    beta: (f64, f64),
    delta: (f64, f64),
}

/// `P(simple random walk on Z^3 never returns to 0) = 1 / G(0)`, with the
/// Watson integral `G(0) = sqrt(6) / (32 pi^3) Gamma(1/24) Gamma(5/24) Gamma(7/24) Gamma(11/24)`.
/// Two independent walks started at neighbours meet iff their difference
/// walk (itself a simple random walk) hits 0, so this is `gamma_e`.
fn gamma_e_oracle() -> f64 {
    use statrs::function::gamma::gamma;
    let pi = std::f64::consts::PI;
    let g0 = 6f64.sqrt() / (32.0 * pi.powi(3)) * gamma(1.0 / 24.0) * gamma(5.0 / 24.0) * gamma(7.0 / 24.0) * gamma(11.0 / 24.0);
    1.0 / g0
}

fn coalescing_constants(out: &mut Option<Constants>) -> Check {
    let k = nn3();
    let reps = 100_000;
    let horizon = 50.0;
    let oracle = gamma_e_oracle();
    let g = estimate_gamma_e(&k, horizon, reps, derive_seed(SEED, &[5, 0]))?;
    let gx = g.extrapolated;
    let gamma_ok = (gx.estimate - 0.659).abs() <= 0.01 && (oracle - 0.659).abs() <= 0.001 && g.stabilizing();

    let bd = estimate_beta_delta(&k, horizon, reps, derive_seed(SEED, &[5, 1]))?;
    let ordered = bd.containment_violations == 0
        && (0..3).all(|i| bd.beta.raw[i].estimate <= bd.delta.raw[i].estimate)
        && bd.beta.extrapolated.estimate <= bd.delta.extrapolated.estimate;

    let a = [Site::ORIGIN, e(0, 1), e(1, 2)];
    let minus: Vec<Site> = a.iter().map(|&s| Site::ORIGIN - s).collect();
    let sa = estimate_sigma_limit(&a, &k, 10.0, reps, derive_seed(SEED, &[5, 2]))?;
    let sm = estimate_sigma_limit(&minus, &k, 10.0, reps, derive_seed(SEED, &[5, 3]))?;
    let worst_z = (0..3)
        .map(|i| difference_z(sa.raw[i].estimate, sa.raw[i].se, sm.raw[i].estimate, sm.raw[i].se).z.abs())
        .fold(0.0, f64::max);
    let reflection = worst_z <= 3.0;

    *out = Some(Constants {
        gamma: (gx.estimate, gx.se),
        beta: (bd.beta.extrapolated.estimate, bd.beta.extrapolated.se),
        delta: (bd.delta.extrapolated.estimate, bd.delta.extrapolated.se),
    });
    Ok((
        gamma_ok && ordered && reflection,
        format!(
            "gamma_e ladder {:.4}/{:.4}/{:.4} -> {:.4} ± {:.4} (Watson oracle {oracle:.5}); beta {:.4} ± {:.4} <= delta {:.4} ± {:.4}, {} containment violations; sigma(A) vs sigma(-A) worst |z| = {worst_z:.2}",
            g.raw[0].estimate,
            g.raw[1].estimate,
            g.raw[2].estimate,
            gx.estimate,
            gx.se,
            bd.beta.extrapolated.estimate,
            bd.beta.extrapolated.se,
            bd.delta.extrapolated.estimate,
            bd.delta.extrapolated.se,
            bd.containment_violations
        ),
    ))
}

// 6-8. drift and branching along the N ladder

fn ladder(model: &str, targets: (f64, f64, f64, f64, f64), horizon: f64, seed: u64) -> Result<ConvergenceReport> {
    let (theta, theta_se, b, b_se, sigma2) = targets;
    let cfg = ExperimentConfig::from_toml(&format!(
        "[model]\n{model}\nn_ladder = [25, 100, 400]\ninitial = {{ kind = \"uniform_mass\", mass = 1.0, macro_half_width = 1.0, seed = 11 }}\n\
         [run]\nhorizon = {horizon}\nreplicas = 500\n\
         [analysis]\nalpha = 0.05\ntargets = {{ theta = {theta:?}, theta_se = {theta_se:?}, b = {b:?}, b_se = {b_se:?}, sigma2 = {sigma2:?} }}\n"
    ))?;
    verify_convergence(&cfg, seed)
}

fn describe(points: &[LadderPoint], get: fn(&LadderPoint) -> (f64, f64)) -> String {
    points
        .iter()
        .map(|p| {
            let (v, s) = get(p);
            format!("N={}: {v:.3} ± {s:.3}", p.n)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn drift(p: &LadderPoint) -> (f64, f64) {
    (p.drift, p.drift_se)
}

fn branching(p: &LadderPoint) -> (f64, f64) {
    (p.branching, p.branching_se)
}

fn verdict(rep: &ConvergenceReport, quantity: &str) -> bool {
    rep.verdicts.iter().any(|v| v.quantity == quantity && v.verdict.ok())
}

fn verdict_name(rep: &ConvergenceReport, quantity: &str) -> String {
    rep.verdicts.iter().find(|v| v.quantity == quantity).map_or("missing".into(), |v| format!("{:?}", v.verdict))
}

/// Final ladder point within `k` pooled standard errors of `target`.
fn final_within(points: &[LadderPoint], get: fn(&LadderPoint) -> (f64, f64), target: (f64, f64), k: f64) -> bool {
    let (v, s) = get(points.last().expect("nonempty ladder"));
    (v - target.0).abs() <= k * (s * s + target.1 * target.1).sqrt()
}

struct LongRange {
    range: u32,
    theta0: f64,
    report: ConvergenceReport,
}

fn long_range_series() -> Result<Vec<LongRange>> {
    let mut out = Vec::new();
    for (i, range) in [4u32, 8].into_iter().enumerate() {
        let sigma2 = KernelSpec::long_range(2, range)?.sigma2();
        for (j, theta0) in [-2.0f64, 2.0].into_iter().enumerate() {
            let model = format!(
                "kernel = {{ variant = \"long_range\", d = 2, M_N = {range} }}\ntable = {{ kind = \"lv\", theta0 = {theta0:?}, theta1 = 4.0 }}"
            );
            let report = ladder(&model, (-4.0, 0.0, 2.0, 0.0, sigma2), 0.5, derive_seed(SEED, &[6, i as u64, j as u64]))?;
            out.push(LongRange { range, theta0, report });
        }
    }
    Ok(out)
}

fn long_range_drift(series: &[LongRange]) -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for s in series {
        let v = verdict(&s.report, "drift");
        ok &= v;
        detail.push(format!(
            "M={} theta0={}: {} [{}]",
            s.range,
            s.theta0,
            describe(&s.report.ladder, drift),
            verdict_name(&s.report, "drift")
        ));
    }
    for pair in series.chunks(2) {
        let (a, b) = (pair[0].report.ladder.last().expect("ladder"), pair[1].report.ladder.last().expect("ladder"));
        let z = difference_z(a.drift, a.drift_se, b.drift, b.drift_se);
        ok &= z.passes(0.05);
        detail.push(format!("M={} theta0 effect at N=400: z = {:.2}", pair[0].range, z.z));
    }
    Ok((ok, detail.join("; ")))
}

struct FixedKernel {
    label: &'static str,
    drift_target: (f64, f64),
    branching_target: (f64, f64),
    report: ConvergenceReport,
}

fn fixed_kernel_series(c: &Constants) -> Result<Vec<FixedKernel>> {
    let mut out = Vec::new();
    let b = (2.0 * c.gamma.0, 2.0 * c.gamma.1);
    let cases = [("lv(6,0)", 6.0, 0.0, (6.0 * c.beta.0, 6.0 * c.beta.1)), ("lv(0,6)", 0.0, 6.0, (-6.0 * c.delta.0, 6.0 * c.delta.1))];
    for (i, (label, theta0, theta1, target)) in cases.into_iter().enumerate() {
        let model = format!(
            "kernel = {{ variant = \"nearest_neighbor\", d = 3 }}\ntable = {{ kind = \"lv\", theta0 = {theta0:?}, theta1 = {theta1:?} }}"
        );
        let report = ladder(&model, (target.0, target.1, b.0, b.1, 1.0 / 3.0), 1.0, derive_seed(SEED, &[7, i as u64]))?;
        out.push(FixedKernel { label, drift_target: target, branching_target: b, report });
    }
    Ok(out)
}

fn fixed_kernel_drift(series: &[FixedKernel]) -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for s in series {
        let pass = verdict(&s.report, "drift") && final_within(&s.report.ladder, drift, s.drift_target, 3.0);
        ok &= pass;
        detail.push(format!(
            "{} target {:.3} ± {:.3}: {} [{}]",
            s.label,
            s.drift_target.0,
            s.drift_target.1,
            describe(&s.report.ladder, drift),
            verdict_name(&s.report, "drift")
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn branching_rate(fixed: &[FixedKernel], long: &[LongRange]) -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for s in fixed {
        let pass = verdict(&s.report, "branching") && final_within(&s.report.ladder, branching, s.branching_target, 3.0);
        ok &= pass;
        detail.push(format!(
            "{} target {:.3}: {} [{}]",
            s.label,
            s.branching_target.0,
            describe(&s.report.ladder, branching),
            verdict_name(&s.report, "branching")
        ));
    }
    for s in long {
        let pass = verdict(&s.report, "branching") && final_within(&s.report.ladder, branching, (2.0, 0.0), 3.0);
        ok &= pass;
        detail.push(format!(
            "M={} theta0={} target 2: {} [{}]",
            s.range,
            s.theta0,
            describe(&s.report.ladder, branching),
            verdict_name(&s.report, "branching")
        ));
    }
    Ok((ok, detail.join("; ")))
}

// 9. perturbation statistic

fn perturbation_statistic() -> Check {
    let k = nn3();
    let table = PerturbationTable::lv(&k, 6.0, 0.0);
    let phi = TestFn::GaussianBump { center: vec![0.0; 3], width: 0.5, amplitude: 1.0 };
    let sets: [Vec<Site>; 2] = [vec![e(0, 1)], vec![e(0, 1), e(1, 1)]];
    let ladder = [25u64, 100, 400];
    let reps = 200u64;
    let horizon = 1.0;
    let mut stats: Vec<Vec<Summary>> = vec![Vec::new(); sets.len()];
    let mut sigmas: Vec<Vec<f64>> = vec![Vec::new(); sets.len()];
    for &n in &ladder {
        let eps = (n as f64).powf(-0.25);
        let sig: Vec<f64> = sets
            .iter()
            .enumerate()
            .map(|(i, a)| estimate_sigma_n(a, &k, n, eps, 100_000, derive_seed(SEED, &[9, n, i as u64])).map(|t| t.estimate))
            .collect::<Result<_>>()?;
        let model = Arc::new(RateModel::perturbed(k.clone(), n, table.clone())?);
        let sc = svlv::ScalingParams::new(n, &k)?;
        let initial = svlv::InitialSpec::UniformMass { mass: 1.0, macro_half_width: 1.0, seed: 11 }.build(3, Some(&sc))?;
        let squares: Vec<[f64; 2]> = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<[f64; 2]> {
                let mut obs: Vec<PerturbationStatistic> = sets
                    .iter()
                    .zip(&sig)
                    .map(|(a, &s)| PerturbationStatistic::new(a, phi.clone(), s, &k, n))
                    .collect::<Result<_>>()?;
                let mut engine = make_engine(EngineChoice::Dense, Arc::clone(&model), initial.clone(), stream(SEED, &[9, n, 1000 + r]))?;
                let (a, b) = obs.split_at_mut(1);
                run(engine.as_mut(), horizon, &mut [&mut a[0] as &mut dyn Observer, &mut b[0]], u64::MAX)?;
                Ok([obs[0].integral().powi(2), obs[1].integral().powi(2)])
            })
            .collect::<Result<_>>()?;
        for i in 0..sets.len() {
            stats[i].push(Summary::of(&squares.iter().map(|s| s[i]).collect::<Vec<_>>()));
            sigmas[i].push(sig[i]);
        }
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for (i, a) in ["{e}", "{e,e'}"].iter().enumerate() {
        let s = &stats[i];
        let decreasing = s.windows(2).all(|w| w[1].mean < w[0].mean);
        let separated = s[s.len() - 1].mean + s[s.len() - 1].se < s[0].mean - s[0].se;
        ok &= decreasing && separated;
        let cells: Vec<String> = ladder
            .iter()
            .zip(s)
            .zip(&sigmas[i])
            .map(|((n, x), sg)| format!("N={n}: {:.3e} ± {:.1e} (sigma_N = {sg:.4})", x.mean, x.se))
            .collect();
        detail.push(format!("A={a}: {}", cells.join(", ")));
    }
    Ok((ok, detail.join("; ")))
}

// 10. duality

fn duality() -> Check {
    let k = KernelSpec::nearest_neighbor(2)?;
    let n = 10u64;
    let model = Arc::new(RateModel::voter(k.clone(), n)?);
    let initial = Configuration::from_sites(2, svlv::configuration::box_sites(2, 2));
    let reps = 20_000u64;
    let s = |x: i32, y: i32| Site::new(&[x, y]).expect("2d site");
    let cases: [(Vec<Site>, Site, f64); 5] = [
        (vec![Site::ORIGIN], s(2, 0), 0.05),
        (vec![Site::ORIGIN, s(1, 0)], s(1, 1), 0.1),
        (vec![Site::ORIGIN, s(0, 1)], s(2, 2), 0.1),
        (vec![Site::ORIGIN, s(1, 0), s(0, 1)], s(0, 0), 0.2),
        (vec![s(1, 0), s(-1, 0)], s(2, 0), 0.1),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (c, (set, x, t)) in cases.iter().enumerate() {
        let hits: Vec<bool> = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<bool> {
                let mut e = make_engine(EngineChoice::Dense, Arc::clone(&model), initial.clone(), stream(SEED, &[tags::DUALITY, c as u64, r]))?;
                run(e.as_mut(), *t, &mut [], u64::MAX)?;
                Ok(set.iter().all(|&a| e.config().contains(*x + a)))
            })
            .collect::<Result<_>>()?;
        let forward = hits.iter().filter(|&&h| h).count() as u64;
        let dual = dual_probability(&initial, set, *x, &k, n as f64, *t, reps, derive_seed(SEED, &[tags::DUALITY, c as u64]))?;
        let dual_hits = (dual.estimate * reps as f64).round() as u64;
        let z = two_proportion_z(forward, reps, dual_hits, reps);
        ok &= z.passes(0.01);
        detail.push(format!("case {}: voter {:.4} vs walks {:.4} (p = {:.3})", c + 1, forward as f64 / reps as f64, dual.estimate, z.p_value));
    }
    Ok((ok, detail.join("; ")))
}

// 11. Feller diffusion

/// Mean and variance with standard errors.
fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let c2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let c4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    (m, (c2 / n).sqrt(), c2, ((c4 - c2 * c2).max(0.0) / n).sqrt())
}

fn feller() -> Check {
    let z0 = 1.0;
    let t = 1.0;
    let mut ok = true;
    let mut worst_euler = 0.0f64;
    let mut worst_exact = 0.0f64;
    for (i, b) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        for (j, theta) in [-1.0, 0.0, 1.0].into_iter().enumerate() {
            let (mean, var) = feller_moments(z0, t, b, theta);
            let cell = (3 * i + j) as u64;
            let euler: Vec<f64> = (0..20_000u64)
                .into_par_iter()
                .map(|r| simulate_feller_euler(z0, t, b, theta, 1e-3, &mut stream(SEED, &[tags::FELLER, cell, 0, r])))
                .collect::<Result<_>>()?;
            let exact: Vec<f64> = (0..100_000u64)
                .into_par_iter()
                .map(|r| simulate_feller(z0, t, b, theta, &mut stream(SEED, &[tags::FELLER, cell, 1, r])))
                .collect::<Result<_>>()?;
            for (sample, worst) in [(&euler, &mut worst_euler), (&exact, &mut worst_exact)] {
                let (m, m_se, v, v_se) = moments(sample);
                let z = ((m - mean) / m_se).abs().max(((v - var) / v_se).abs());
                *worst = worst.max(z);
            }
        }
    }
    ok &= worst_euler <= 4.0 && worst_exact <= 4.0;

    let target = extinction_probability(1.0, 1.0, 2.0, 0.0);
    let fine: Vec<f64> = (0..20_000u64)
        .into_par_iter()
        .map(|r| simulate_feller_euler(1.0, 1.0, 2.0, 0.0, 1e-4, &mut stream(SEED, &[tags::FELLER, 100, r])))
        .collect::<Result<_>>()?;
    let p_fine = fine.iter().filter(|&&z| z == 0.0).count() as f64 / fine.len() as f64;
    let se_fine = (p_fine * (1.0 - p_fine) / fine.len() as f64).sqrt();
    let validated = (target - (-1f64).exp()).abs() < 1e-15 && (p_fine - target).abs() <= 4.0 * se_fine;
    let paths: Vec<f64> = (0..100_000u64)
        .into_par_iter()
        .map(|r| simulate_feller(1.0, 1.0, 2.0, 0.0, &mut stream(SEED, &[tags::FELLER, 101, r])))
        .collect::<Result<_>>()?;
    let p = paths.iter().filter(|&&z| z == 0.0).count() as f64 / paths.len() as f64;
    let se = (p * (1.0 - p) / paths.len() as f64).sqrt();
    ok &= validated && (p - target).abs() <= 3.0 * se;
    Ok((
        ok,
        format!(
            "worst moment |z|: Euler {worst_euler:.2}, exact {worst_exact:.2}; extinction exact {p:.4} ± {se:.4}, Euler(1e-4) {p_fine:.4} ± {se_fine:.4}, formula {target:.4}"
        ),
    ))
}

// 12. generator gap

fn generator_gap_decreases() -> Check {
    let k = nn3();
    let phi = TestFn::GaussianBump { center: vec![0.0; 3], width: 0.5, amplitude: 1.0 };
    let ticks: Vec<f64> = (-6..=6).map(|i| f64::from(i) * 0.25).collect();
    let mut grid = Vec::new();
    for &a in &ticks {
        for &b in &ticks {
            for &c in &ticks {
                grid.push(vec![a, b, c]);
            }
        }
    }
    let gaps: Vec<f64> = [25u64, 100, 400].iter().map(|&n| generator_gap(&k, n, &phi, &grid)).collect::<Result<_>>()?;
    let ok = gaps.windows(2).all(|w| w[1] < w[0]);
    Ok((ok, format!("sup gap N=25: {:.3e}, N=100: {:.3e}, N=400: {:.3e}", gaps[0], gaps[1], gaps[2])))
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut check = |id: u32, name: &str, f: &mut dyn FnMut() -> Check| {
        if !criterion(id, name, f) {
            failed.push(id);
        }
    };
    check(1, "decomposition identity", &mut decomposition_identity);
    check(2, "engine oracle equivalence", &mut engine_oracle);
    check(3, "voter mass martingale", &mut voter_martingale);
    check(4, "pathwise domination", &mut domination);
    let mut constants = None;
    check(5, "coalescing constants", &mut || coalescing_constants(&mut constants));
    let mut long = None;
    check(6, "long-range drift", &mut || {
        let series = long_range_series()?;
        let verdict = long_range_drift(&series);
        long = Some(series);
        verdict
    });
    let mut fixed = None;
    check(7, "fixed-kernel drift", &mut || {
        let c = constants.ok_or_else(|| Error::InvalidParameter("criterion 5 produced no constants".into()))?;
        let series = fixed_kernel_series(&c)?;
        let verdict = fixed_kernel_drift(&series);
        fixed = Some(series);
        verdict
    });
    check(8, "branching rate", &mut || match (&fixed, &long) {
        (Some(f), Some(l)) => branching_rate(f, l),
        _ => Err(Error::InvalidParameter("the ladder runs of criteria 6 and 7 did not complete".into())),
    });
    check(9, "perturbation statistic", &mut perturbation_statistic);
    check(10, "duality", &mut duality);
    check(11, "Feller reference", &mut feller);
    check(12, "generator gap", &mut generator_gap_decreases);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
