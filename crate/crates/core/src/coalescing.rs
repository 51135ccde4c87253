//! Coalescing random walks, the dual of the voter model, and Monte Carlo
//! estimators for the escape and coalescence constants.
//!
//! Infinite-time events are approximated on a horizon ladder `T, 2T, 4T`
//! driven by common random numbers: one path per replicate is run to `4T`
//! and read off at each horizon, so per-replicate indicators are exactly
//! monotone in the horizon. Tails decay like `T^{-1/2}` in `d = 3`, so the
//! extrapolated value is `2 P(4T) - P(T)`.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{KernelSpec, Site};
use crate::perturbation::{canonical_set, TableEntry};
use crate::rng::stream;

/// A merge: the class of `absorbed` joined the class of `into` at `time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub time: f64,
    pub absorbed: usize,
    pub into: usize,
}

/// Labeled walkers with a union-find partition. Every class moves as one
/// walker at `rate`; after each jump the jumping class merges with any class
/// on its landing site.
#[derive(Clone, Debug)]
pub struct CoalescingSystem<'k> {
    kernel: &'k KernelSpec,
    rate: f64,
    time: f64,
    parent: Vec<usize>,
    pos: Vec<Site>,
    roots: Vec<usize>,
    merges: Vec<Merge>,
}

impl<'k> CoalescingSystem<'k> {
    /// Walker `i` starts at `starts[i]`. Walkers sharing a start are merged at time 0.
    pub fn new(kernel: &'k KernelSpec, rate: f64, starts: &[Site]) -> Result<CoalescingSystem<'k>> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidParameter(format!("walk rate {rate} must be positive")));
        }
        let mut sys = CoalescingSystem {
            kernel,
            rate,
            time: 0.0,
            parent: (0..starts.len()).collect(),
            pos: starts.to_vec(),
            roots: Vec::with_capacity(starts.len()),
            merges: Vec::new(),
        };
        for (i, &s) in starts.iter().enumerate() {
            match sys.roots.iter().copied().find(|&r| sys.pos[r] == s) {
                Some(r) => {
                    sys.parent[i] = r;
                    sys.merges.push(Merge { time: 0.0, absorbed: i, into: r });
                }
                None => sys.roots.push(i),
            }
        }
        Ok(sys)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn walkers(&self) -> usize {
        self.parent.len()
    }

    /// Number of classes.
    pub fn classes(&self) -> usize {
        self.roots.len()
    }

    pub fn find(&self, mut label: usize) -> usize {
        while self.parent[label] != label {
            label = self.parent[label];
        }
        label
    }

    pub fn same_class(&self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    /// Current position of walker `label`.
    pub fn position(&self, label: usize) -> Site {
        self.pos[self.find(label)]
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// One jump if it happens no later than `until`; returns the merge it
    /// caused, if any. Time is set to `until` when no jump fits.
    fn jump<R: Rng + ?Sized>(&mut self, until: f64, rng: &mut R) -> Option<Option<Merge>> {
        let total = self.rate * self.roots.len() as f64;
        let w: f64 = rng.sample(Exp1);
        let t = self.time + w / total;
        if t > until {
            self.time = until.max(self.time);
            return None;
        }
        self.time = t;
        let i = rng.random_range(0..self.roots.len());
        let r = self.roots[i];
        let to = self.pos[r] + self.kernel.sample_step(rng);
        self.pos[r] = to;
        let hit = self.roots.iter().enumerate().find(|&(j, &q)| j != i && self.pos[q] == to).map(|(_, &q)| q);
        Some(hit.map(|q| {
            self.parent[r] = q;
            self.roots.swap_remove(i);
            let m = Merge { time: t, absorbed: r, into: q };
            self.merges.push(m);
            m
        }))
    }

    /// Runs to `until`; returns the number of merges.
    pub fn advance<R: Rng + ?Sized>(&mut self, until: f64, rng: &mut R) -> usize {
        self.advance_while(until, rng, |_, _| true)
    }

    /// Runs to `until`, stopping early (at the merge time) as soon as
    /// `keep_going` returns false after a merge.
    pub fn advance_while<R: Rng + ?Sized, F: FnMut(&Self, &Merge) -> bool>(
        &mut self,
        until: f64,
        rng: &mut R,
        mut keep_going: F,
    ) -> usize {
        let mut count = 0;
        if until <= self.time {
            return 0;
        }
        while let Some(step) = self.jump(until, rng) {
            if let Some(m) = step {
                count += 1;
                if !keep_going(self, &m) {
                    break;
                }
            }
        }
        count
    }

    /// Time at which all walkers first formed one class, if that has happened.
    pub fn coalescence_time(&self) -> Option<f64> {
        if self.roots.len() <= 1 {
            Some(self.merges.last().map_or(0.0, |m| m.time))
        } else {
            None
        }
    }
}

/// Monte Carlo estimate of a probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauEstimate {
    pub estimate: f64,
    pub se: f64,
    pub reps: u64,
    pub horizon: f64,
}

impl TauEstimate {
    pub fn exact(value: f64, horizon: f64) -> TauEstimate {
        TauEstimate { estimate: value, se: 0.0, reps: 0, horizon }
    }

    fn from_counts(hits: u64, reps: u64, horizon: f64) -> TauEstimate {
        let p = hits as f64 / reps as f64;
        TauEstimate { estimate: p, se: (p * (1.0 - p) / reps as f64).sqrt(), reps, horizon }
    }

    fn from_values(values: &[f64], horizon: f64) -> TauEstimate {
        let s = crate::stats::Summary::of(values);
        TauEstimate { estimate: s.mean, se: s.se, reps: values.len() as u64, horizon }
    }
}

/// Estimates on the ladder `T, 2T, 4T` from common random numbers, with the
/// `T^{-1/2}` extrapolation `2 P(4T) - P(T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderEstimate {
    pub horizons: [f64; 3],
    pub raw: [TauEstimate; 3],
    pub extrapolated: TauEstimate,
    /// `(min, max)` of the raw ladder values.
    pub bracket: (f64, f64),
}

impl LadderEstimate {
    fn from_indicators(horizon: f64, ind: &[[bool; 3]]) -> LadderEstimate {
        let horizons = [horizon, 2.0 * horizon, 4.0 * horizon];
        let reps = ind.len() as u64;
        let raw: [TauEstimate; 3] =
            std::array::from_fn(|k| TauEstimate::from_counts(ind.iter().filter(|v| v[k]).count() as u64, reps, horizons[k]));
        let rich: Vec<f64> = ind.iter().map(|v| 2.0 * f64::from(u8::from(v[2])) - f64::from(u8::from(v[0]))).collect();
        let extrapolated = TauEstimate::from_values(&rich, f64::INFINITY);
        let lo = raw.iter().map(|r| r.estimate).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r.estimate).fold(f64::NEG_INFINITY, f64::max);
        LadderEstimate { horizons, raw, extrapolated, bracket: (lo, hi) }
    }

    /// True when successive ladder increments shrink in absolute value.
    pub fn stabilizing(&self) -> bool {
        let d1 = (self.raw[1].estimate - self.raw[0].estimate).abs();
        let d2 = (self.raw[2].estimate - self.raw[1].estimate).abs();
        d2 <= d1
    }
}

fn check_reps(reps: u64) -> Result<()> {
    if reps == 0 {
        return Err(Error::InvalidParameter("at least one replicate is required".into()));
    }
    Ok(())
}

fn per_replicate<T: Send, F: Fn(u64, &mut crate::simulator::SimRng) -> T + Sync>(seed: u64, tag: u64, reps: u64, f: F) -> Vec<T> {
    (0..reps).into_par_iter().map(|r| f(r, &mut stream(seed, &[tag, r]))).collect()
}

const TAG_TAU: u64 = 0x7a0;
const TAG_GAMMA: u64 = 0x7a1;
const TAG_BETA: u64 = 0x7a2;
const TAG_GAMMA_N: u64 = 0x7a3;
const TAG_SIGMA: u64 = 0x7a4;
const TAG_DUAL: u64 = 0x7a5;
const TAG_WALK: u64 = 0x7a6;

fn distinct(set: &[Site]) -> Vec<Site> {
    canonical_set(set)
}

/// `P(tau(A) <= t)` for walkers at `rate` started from the distinct points of `A`.
/// Sets with at most one point give exactly 1.
pub fn estimate_tau_leq(set: &[Site], kernel: &KernelSpec, rate: f64, t: f64, reps: u64, seed: u64) -> Result<TauEstimate> {
    check_reps(reps)?;
    let starts = distinct(set);
    if starts.len() <= 1 {
        return Ok(TauEstimate::exact(1.0, t));
    }
    CoalescingSystem::new(kernel, rate, &starts)?;
    let hits = per_replicate(seed, TAG_TAU, reps, |_, rng| {
        let mut sys = CoalescingSystem::new(kernel, rate, &starts).expect("validated");
        sys.advance_while(t, rng, |s, _| s.classes() > 1);
        sys.classes() == 1
    });
    Ok(TauEstimate::from_counts(hits.iter().filter(|&&h| h).count() as u64, reps, t))
}

/// `sigma(A) = P(tau(A) < infinity)` for rate-1 walks, from the ladder
/// `P(tau(A) <= T), P(tau(A) <= 2T), P(tau(A) <= 4T)`.
pub fn estimate_sigma_limit(set: &[Site], kernel: &KernelSpec, horizon: f64, reps: u64, seed: u64) -> Result<LadderEstimate> {
    check_reps(reps)?;
    let starts = distinct(set);
    if starts.len() <= 1 {
        return Ok(LadderEstimate::from_indicators(horizon, &[[true; 3]]));
    }
    CoalescingSystem::new(kernel, 1.0, &starts)?;
    let ind = per_replicate(seed, TAG_SIGMA, reps, |_, rng| {
        let mut sys = CoalescingSystem::new(kernel, 1.0, &starts).expect("validated");
        sys.advance_while(4.0 * horizon, rng, |s, _| s.classes() > 1);
        let tau = sys.coalescence_time().unwrap_or(f64::INFINITY);
        [tau <= horizon, tau <= 2.0 * horizon, tau <= 4.0 * horizon]
    });
    Ok(LadderEstimate::from_indicators(horizon, &ind))
}

/// `gamma_e = sum_e p(e) P(tau(0, e) = infinity)`: `e ~ p`, rate-1 walks, ladder on `P(tau > T)`.
pub fn estimate_gamma_e(kernel: &KernelSpec, horizon: f64, reps: u64, seed: u64) -> Result<LadderEstimate> {
    check_reps(reps)?;
    let ind = per_replicate(seed, TAG_GAMMA, reps, |_, rng| {
        let e = kernel.sample_step(rng);
        let mut sys = CoalescingSystem::new(kernel, 1.0, &[Site::ORIGIN, e]).expect("valid rate");
        sys.advance_while(4.0 * horizon, rng, |_, _| false);
        let tau = sys.coalescence_time().unwrap_or(f64::INFINITY);
        [tau > horizon, tau > 2.0 * horizon, tau > 4.0 * horizon]
    });
    Ok(LadderEstimate::from_indicators(horizon, &ind))
}

/// Escape constants from the three-walk system `{0, e, e'}` with `e, e' ~ p`
/// independent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaDelta {
    /// `P(tau(e, e') < inf, tau(0, e) = tau(0, e') = inf)`.
    pub beta: LadderEstimate,
    /// `P(tau(0, e) = tau(0, e') = inf)`.
    pub delta: LadderEstimate,
    /// Replicates (at any horizon) with the beta event but not the delta event. Always 0.
    pub containment_violations: u64,
}

pub fn estimate_beta_delta(kernel: &KernelSpec, horizon: f64, reps: u64, seed: u64) -> Result<BetaDelta> {
    check_reps(reps)?;
    let hs = [horizon, 2.0 * horizon, 4.0 * horizon];
    let rows = per_replicate(seed, TAG_BETA, reps, |_, rng| {
        let e = kernel.sample_step(rng);
        let e2 = kernel.sample_step(rng);
        let mut sys = CoalescingSystem::new(kernel, 1.0, &[Site::ORIGIN, e, e2]).expect("valid rate");
        let mut t12 = if sys.same_class(1, 2) { 0.0 } else { f64::INFINITY };
        let mut t0 = if sys.same_class(0, 1) || sys.same_class(0, 2) { 0.0 } else { f64::INFINITY };
        if t0 > 0.0 {
            sys.advance_while(hs[2], rng, |s, m| {
                if t12.is_infinite() && s.same_class(1, 2) {
                    t12 = m.time;
                }
                if s.same_class(0, 1) || s.same_class(0, 2) {
                    t0 = m.time;
                    return false;
                }
                true
            });
        }
        let delta: [bool; 3] = std::array::from_fn(|k| t0 > hs[k]);
        let beta: [bool; 3] = std::array::from_fn(|k| t0 > hs[k] && t12 <= hs[k]);
        (beta, delta)
    });
    let beta: Vec<[bool; 3]> = rows.iter().map(|r| r.0).collect();
    let delta: Vec<[bool; 3]> = rows.iter().map(|r| r.1).collect();
    let containment_violations = rows.iter().filter(|(b, d)| (0..3).any(|k| b[k] && !d[k])).count() as u64;
    Ok(BetaDelta {
        beta: LadderEstimate::from_indicators(horizon, &beta),
        delta: LadderEstimate::from_indicators(horizon, &delta),
        containment_violations,
    })
}

/// `gamma_N = sum_e p_N(e) P(tau_N({0, e}) > eps)` for rate-`N` walks.
pub fn estimate_gamma_n(kernel: &KernelSpec, n: u64, eps: f64, reps: u64, seed: u64) -> Result<TauEstimate> {
    check_reps(reps)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidParameter(format!("eps* = {eps} must be nonnegative")));
    }
    let rate = n as f64;
    let hits = per_replicate(seed, TAG_GAMMA_N, reps, |_, rng| {
        let e = kernel.sample_step(rng);
        let mut sys = CoalescingSystem::new(kernel, rate, &[Site::ORIGIN, e]).expect("valid rate");
        sys.advance_while(eps, rng, |_, _| false);
        sys.classes() == 2
    });
    Ok(TauEstimate::from_counts(hits.iter().filter(|&&h| h).count() as u64, reps, eps))
}

/// `sigma_N(A) = P(tau_N(A) <= eps)` for rate-`N` walks.
pub fn estimate_sigma_n(set: &[Site], kernel: &KernelSpec, n: u64, eps: f64, reps: u64, seed: u64) -> Result<TauEstimate> {
    estimate_tau_leq(set, kernel, n as f64, eps, reps, seed)
}

/// Difference-walk oracle: `P(hit 0 by t)` for a single walk at `rate` started at `start`.
pub fn first_passage_leq(start: Site, kernel: &KernelSpec, rate: f64, t: f64, reps: u64, seed: u64) -> Result<TauEstimate> {
    check_reps(reps)?;
    if start.is_origin() {
        return Ok(TauEstimate::exact(1.0, t));
    }
    let hits = per_replicate(seed, TAG_WALK, reps, |_, rng| {
        let mut x = start;
        let mut time = 0.0;
        loop {
            let w: f64 = rng.sample(Exp1);
            time += w / rate;
            if time > t {
                return false;
            }
            x = x + kernel.sample_step(rng);
            if x.is_origin() {
                return true;
            }
        }
    });
    Ok(TauEstimate::from_counts(hits.iter().filter(|&&h| h).count() as u64, reps, t))
}

/// A coalescing probability with its standard error, as consumed by [`assemble_theta`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaValue {
    pub value: f64,
    pub se: f64,
}

/// The long-range limit `sigma(A) = 1{|A| <= 1}`.
pub fn sigma_long_range(set: &[Site]) -> Option<SigmaValue> {
    Some(SigmaValue { value: if distinct(set).len() <= 1 { 1.0 } else { 0.0 }, se: 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    pub se: f64,
}

/// Sets whose `sigma` [`assemble_theta`] needs: `A` when `beta(A) != 0` and
/// `A ∪ {0}` when `beta(A) + delta(A) != 0`.
pub fn required_sets(entries: &[TableEntry]) -> Vec<Vec<Site>> {
    let mut out = Vec::new();
    for e in entries {
        if e.beta != 0.0 {
            out.push(canonical_set(&e.set));
        }
        if e.beta + e.delta != 0.0 {
            out.push(with_origin(&e.set));
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn with_origin(set: &[Site]) -> Vec<Site> {
    let mut v = set.to_vec();
    v.push(Site::ORIGIN);
    canonical_set(&v)
}

/// `theta = sum_A beta(A) sigma(A) - sum_A (beta(A) + delta(A)) sigma(A ∪ {0})`,
/// with the standard error propagated from independent `sigma` estimates.
pub fn assemble_theta<F: Fn(&[Site]) -> Option<SigmaValue>>(entries: &[TableEntry], sigma: F) -> Result<ThetaEstimate> {
    let mut coef: Vec<(Vec<Site>, f64)> = Vec::new();
    let mut add = |set: Vec<Site>, c: f64| match coef.iter_mut().find(|(s, _)| *s == set) {
        Some(slot) => slot.1 += c,
        None => coef.push((set, c)),
    };
    for e in entries {
        if e.beta != 0.0 {
            add(canonical_set(&e.set), e.beta);
        }
        if e.beta + e.delta != 0.0 {
            add(with_origin(&e.set), -(e.beta + e.delta));
        }
    }
    let mut missing = Vec::new();
    let mut theta = 0.0;
    let mut var = 0.0;
    for (set, c) in &coef {
        match sigma(set) {
            Some(s) => {
                theta += c * s.value;
                var += c * c * s.se * s.se;
            }
            None => missing.push(set.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSigma(missing));
    }
    Ok(ThetaEstimate { theta, se: var.sqrt() })
}

/// Coalescing side of the duality relation:
/// `P(B_t^{x+a} ∈ xi_0 for all a ∈ A)` for rate-`rate` coalescing walks.
pub fn dual_probability(
    initial: &Configuration,
    set: &[Site],
    x: Site,
    kernel: &KernelSpec,
    rate: f64,
    t: f64,
    reps: u64,
    seed: u64,
) -> Result<TauEstimate> {
    check_reps(reps)?;
    let starts: Vec<Site> = distinct(set).iter().map(|&a| x + a).collect();
    if starts.is_empty() {
        return Ok(TauEstimate::exact(1.0, t));
    }
    CoalescingSystem::new(kernel, rate, &starts)?;
    let hits = per_replicate(seed, TAG_DUAL, reps, |_, rng| {
        let mut sys = CoalescingSystem::new(kernel, rate, &starts).expect("validated");
        sys.advance(t, rng);
        (0..starts.len()).all(|i| initial.contains(sys.position(i)))
    });
    Ok(TauEstimate::from_counts(hits.iter().filter(|&&h| h).count() as u64, reps, t))
}

/// Record format for emitted constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantRecord {
    pub constant: String,
    pub estimate: f64,
    pub se: f64,
    pub horizon: f64,
    pub reps: u64,
    pub kernel: String,
    pub seed: u64,
}

impl ConstantRecord {
    pub fn new(constant: &str, est: &TauEstimate, kernel: &KernelSpec, seed: u64) -> ConstantRecord {
        ConstantRecord {
            constant: constant.to_string(),
            estimate: est.estimate,
            se: est.se,
            horizon: est.horizon,
            reps: est.reps,
            kernel: kernel.id(),
            seed,
        }
    }
}
