//! Monotone coupling of the perturbed process `xi`, the voter model `xihat`
//! and the dominating biased voter model `xibar`.
//!
//! Site `x` rings at rate `R(x) = c(x, xi) + chat(x, xihat) + cbar(x, xibar)`.
//! On a ring a uniform mark `U` is drawn and process `pi` flips at `x` iff
//! `U R < c_pi(x)` when `pi(x) = 0`, or `U R > R - c_pi(x)` when `pi(x) = 1`.
//! Each marginal therefore flips at its own rate. If `xi(x) = xibar(x) = 0`
//! then `c <= cbar` and an up-flip of `xi` forces one of `xibar`; if both are 1
//! then `c >= cbar` and a down-flip of `xibar` forces one of `xi`; if
//! `xi(x) = 0 < xibar(x)` the up and down windows are disjoint because their
//! lengths sum to at most `R`. So `xi <= xibar` is preserved, and likewise for
//! `xihat`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;

use super::{RateModel, SimRng};
use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{KernelSpec, Site};
use crate::perturbation::PerturbationTable;

/// Index of each process in [`CoupledEvent::flips`].
pub const PERTURBED: usize = 0;
pub const VOTER: usize = 1;
pub const BIASED: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoupledEvent {
    pub time: f64,
    pub site: Site,
    /// New value per process, `None` if that process did not flip.
    pub flips: [Option<bool>; 3],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoupledStats {
    pub rings: u64,
    pub flips: [u64; 3],
}

pub struct CoupledEngine {
    models: [Arc<RateModel>; 3],
    configs: [Configuration; 3],
    time: f64,
    rng: SimRng,
    rates: rustc_hash::FxHashMap<Site, [f64; 3]>,
    tree: Vec<f64>,
    cap: usize,
    slot: rustc_hash::FxHashMap<Site, usize>,
    sites: Vec<Site>,
    free: Vec<usize>,
    dep: Vec<Site>,
    stats: CoupledStats,
    k_delta: f64,
    c_bar: f64,
}

/// `phat(a) = (1 / c_beta) sum_{A contains a} beta^+(A) / |A|`.
pub fn phat(table: &PerturbationTable) -> Vec<(Site, f64)> {
    let c_beta = table.c_beta();
    let mut acc: rustc_hash::FxHashMap<Site, f64> = Default::default();
    if c_beta <= 0.0 {
        return Vec::new();
    }
    for e in table.entries() {
        if e.beta > 0.0 && !e.set.is_empty() {
            let w = e.beta / e.set.len() as f64 / c_beta;
            for &a in &e.set {
                *acc.entry(a).or_insert(0.0) += w;
            }
        }
    }
    let mut v: Vec<(Site, f64)> = acc.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

/// `pbar = (k_delta p + c_beta phat) / (k_delta + c_beta)`; `None` when both weights vanish.
pub fn pbar(kernel: &KernelSpec, table: &PerturbationTable, k_delta: f64) -> Result<Option<KernelSpec>> {
    let c_beta = table.c_beta();
    let c_bar = c_beta + k_delta;
    if c_bar <= 0.0 {
        return Ok(None);
    }
    let mut acc: rustc_hash::FxHashMap<Site, f64> = Default::default();
    for (a, p) in kernel.iter() {
        *acc.entry(a).or_insert(0.0) += k_delta * p / c_bar;
    }
    for (a, p) in phat(table) {
        *acc.entry(a).or_insert(0.0) += c_beta * p / c_bar;
    }
    let mut v: Vec<(Site, f64)> = acc.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    // renormalize away rounding so the law check passes
    let s: f64 = v.iter().map(|e| e.1).sum();
    for e in v.iter_mut() {
        e.1 /= s;
    }
    KernelSpec::law(kernel.dim(), &v).map(Some)
}

impl CoupledEngine {
    /// Builds the three processes from the perturbed model and a `k_delta`
    /// certificate. All start from `config`.
    pub fn new(perturbed: Arc<RateModel>, k_delta: f64, config: Configuration, rng: SimRng) -> Result<CoupledEngine> {
        perturbed.check_config(&config)?;
        let n = perturbed.n();
        let speed = perturbed.speed() - k_delta;
        if !(speed > 0.0) {
            return Err(Error::InvalidParameter(format!("coupling needs N > k_delta (N = {n}, k_delta = {k_delta})")));
        }
        let kernel = perturbed.kernel().clone();
        let table = perturbed.table();
        let c_bar = table.c_beta() + k_delta;
        let domain = perturbed.domain();
        let voter = RateModel::new(kernel.clone(), n, speed, PerturbationTable::zero(kernel.dim()), domain)?;
        let biased = match pbar(&kernel, table, k_delta)? {
            Some(pb) => RateModel::new(kernel.clone(), n, speed, PerturbationTable::bias(&pb, c_bar), domain)?,
            None => voter.clone(),
        };
        let mut dep: Vec<Site> = Vec::new();
        for m in [&*perturbed, &voter, &biased] {
            dep.extend_from_slice(m.dependence());
        }
        dep.sort_unstable();
        dep.dedup();
        let mut e = CoupledEngine {
            models: [perturbed, Arc::new(voter), Arc::new(biased)],
            configs: [config.clone(), config.clone(), config],
            time: 0.0,
            rng,
            rates: Default::default(),
            tree: vec![0.0; 128],
            cap: 64,
            slot: Default::default(),
            sites: Vec::new(),
            free: Vec::new(),
            dep,
            stats: CoupledStats::default(),
            k_delta,
            c_bar,
        };
        let mut cands: Vec<Site> = Vec::new();
        for (m, c) in e.models.iter().zip(&e.configs) {
            cands.extend(m.candidates(c));
        }
        cands.sort_unstable();
        cands.dedup();
        for x in cands {
            e.refresh(x)?;
        }
        Ok(e)
    }

    pub fn config(&self, which: usize) -> &Configuration {
        &self.configs[which]
    }

    pub fn model(&self, which: usize) -> &RateModel {
        &self.models[which]
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn stats(&self) -> &CoupledStats {
        &self.stats
    }

    pub fn k_delta(&self) -> f64 {
        self.k_delta
    }

    /// `cbar = c_beta + k_delta`.
    pub fn c_bar(&self) -> f64 {
        self.c_bar
    }

    fn set_leaf(&mut self, i: usize, v: f64) {
        let mut k = self.cap + i;
        self.tree[k] = v;
        while k > 1 {
            k >>= 1;
            self.tree[k] = self.tree[2 * k] + self.tree[2 * k + 1];
        }
    }

    fn refresh(&mut self, x: Site) -> Result<()> {
        let mut r = [0.0; 3];
        for (k, rk) in r.iter_mut().enumerate() {
            *rk = self.models[k].rate(&self.configs[k], x)?;
        }
        let total = r[0] + r[1] + r[2];
        match self.slot.get(&x).copied() {
            Some(i) if total > 0.0 => {
                self.set_leaf(i, total);
                self.rates.insert(x, r);
            }
            Some(i) => {
                self.set_leaf(i, 0.0);
                self.slot.remove(&x);
                self.rates.remove(&x);
                self.free.push(i);
            }
            None if total > 0.0 => {
                let i = match self.free.pop() {
                    Some(i) => {
                        self.sites[i] = x;
                        i
                    }
                    None => {
                        self.sites.push(x);
                        if self.sites.len() > self.cap {
                            let old = self.cap;
                            self.cap *= 2;
                            let mut t = vec![0.0; 2 * self.cap];
                            t[self.cap..self.cap + old].copy_from_slice(&self.tree[old..2 * old]);
                            for k in (1..self.cap).rev() {
                                t[k] = t[2 * k] + t[2 * k + 1];
                            }
                            self.tree = t;
                        }
                        self.sites.len() - 1
                    }
                };
                self.slot.insert(x, i);
                self.rates.insert(x, r);
                self.set_leaf(i, total);
            }
            None => {}
        }
        Ok(())
    }

    fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.cap {
            let left = self.tree[2 * k];
            if u < left {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        let mut i = k - self.cap;
        while self.tree[self.cap + i] <= 0.0 && i > 0 {
            i -= 1;
        }
        i
    }

    /// Advances to the next ring no later than `horizon`. Returns `None` at the
    /// horizon or when every process is trapped.
    pub fn step(&mut self, horizon: f64) -> Result<Option<CoupledEvent>> {
        let total = self.tree[1];
        if total <= 0.0 || self.slot.is_empty() {
            self.time = horizon.max(self.time);
            return Ok(None);
        }
        let w: f64 = self.rng.sample(Exp1);
        let t = self.time + w / total;
        if t > horizon {
            self.time = horizon.max(self.time);
            return Ok(None);
        }
        self.time = t;
        let u = self.rng.random::<f64>() * total;
        let x = self.sites[self.find(u)];
        let r = self.rates[&x];
        let big = r[0] + r[1] + r[2];
        let m = self.rng.random::<f64>() * big;
        self.stats.rings += 1;
        let mut flips = [None; 3];
        for k in 0..3 {
            let occ = self.configs[k].contains(x);
            let flip = if occ { m > big - r[k] } else { m < r[k] };
            if flip {
                self.configs[k].set(x, !occ);
                flips[k] = Some(!occ);
                self.stats.flips[k] += 1;
            }
        }
        let bar = self.configs[BIASED].contains(x);
        if (self.configs[PERTURBED].contains(x) && !bar) || (self.configs[VOTER].contains(x) && !bar) {
            return Err(Error::DominationViolation { site: x, time: t });
        }
        if flips.iter().any(Option::is_some) {
            let dep = std::mem::take(&mut self.dep);
            for &a in &dep {
                self.refresh(x - a)?;
            }
            self.dep = dep;
        }
        Ok(Some(CoupledEvent { time: t, site: x, flips }))
    }

    /// Runs to `horizon`; `on_event` sees every ring that flipped something.
    pub fn run<F: FnMut(&CoupledEvent, &[Configuration; 3])>(&mut self, horizon: f64, budget: u64, mut on_event: F) -> Result<()> {
        let start = self.stats.rings;
        while let Some(ev) = self.step(horizon)? {
            if self.stats.rings - start > budget {
                return Err(Error::BudgetExceeded { budget, time: ev.time });
            }
            if ev.flips.iter().any(Option::is_some) {
                on_event(&ev, &self.configs);
            }
        }
        Ok(())
    }

    /// Full check of `xi <= xibar` and `xihat <= xibar`.
    pub fn dominated(&self) -> bool {
        self.configs[PERTURBED].is_subset(&self.configs[BIASED]) && self.configs[VOTER].is_subset(&self.configs[BIASED])
    }
}
