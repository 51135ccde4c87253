//! Exact Gillespie engine with a per-site rate cache.

use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;
use rustc_hash::FxHashMap;

use super::{Engine, RateModel, SimRng, Step};
use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::Site;

/// Full rate recomputation period, in events.
const REFRESH_EVERY: u64 = 1 << 16;

/// How the flipping site is chosen given a uniform mark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Selection {
    /// Binary descent in the sum tree, `O(log n)`.
    #[default]
    Tree,
    /// Cumulative scan over active sites in lexicographic order. Slow; it
    /// reproduces a textbook dense implementation draw for draw.
    Canonical,
}

/// Complete binary tree of partial sums. Every internal node is recomputed
/// from its children, so the root never drifts from the sum of the leaves.
#[derive(Clone, Debug)]
struct SumTree {
    cap: usize,
    node: Vec<f64>,
}

impl SumTree {
    fn new(cap: usize) -> SumTree {
        let cap = cap.next_power_of_two().max(2);
        SumTree { cap, node: vec![0.0; 2 * cap] }
    }

    #[inline]
    fn total(&self) -> f64 {
        self.node[1]
    }

    #[inline]
    fn get(&self, i: usize) -> f64 {
        self.node[self.cap + i]
    }

    fn set(&mut self, i: usize, v: f64) {
        let mut k = self.cap + i;
        self.node[k] = v;
        while k > 1 {
            k >>= 1;
            self.node[k] = self.node[2 * k] + self.node[2 * k + 1];
        }
    }

    fn grow(&mut self) {
        let mut bigger = SumTree::new(self.cap * 2);
        bigger.node[bigger.cap..bigger.cap + self.cap].copy_from_slice(&self.node[self.cap..]);
        for k in (1..bigger.cap).rev() {
            bigger.node[k] = bigger.node[2 * k] + bigger.node[2 * k + 1];
        }
        *self = bigger;
    }

    /// Leaf `i` with `prefix(i) <= u < prefix(i) + leaf(i)`.
    fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.cap {
            let left = self.node[2 * k];
            if u < left {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        let mut i = k - self.cap;
        // rounding can land on an empty leaf; step back to a positive one
        while self.node[self.cap + i] <= 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}

/// Gillespie engine over the active set (every site with a positive rate).
pub struct EventEngine {
    model: Arc<RateModel>,
    config: Configuration,
    time: f64,
    events: u64,
    rng: SimRng,
    tree: SumTree,
    slot: FxHashMap<Site, usize>,
    sites: Vec<Site>,
    free: Vec<usize>,
    selection: Selection,
    since_refresh: u64,
}

impl EventEngine {
    pub fn new(model: Arc<RateModel>, config: Configuration, rng: SimRng) -> Result<EventEngine> {
        model.check_config(&config)?;
        let mut e = EventEngine {
            model,
            config,
            time: 0.0,
            events: 0,
            rng,
            tree: SumTree::new(64),
            slot: FxHashMap::default(),
            sites: Vec::new(),
            free: Vec::new(),
            selection: Selection::Tree,
            since_refresh: 0,
        };
        e.rebuild()?;
        Ok(e)
    }

    pub fn with_selection(mut self, selection: Selection) -> EventEngine {
        self.selection = selection;
        self
    }

    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    /// Cached rate of `site` (0 if inactive).
    pub fn cached_rate(&self, site: Site) -> f64 {
        self.slot.get(&site).map_or(0.0, |&i| self.tree.get(i))
    }

    /// Active sites, sorted.
    pub fn active_sites(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.slot.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn rng_mut(&mut self) -> &mut SimRng {
        &mut self.rng
    }

    /// Recomputes every rate from the configuration.
    pub fn rebuild(&mut self) -> Result<()> {
        let cands = self.model.candidates(&self.config);
        self.slot.clear();
        self.sites.clear();
        self.free.clear();
        self.tree = SumTree::new(cands.len().max(64));
        for x in cands {
            let r = self.model.rate(&self.config, x)?;
            if r > 0.0 {
                let i = self.sites.len();
                self.sites.push(x);
                self.slot.insert(x, i);
                self.tree.set(i, r);
            }
        }
        self.since_refresh = 0;
        Ok(())
    }

    fn put(&mut self, x: Site, r: f64) {
        match self.slot.get(&x) {
            Some(&i) => {
                if r > 0.0 {
                    self.tree.set(i, r);
                } else {
                    self.tree.set(i, 0.0);
                    self.slot.remove(&x);
                    self.free.push(i);
                }
            }
            None if r > 0.0 => {
                let i = match self.free.pop() {
                    Some(i) => {
                        self.sites[i] = x;
                        i
                    }
                    None => {
                        self.sites.push(x);
                        if self.sites.len() > self.tree.cap {
                            self.tree.grow();
                        }
                        self.sites.len() - 1
                    }
                };
                self.slot.insert(x, i);
                self.tree.set(i, r);
            }
            None => {}
        }
    }

    fn select(&mut self, total: f64) -> Site {
        let u: f64 = self.rng.random::<f64>() * total;
        match self.selection {
            Selection::Tree => self.sites[self.tree.find(u)],
            Selection::Canonical => {
                let active = self.active_sites();
                let mut acc = 0.0;
                let mut last = active[0];
                for s in active {
                    let r = self.cached_rate(s);
                    if r <= 0.0 {
                        continue;
                    }
                    acc += r;
                    last = s;
                    if u < acc {
                        return s;
                    }
                }
                last
            }
        }
    }

    fn canonical_total(&self) -> f64 {
        self.active_sites().into_iter().map(|s| self.cached_rate(s)).sum()
    }
}

impl Engine for EventEngine {
    fn config(&self) -> &Configuration {
        &self.config
    }

    fn time(&self) -> f64 {
        self.time
    }

    fn model(&self) -> &RateModel {
        &self.model
    }

    fn events(&self) -> u64 {
        self.events
    }

    fn next(&mut self, horizon: f64) -> Result<Step> {
        let total = match self.selection {
            Selection::Tree => self.tree.total(),
            Selection::Canonical => self.canonical_total(),
        };
        if total <= 0.0 || self.slot.is_empty() {
            return Ok(Step::Absorbed);
        }
        let w: f64 = self.rng.sample(Exp1);
        let t = self.time + w / total;
        if t > horizon {
            self.time = horizon.max(self.time);
            return Ok(Step::Horizon);
        }
        self.time = t;
        let site = self.select(total);
        Ok(Step::Event { time: t, site })
    }

    fn apply(&mut self, site: Site) -> Result<bool> {
        if !self.model.in_domain(site) {
            return Err(Error::InvalidParameter(format!("flip at {site} outside the domain")));
        }
        let value = self.config.flip(site);
        self.events += 1;
        let model = Arc::clone(&self.model);
        for &a in model.dependence() {
            let x = site - a;
            if model.in_domain(x) {
                let r = model.rate(&self.config, x)?;
                self.put(x, r);
            }
        }
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_EVERY {
            self.rebuild()?;
        }
        Ok(value)
    }
}
