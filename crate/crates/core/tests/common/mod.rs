//! Test-only oracles shared by the integration tests.

use std::io::Write;

use rand::Rng;
use rand_distr::Exp1;
use svlv::lattice::{KernelSpec, Site};
use svlv::perturbation::PerturbationTable;
use svlv::simulator::SimRng;
use svlv::Configuration;

/// Textbook dense Gillespie simulation on the box `[lo, hi]^d` with every
/// site outside frozen at 0. Rates are recomputed from scratch at every
/// step from the kernel and the raw `(A, beta, delta)` entries:
///
/// `c(x) = speed * (xi(x) ? f0 : f1) + sum_A prod_{a in A} xi(x + a) * (xi(x) ? delta(A) : beta(A))`.
pub struct Brute<'a> {
    pub kernel: &'a KernelSpec,
    pub table: &'a PerturbationTable,
    pub speed: f64,
    pub sites: Vec<Site>,
    pub config: Configuration,
    pub time: f64,
}

impl<'a> Brute<'a> {
    pub fn new(kernel: &'a KernelSpec, table: &'a PerturbationTable, speed: f64, sites: Vec<Site>, config: Configuration) -> Brute<'a> {
        Brute { kernel, table, speed, sites, config, time: 0.0 }
    }

    pub fn rate(&self, x: Site) -> f64 {
        let occ = self.config.contains(x);
        let f1: f64 = self.kernel.iter().filter(|(e, _)| self.config.contains(x + *e)).map(|(_, p)| p).sum();
        let mut r = self.speed * if occ { 1.0 - f1 } else { f1 };
        for e in self.table.entries() {
            if e.set.iter().all(|&a| self.config.contains(x + a)) {
                r += if occ { e.delta } else { e.beta };
            }
        }
        r
    }

    /// One event no later than `horizon`: the site flipped, or `None`.
    pub fn step(&mut self, horizon: f64, rng: &mut SimRng) -> Option<(f64, Site)> {
        let rates: Vec<(Site, f64)> = self.sites.iter().map(|&x| (x, self.rate(x))).filter(|(_, r)| *r > 0.0).collect();
        let total: f64 = rates.iter().map(|(_, r)| r).sum();
        if rates.is_empty() || total <= 0.0 {
            self.time = horizon;
            return None;
        }
        let w: f64 = rng.sample(Exp1);
        let t = self.time + w / total;
        if t > horizon {
            self.time = horizon;
            return None;
        }
        self.time = t;
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = rates[rates.len() - 1].0;
        for &(x, r) in &rates {
            acc += r;
            if u < acc {
                pick = x;
                break;
            }
        }
        self.config.flip(pick);
        Some((t, pick))
    }

    pub fn run(&mut self, horizon: f64, rng: &mut SimRng) -> Vec<(f64, Site)> {
        let mut path = Vec::new();
        while let Some(ev) = self.step(horizon, rng) {
            path.push(ev);
        }
        path
    }
}

/// Writes a line straight to the process stderr so it shows up in test logs
/// even when output capture is on.
pub fn report(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
}
