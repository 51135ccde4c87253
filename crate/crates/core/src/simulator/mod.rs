//! Exact continuous-time simulation of voter-model perturbations.
//!
//! Two single-process engines share the [`Engine`] interface:
//! [`EventEngine`] keeps every nonzero flip rate in a sum tree and is exact for
//! any table; [`ThinningEngine`] proposes particle-centred events at a bound
//! and accepts by local checks, which keeps long-range kernels cheap.
//! [`CoupledEngine`] runs the perturbed, voter and biased voter processes on
//! shared randomness.

mod coupled;
mod engine;
mod observer;
mod thinning;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

pub use coupled::{pbar, phat, CoupledEngine, CoupledEvent, CoupledStats, BIASED, PERTURBED, VOTER};
pub use engine::{EventEngine, Selection};
pub use observer::{run, EventLog, EventRecord, MassTracker, Observer, RunSummary};
pub use thinning::ThinningEngine;

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{density_of_ones, KernelSpec, Site, MAX_DIM};
use crate::perturbation::{check_rate, PerturbationTable, TableOrigin};

/// Random stream used by every engine.
pub type SimRng = ChaCha8Rng;

/// Default event budget (guards runaway supercritical growth).
pub const DEFAULT_BUDGET: u64 = 200_000_000;

/// Where spins may flip. Sites outside a box are frozen at 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Unbounded,
    /// `[lo, hi]^d`.
    Box { lo: i32, hi: i32 },
}

impl Domain {
    #[inline]
    pub fn contains(&self, site: Site, dim: usize) -> bool {
        match *self {
            Domain::Unbounded => true,
            Domain::Box { lo, hi } => site.0[..dim].iter().all(|&c| c >= lo && c <= hi),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum FastPath {
    Voter,
    /// LV table on the voter kernel: `b = theta0 f1^2`, `d = theta1 f0^2`.
    Lv { theta0: f64, theta1: f64 },
    /// Bias table on the voter kernel: `b = rate f1`.
    Bias { rate: f64 },
    General,
}

/// Ingredients of the flip rate at one site.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalRates {
    pub occupied: bool,
    /// `f_1` for the voter kernel.
    pub f1: f64,
    /// `sum_A chi(A) beta(A)`.
    pub birth: f64,
    /// `sum_A chi(A) delta(A)`.
    pub death: f64,
}

impl LocalRates {
    /// `speed * c^v + c*`.
    #[inline]
    pub fn rate(&self, speed: f64) -> f64 {
        if self.occupied {
            speed * (1.0 - self.f1) + self.death
        } else {
            speed * self.f1 + self.birth
        }
    }

    /// Voter part `c^v = 1{xi(x) != xi(x+e)}` averaged over the kernel.
    #[inline]
    pub fn voter(&self) -> f64 {
        if self.occupied {
            1.0 - self.f1
        } else {
            self.f1
        }
    }
}

/// Flip rates `c(x, xi) = speed * c^v(x, xi) + c*(x, xi)`.
///
/// The perturbed process uses `speed = N`; the biased voter model uses
/// `speed = v` with a [`PerturbationTable::bias`] table.
#[derive(Clone, Debug)]
pub struct RateModel {
    kernel: KernelSpec,
    speed: f64,
    n: u64,
    table: PerturbationTable,
    domain: Domain,
    dep: Vec<Site>,
    fast: FastPath,
    scale: f64,
}

impl RateModel {
    pub fn new(kernel: KernelSpec, n: u64, speed: f64, table: PerturbationTable, domain: Domain) -> Result<RateModel> {
        if table.dim() != kernel.dim() {
            return Err(Error::DimensionMismatch { expected: kernel.dim(), got: table.dim() });
        }
        if n == 0 {
            return Err(Error::InvalidParameter("N must be positive".into()));
        }
        if !(speed.is_finite() && speed > 0.0) {
            return Err(Error::InvalidParameter(format!("voter speed {speed} must be positive")));
        }
        let mut dep: Vec<Site> = kernel.support().iter().chain(table.offsets()).copied().collect();
        dep.sort_unstable();
        dep.dedup();
        dep.retain(|s| !s.is_origin());
        dep.insert(0, Site::ORIGIN);
        let fast = if table.is_zero() {
            FastPath::Voter
        } else {
            match table.origin() {
                TableOrigin::Lv { theta0, theta1, kernel: k } if k.same_as(&kernel) => FastPath::Lv { theta0: *theta0, theta1: *theta1 },
                TableOrigin::Bias { rate, kernel: k } if k.same_as(&kernel) => FastPath::Bias { rate: *rate },
                _ => FastPath::General,
            }
        };
        let scale = speed + table.abs_sum();
        Ok(RateModel { kernel, speed, n, table, domain, dep, fast, scale })
    }

    /// Perturbed process at scale `N` (voter speed `N`).
    pub fn perturbed(kernel: KernelSpec, n: u64, table: PerturbationTable) -> Result<RateModel> {
        RateModel::new(kernel, n, n as f64, table, Domain::Unbounded)
    }

    pub fn voter(kernel: KernelSpec, n: u64) -> Result<RateModel> {
        let d = kernel.dim();
        RateModel::perturbed(kernel, n, PerturbationTable::zero(d))
    }

    /// Biased voter model: `0 -> 1` at `v f1 + b fbar1`, `1 -> 0` at `v f0`.
    pub fn biased_voter(kernel: KernelSpec, bias_kernel: &KernelSpec, n: u64, v: f64, b: f64) -> Result<RateModel> {
        if !(b.is_finite() && b >= 0.0) {
            return Err(Error::InvalidParameter(format!("bias b = {b} must be nonnegative")));
        }
        if bias_kernel.dim() != kernel.dim() {
            return Err(Error::DimensionMismatch { expected: kernel.dim(), got: bias_kernel.dim() });
        }
        RateModel::new(kernel, n, v, PerturbationTable::bias(bias_kernel, b), Domain::Unbounded)
    }

    pub fn with_domain(mut self, domain: Domain) -> RateModel {
        self.domain = domain;
        self
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn table(&self) -> &PerturbationTable {
        &self.table
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// The origin followed by every offset a rate depends on. A flip at `z`
    /// can only change rates at `z - a` for `a` in this list.
    pub fn dependence(&self) -> &[Site] {
        &self.dep
    }

    #[inline]
    pub fn in_domain(&self, site: Site) -> bool {
        self.domain.contains(site, self.kernel.dim())
    }

    /// Rate ingredients at `x`.
    #[inline]
    pub fn local(&self, config: &Configuration, x: Site) -> LocalRates {
        let occupied = config.contains(x);
        let f1 = density_of_ones(config, &self.kernel, x);
        let (birth, death) = match self.fast {
            FastPath::Voter => (0.0, 0.0),
            FastPath::Lv { theta0, theta1 } => {
                let f0 = 1.0 - f1;
                (theta0 * f1 * f1, theta1 * f0 * f0)
            }
            FastPath::Bias { rate } => (rate * f1, 0.0),
            FastPath::General => self.table.perturbation_rates(config, x),
        };
        LocalRates { occupied, f1, birth, death }
    }

    /// Flip rate at `x`; 0 outside the domain.
    #[inline]
    pub fn rate(&self, config: &Configuration, x: Site) -> Result<f64> {
        if !self.in_domain(x) {
            return Ok(0.0);
        }
        let r = self.local(config, x).rate(self.speed);
        check_rate(r, self.scale, config, x)
    }

    /// Every site that can have a nonzero rate, sorted.
    pub fn candidates(&self, config: &Configuration) -> Vec<Site> {
        let mut out: Vec<Site> = Vec::with_capacity(config.len() * self.dep.len());
        for y in config.iter() {
            for &a in &self.dep {
                let x = y - a;
                if self.in_domain(x) {
                    out.push(x);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Sum of all flip rates by a full scan.
    pub fn total_rate(&self, config: &Configuration) -> Result<f64> {
        let mut t = 0.0;
        for x in self.candidates(config) {
            t += self.rate(config, x)?;
        }
        Ok(t)
    }

    pub(crate) fn check_config(&self, config: &Configuration) -> Result<()> {
        if config.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: config.dim() });
        }
        if let Some(s) = config.iter().find(|s| !self.in_domain(*s)) {
            return Err(Error::InvalidParameter(format!("initial site {s} lies outside the domain")));
        }
        if let Some(s) = config.iter().find(|s| s.0[self.dim()..MAX_DIM].iter().any(|&c| c != 0)) {
            return Err(Error::InvalidParameter(format!("site {s} has more than {} coordinates", self.dim())));
        }
        Ok(())
    }
}

/// Outcome of one engine step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    /// The engine advanced to `time` and will flip `site` on [`Engine::apply`].
    Event { time: f64, site: Site },
    /// No event before the horizon; time now equals the horizon.
    Horizon,
    /// Total rate is zero: the configuration is a trap.
    Absorbed,
}

/// Common interface of the single-process engines.
pub trait Engine {
    fn config(&self) -> &Configuration;
    fn time(&self) -> f64;
    fn model(&self) -> &RateModel;
    /// Number of applied flips.
    fn events(&self) -> u64;
    /// Draws the next event no later than `horizon` without applying it.
    fn next(&mut self, horizon: f64) -> Result<Step>;
    /// Flips `site` (the site returned by the last [`Engine::next`]); returns the new value.
    fn apply(&mut self, site: Site) -> Result<bool>;
}

/// Shared handle to a rate model.
pub type SharedModel = Arc<RateModel>;
