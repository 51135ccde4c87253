//! Particle-centred thinning engine for voter, Lotka-Volterra, two-kernel and
//! biased voter rates.
//!
//! Every occupied site carries a clock of rate `2 v + theta0^+ + theta1^+`
//! (plus `b` for a bias table) split into channels:
//!
//! * voter birth (rate `v`): target `x = y + e`, accepted if `x` is vacant;
//! * voter death (rate `v`): neighbour `x + e`, the particle dies if it is vacant;
//! * extra birth (rate `theta0^+`): `x = y + e` vacant and `x + e'` occupied;
//! * extra death (rate `theta1^+`): `x + e` and `x + e'` both vacant;
//! * bias birth (rate `b`): `x = y + ebar` vacant.
//!
//! Negative `theta_i` thin the voter channels instead: a voter birth is
//! rejected with probability `|theta0| / v` when `x + e'` is occupied, and a
//! voter death with probability `|theta1| / v` when `x + e'` is vacant. Summing
//! over particles reproduces `v f1 + theta0 f1 f1^b` and `v f0 + theta1 f0 f0^d`
//! exactly, so accepted proposals form the target jump chain.

use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;
use rustc_hash::FxHashMap;

use super::{Domain, Engine, RateModel, SimRng, Step};
use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{KernelSpec, Site};
use crate::perturbation::TableOrigin;

#[derive(Clone, Debug)]
struct Channels {
    speed: f64,
    extra_birth: f64,
    extra_death: f64,
    bias: f64,
    birth_reject: f64,
    death_reject: f64,
    birth_check: Option<KernelSpec>,
    death_check: Option<KernelSpec>,
    bias_kernel: Option<KernelSpec>,
}

impl Channels {
    fn per_particle(&self) -> f64 {
        2.0 * self.speed + self.extra_birth + self.extra_death + self.bias
    }
}

pub struct ThinningEngine {
    model: Arc<RateModel>,
    config: Configuration,
    time: f64,
    events: u64,
    proposals: u64,
    rng: SimRng,
    particles: Vec<Site>,
    index: FxHashMap<Site, usize>,
    ch: Channels,
}

impl ThinningEngine {
    /// Fails for tables other than zero, LV, two-kernel and bias tables on the
    /// model's kernel, for bounded domains, and when `|theta_i| > v`.
    pub fn new(model: Arc<RateModel>, config: Configuration, rng: SimRng) -> Result<ThinningEngine> {
        model.check_config(&config)?;
        if model.domain() != Domain::Unbounded {
            return Err(Error::InvalidParameter("thinning engine needs an unbounded domain".into()));
        }
        let ch = Self::channels(&model)?;
        let mut particles = config.sorted();
        particles.shrink_to_fit();
        let index = particles.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Ok(ThinningEngine { model, config, time: 0.0, events: 0, proposals: 0, rng, particles, index, ch })
    }

    fn channels(model: &RateModel) -> Result<Channels> {
        let speed = model.speed();
        let k = model.kernel();
        let mut ch = Channels {
            speed,
            extra_birth: 0.0,
            extra_death: 0.0,
            bias: 0.0,
            birth_reject: 0.0,
            death_reject: 0.0,
            birth_check: None,
            death_check: None,
            bias_kernel: None,
        };
        if model.table().is_zero() {
            return Ok(ch);
        }
        let (theta0, theta1, bk, dk) = match model.table().origin() {
            TableOrigin::Lv { theta0, theta1, kernel } => {
                if !kernel.same_as(k) {
                    return Err(Error::InvalidParameter("LV table kernel differs from the voter kernel".into()));
                }
                (*theta0, *theta1, kernel.clone(), kernel.clone())
            }
            TableOrigin::TwoKernel { theta0, theta1, kernel, birth, death } => {
                if !kernel.same_as(k) {
                    return Err(Error::InvalidParameter("two-kernel table kernel differs from the voter kernel".into()));
                }
                (*theta0, *theta1, birth.clone(), death.clone())
            }
            TableOrigin::Bias { rate, kernel } => {
                ch.bias = *rate;
                ch.bias_kernel = Some(kernel.clone());
                return Ok(ch);
            }
            TableOrigin::User { .. } => {
                return Err(Error::InvalidParameter("thinning engine does not support general tables".into()));
            }
        };
        if theta0.abs() > speed || theta1.abs() > speed {
            return Err(Error::InvalidParameter(format!(
                "thinning needs |theta_i| <= voter speed (theta0 = {theta0}, theta1 = {theta1}, speed = {speed})"
            )));
        }
        if theta0 > 0.0 {
            ch.extra_birth = theta0;
        } else {
            ch.birth_reject = -theta0 / speed;
        }
        if theta1 > 0.0 {
            ch.extra_death = theta1;
        } else {
            ch.death_reject = -theta1 / speed;
        }
        if theta0 != 0.0 {
            ch.birth_check = Some(bk);
        }
        if theta1 != 0.0 {
            ch.death_check = Some(dk);
        }
        Ok(ch)
    }

    /// Proposals drawn so far, accepted or not.
    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    /// Proposal rate `|xi| * (2 v + theta0^+ + theta1^+ + b)`.
    pub fn proposal_rate(&self) -> f64 {
        self.particles.len() as f64 * self.ch.per_particle()
    }

    /// One proposal from particle `y`; returns the site to flip if accepted.
    fn propose(&mut self, y: Site) -> Option<Site> {
        let ch = &self.ch;
        let k = self.model.kernel();
        let mut u = self.rng.random::<f64>() * ch.per_particle();
        if u < ch.speed {
            let x = y + k.sample_step(&mut self.rng);
            if self.config.contains(x) {
                return None;
            }
            if ch.birth_reject > 0.0 {
                let check = ch.birth_check.as_ref().expect("check kernel");
                let z = x + check.sample_step(&mut self.rng);
                if self.config.contains(z) && self.rng.random::<f64>() < ch.birth_reject {
                    return None;
                }
            }
            return Some(x);
        }
        u -= ch.speed;
        if u < ch.speed {
            if self.config.contains(y + k.sample_step(&mut self.rng)) {
                return None;
            }
            if ch.death_reject > 0.0 {
                let check = ch.death_check.as_ref().expect("check kernel");
                let z = y + check.sample_step(&mut self.rng);
                if !self.config.contains(z) && self.rng.random::<f64>() < ch.death_reject {
                    return None;
                }
            }
            return Some(y);
        }
        u -= ch.speed;
        if u < ch.extra_birth {
            let x = y + k.sample_step(&mut self.rng);
            if self.config.contains(x) {
                return None;
            }
            let check = ch.birth_check.as_ref().expect("check kernel");
            let z = x + check.sample_step(&mut self.rng);
            return self.config.contains(z).then_some(x);
        }
        u -= ch.extra_birth;
        if u < ch.extra_death {
            if self.config.contains(y + k.sample_step(&mut self.rng)) {
                return None;
            }
            let check = ch.death_check.as_ref().expect("check kernel");
            let z = y + check.sample_step(&mut self.rng);
            return (!self.config.contains(z)).then_some(y);
        }
        let bk = ch.bias_kernel.as_ref().expect("bias kernel");
        let x = y + bk.sample_step(&mut self.rng);
        (!self.config.contains(x)).then_some(x)
    }
}

impl Engine for ThinningEngine {
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
        loop {
            if self.particles.is_empty() {
                return Ok(Step::Absorbed);
            }
            let total = self.proposal_rate();
            let w: f64 = self.rng.sample(Exp1);
            let t = self.time + w / total;
            if t > horizon {
                self.time = horizon.max(self.time);
                return Ok(Step::Horizon);
            }
            self.time = t;
            self.proposals += 1;
            let i = self.rng.random_range(0..self.particles.len());
            let y = self.particles[i];
            if let Some(site) = self.propose(y) {
                return Ok(Step::Event { time: t, site });
            }
        }
    }

    fn apply(&mut self, site: Site) -> Result<bool> {
        let value = self.config.flip(site);
        if value {
            self.index.insert(site, self.particles.len());
            self.particles.push(site);
        } else {
            let i = self.index.remove(&site).expect("occupied site is indexed");
            self.particles.swap_remove(i);
            if i < self.particles.len() {
                self.index.insert(self.particles[i], i);
            }
        }
        self.events += 1;
        Ok(value)
    }
}
