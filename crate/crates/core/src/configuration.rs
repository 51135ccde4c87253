//! Sparse `{0,1}`-valued configurations and initial-condition generators.

use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashSet, FxHasher};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{ScalingParams, Site, MAX_DIM};

/// The set of occupied sites (the 1's).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configuration {
    dim: usize,
    occupied: FxHashSet<Site>,
}

impl Configuration {
    pub fn new(dim: usize) -> Configuration {
        assert!((1..=MAX_DIM).contains(&dim), "dimension {dim} out of range");
        Configuration { dim, occupied: FxHashSet::default() }
    }

    pub fn from_sites<I: IntoIterator<Item = Site>>(dim: usize, sites: I) -> Configuration {
        let mut c = Configuration::new(dim);
        for s in sites {
            c.insert(s);
        }
        c
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn contains(&self, site: Site) -> bool {
        self.occupied.contains(&site)
    }

    /// Returns true if the site was vacant.
    #[inline]
    pub fn insert(&mut self, site: Site) -> bool {
        self.occupied.insert(site)
    }

    /// Returns true if the site was occupied.
    #[inline]
    pub fn remove(&mut self, site: Site) -> bool {
        self.occupied.remove(&site)
    }

    /// Sets `xi(site)` to `value`.
    pub fn set(&mut self, site: Site, value: bool) {
        if value {
            self.insert(site);
        } else {
            self.remove(site);
        }
    }

    pub fn flip(&mut self, site: Site) -> bool {
        if self.remove(site) {
            false
        } else {
            self.insert(site);
            true
        }
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    /// Iterates in hash order; use [`Configuration::sorted`] when order matters.
    pub fn iter(&self) -> impl Iterator<Item = Site> + '_ {
        self.occupied.iter().copied()
    }

    pub fn sorted(&self) -> Vec<Site> {
        let mut v: Vec<Site> = self.iter().collect();
        v.sort_unstable();
        v
    }

    pub fn translated(&self, shift: Site) -> Configuration {
        Configuration::from_sites(self.dim, self.iter().map(|s| s + shift))
    }

    /// `xi <= other` coordinatewise.
    pub fn is_subset(&self, other: &Configuration) -> bool {
        self.occupied.is_subset(&other.occupied)
    }

    /// Order-independent 64-bit identifier of the occupied set.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FxHasher::default();
        self.dim.hash(&mut h);
        for s in self.sorted() {
            s.hash(&mut h);
        }
        h.finish()
    }
}

/// Initial-configuration specification, as found in run configs and
/// initial-configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    /// Explicit list of occupied sites.
    Sites { sites: Vec<Vec<i32>> },
    /// Every site of `[-half_width, half_width]^d`.
    Box { half_width: u32 },
    /// Every site with Euclidean norm at most `radius`.
    Ball { radius: f64 },
    /// Independent Bernoulli(p) occupation on `[-half_width, half_width]^d`.
    Bernoulli { p: f64, half_width: u32, seed: u64 },
    /// About `mass * N` sites drawn uniformly without replacement from the
    /// box of real half-width `macro_half_width`, so that `X_0(1) ≈ mass`.
    UniformMass { mass: f64, macro_half_width: f64, seed: u64 },
}

impl InitialSpec {
    /// Parses either a bare list of sites or a tagged generator object.
    pub fn from_json(text: &str) -> Result<InitialSpec> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        if value.is_array() {
            let sites: Vec<Vec<i32>> = serde_json::from_value(value)?;
            return Ok(InitialSpec::Sites { sites });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn build(&self, dim: usize, scaling: Option<&ScalingParams>) -> Result<Configuration> {
        let mut cfg = Configuration::new(dim);
        match self {
            InitialSpec::Sites { sites } => {
                for s in sites {
                    if s.len() != dim {
                        return Err(Error::DimensionMismatch { expected: dim, got: s.len() });
                    }
                    cfg.insert(Site::new(s)?);
                }
            }
            InitialSpec::Box { half_width } => {
                for s in box_sites(dim, *half_width as i32) {
                    cfg.insert(s);
                }
            }
            InitialSpec::Ball { radius } => {
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::Config(format!("ball radius {radius} is invalid")));
                }
                let r2 = radius * radius;
                for s in box_sites(dim, radius.floor() as i32) {
                    if s.norm_sq() as f64 <= r2 {
                        cfg.insert(s);
                    }
                }
            }
            InitialSpec::Bernoulli { p, half_width, seed } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("bernoulli p = {p} outside [0,1]")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for s in box_sites(dim, *half_width as i32) {
                    if rng.random::<f64>() < *p {
                        cfg.insert(s);
                    }
                }
            }
            InitialSpec::UniformMass { mass, macro_half_width, seed } => {
                let scaling = scaling.ok_or_else(|| Error::Config("uniform_mass needs the scaling N".into()))?;
                if !(mass.is_finite() && *mass >= 0.0 && macro_half_width.is_finite() && *macro_half_width > 0.0) {
                    return Err(Error::Config("uniform_mass needs mass >= 0 and macro_half_width > 0".into()));
                }
                let count = (mass * scaling.n_prime as f64).round() as usize;
                let h = (macro_half_width * scaling.ell).ceil() as i32;
                let side = 2 * i64::from(h) + 1;
                let volume = (side as f64).powi(dim as i32);
                if count as f64 > volume {
                    return Err(Error::Config(format!("uniform_mass wants {count} sites in a box of {volume}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                while cfg.len() < count {
                    let mut c = [0; MAX_DIM];
                    for v in c.iter_mut().take(dim) {
                        *v = rng.random_range(-h..=h);
                    }
                    cfg.insert(Site(c));
                }
            }
        }
        Ok(cfg)
    }
}

/// All sites of `[-h, h]^d` in lexicographic order.
pub fn box_sites(dim: usize, h: i32) -> Vec<Site> {
    cube_sites(dim, -h, h)
}

/// Sites of the box `[lo, hi]^d` in lexicographic order.
pub fn cube_sites(dim: usize, lo: i32, hi: i32) -> Vec<Site> {
    let mut out = Vec::new();
    let mut cur = [0i32; MAX_DIM];
    for v in cur.iter_mut().take(dim) {
        *v = lo;
    }
    if hi < lo {
        return out;
    }
    loop {
        out.push(Site(cur));
        let mut k = dim;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if cur[k] < hi {
                cur[k] += 1;
                break;
            }
            cur[k] = lo;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::KernelSpec;

    #[test]
    fn box_and_ball_sizes() {
        assert_eq!(box_sites(3, 1).len(), 27);
        assert_eq!(box_sites(2, 0).len(), 1);
        let ball = InitialSpec::Ball { radius: 1.0 }.build(3, None).unwrap();
        assert_eq!(ball.len(), 7);
        assert_eq!(cube_sites(3, 0, 3).len(), 64);
    }

    #[test]
    fn bare_list_and_tagged_json() {
        let spec = InitialSpec::from_json("[[0,0,0],[1,0,0]]").unwrap();
        assert_eq!(spec.build(3, None).unwrap().len(), 2);
        let spec = InitialSpec::from_json(r#"{"kind":"box","half_width":1}"#).unwrap();
        assert_eq!(spec.build(2, None).unwrap().len(), 9);
        let bad = InitialSpec::Sites { sites: vec![vec![0, 0]] };
        assert!(bad.build(3, None).is_err());
    }

    #[test]
    fn bernoulli_is_seeded() {
        let spec = InitialSpec::Bernoulli { p: 0.5, half_width: 3, seed: 9 };
        let a = spec.build(3, None).unwrap();
        let b = spec.build(3, None).unwrap();
        assert_eq!(a, b);
        assert!(a.len() > 100 && a.len() < 250);
    }

    #[test]
    fn uniform_mass_count() {
        let k = KernelSpec::nearest_neighbor(3).unwrap();
        let s = ScalingParams::new(100, &k).unwrap();
        let cfg = InitialSpec::UniformMass { mass: 2.0, macro_half_width: 0.5, seed: 1 }
            .build(3, Some(&s))
            .unwrap();
        assert_eq!(cfg.len(), 200);
        assert!(cfg.iter().all(|x| x.sup_norm() <= 5));
    }

    #[test]
    fn fingerprint_ignores_insertion_order() {
        let a = Configuration::from_sites(2, [Site::axis(0, 1), Site::axis(1, 1)]);
        let b = Configuration::from_sites(2, [Site::axis(1, 1), Site::axis(0, 1)]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), Configuration::new(2).fingerprint());
    }
}
