//! Perturbation tables `A -> (beta_N(A), delta_N(A))`, flip rates and table validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{density_of_ones, KernelSpec, Site};

/// Up to this many sites (dependence neighbourhood plus the origin) the
/// positivity check enumerates every local configuration.
pub const EXHAUSTIVE_SITES: usize = 20;
/// Number of random local configurations checked above [`EXHAUSTIVE_SITES`].
pub const POSITIVITY_SAMPLES: usize = 100_000;

/// One table row. `set` is sorted, duplicate free and never contains the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct TableEntry {
    pub set: Vec<Site>,
    pub beta: f64,
    pub delta: f64,
}

/// Where a table came from; known constructions get closed-form rate evaluation.
#[derive(Clone, Debug)]
pub enum TableOrigin {
    User { k_delta: Option<f64> },
    Lv { theta0: f64, theta1: f64, kernel: KernelSpec },
    TwoKernel { theta0: f64, theta1: f64, kernel: KernelSpec, birth: KernelSpec, death: KernelSpec },
    /// Singleton births `beta({a}) = rate * kernel(a)`.
    Bias { rate: f64, kernel: KernelSpec },
}

#[derive(Clone, Debug)]
pub struct PerturbationTable {
    dim: usize,
    entries: Vec<TableEntry>,
    origin: TableOrigin,
    offsets: Vec<Site>,
    abs_sum: f64,
}

/// `chi(A, x, xi)`: every site `x + a`, `a in A`, is occupied.
#[inline]
pub fn chi(config: &Configuration, set: &[Site], x: Site) -> bool {
    set.iter().all(|&a| config.contains(x + a))
}

/// Sorted, deduplicated copy of an offset set.
pub fn canonical_set(set: &[Site]) -> Vec<Site> {
    let mut v = set.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl PerturbationTable {
    /// The zero table: the perturbed process is the voter model.
    pub fn zero(dim: usize) -> PerturbationTable {
        Self::assemble(dim, Vec::new(), TableOrigin::User { k_delta: Some(0.0) })
    }

    /// Builds a table from raw rows. Keys are canonicalized; a key containing the
    /// origin has its `delta` folded into the key without the origin and its
    /// `beta` dropped, which leaves every flip rate unchanged.
    pub fn from_entries(dim: usize, rows: Vec<(Vec<Site>, f64, f64)>, k_delta: Option<f64>) -> Result<PerturbationTable> {
        let mut merged: FxHashMap<Vec<Site>, (f64, f64)> = FxHashMap::default();
        for (set, beta, delta) in rows {
            if !beta.is_finite() || !delta.is_finite() {
                return Err(Error::InvalidTable(format!("non-finite rate for key {set:?}")));
            }
            for s in &set {
                if s.0[dim..].iter().any(|&c| c != 0) {
                    return Err(Error::DimensionMismatch { expected: dim, got: dim + 1 });
                }
            }
            let mut key = canonical_set(&set);
            let (beta, delta) = match key.binary_search(&Site::ORIGIN) {
                Ok(i) => {
                    key.remove(i);
                    (0.0, delta)
                }
                Err(_) => (beta, delta),
            };
            let e = merged.entry(key).or_insert((0.0, 0.0));
            e.0 += beta;
            e.1 += delta;
        }
        if let Some(&(b, _)) = merged.get(&Vec::new()) {
            if b != 0.0 {
                return Err(Error::InvalidTable(format!("beta of the empty set must be 0, got {b}")));
            }
        }
        if let Some(k) = k_delta {
            if !(k.is_finite() && k >= 0.0) {
                return Err(Error::InvalidTable(format!("k_delta = {k} must be finite and nonnegative")));
            }
        }
        let entries = merged
            .into_iter()
            .map(|(set, (beta, delta))| TableEntry { set, beta, delta })
            .collect();
        Ok(Self::assemble(dim, entries, TableOrigin::User { k_delta }))
    }

    /// Lotka-Volterra table for kernel `p`.
    pub fn lv(kernel: &KernelSpec, theta0: f64, theta1: f64) -> PerturbationTable {
        let mut entries = Vec::new();
        let sup = kernel.support();
        if theta0 != 0.0 || theta1 != 0.0 {
            entries.push(TableEntry { set: Vec::new(), beta: 0.0, delta: theta1 });
            for (i, &a) in sup.iter().enumerate() {
                let pa = kernel.prob_at(i);
                entries.push(TableEntry { set: vec![a], beta: theta0 * pa * pa, delta: theta1 * (pa * pa - 2.0 * pa) });
                for (j, &b) in sup.iter().enumerate().skip(i + 1) {
                    let pb = kernel.prob_at(j);
                    let w = 2.0 * pa * pb;
                    entries.push(TableEntry { set: vec![a, b], beta: theta0 * w, delta: theta1 * w });
                }
            }
        }
        let origin = TableOrigin::Lv { theta0, theta1, kernel: kernel.clone() };
        Self::assemble(kernel.dim(), entries, origin)
    }

    /// Two-kernel Lotka-Volterra table with competition kernels `p^b`, `p^d`.
    pub fn two_kernel(
        kernel: &KernelSpec,
        birth: &KernelSpec,
        death: &KernelSpec,
        theta0: f64,
        theta1: f64,
    ) -> Result<PerturbationTable> {
        let d = kernel.dim();
        for k in [birth, death] {
            if k.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: k.dim() });
            }
        }
        let mut sup: Vec<Site> = kernel.support().iter().chain(birth.support()).chain(death.support()).copied().collect();
        sup.sort_unstable();
        sup.dedup();
        let mut entries = Vec::new();
        if theta0 != 0.0 || theta1 != 0.0 {
            entries.push(TableEntry { set: Vec::new(), beta: 0.0, delta: theta1 });
            let p: Vec<f64> = sup.iter().map(|&a| kernel.prob(a)).collect();
            let pb: Vec<f64> = sup.iter().map(|&a| birth.prob(a)).collect();
            let pd: Vec<f64> = sup.iter().map(|&a| death.prob(a)).collect();
            for i in 0..sup.len() {
                entries.push(TableEntry {
                    set: vec![sup[i]],
                    beta: theta0 * p[i] * pb[i],
                    delta: theta1 * (p[i] * pd[i] - p[i] - pd[i]),
                });
                for j in i + 1..sup.len() {
                    entries.push(TableEntry {
                        set: vec![sup[i], sup[j]],
                        beta: theta0 * (p[i] * pb[j] + p[j] * pb[i]),
                        delta: theta1 * (p[i] * pd[j] + p[j] * pd[i]),
                    });
                }
            }
        }
        let origin = TableOrigin::TwoKernel {
            theta0,
            theta1,
            kernel: kernel.clone(),
            birth: birth.clone(),
            death: death.clone(),
        };
        Ok(Self::assemble(d, entries, origin))
    }

    /// Bias table `beta({a}) = rate * kernel(a)`; with voter speed `v` this is the
    /// biased voter model.
    pub fn bias(kernel: &KernelSpec, rate: f64) -> PerturbationTable {
        let entries = if rate == 0.0 {
            Vec::new()
        } else {
            kernel.iter().map(|(a, p)| TableEntry { set: vec![a], beta: rate * p, delta: 0.0 }).collect()
        };
        Self::assemble(kernel.dim(), entries, TableOrigin::Bias { rate, kernel: kernel.clone() })
    }

    fn assemble(dim: usize, entries: Vec<TableEntry>, origin: TableOrigin) -> PerturbationTable {
        let mut entries: Vec<TableEntry> = entries.into_iter().filter(|e| e.beta != 0.0 || e.delta != 0.0).collect();
        entries.sort_by(|a, b| a.set.len().cmp(&b.set.len()).then_with(|| a.set.cmp(&b.set)));
        let mut offsets: Vec<Site> = entries.iter().flat_map(|e| e.set.iter().copied()).collect();
        offsets.sort_unstable();
        offsets.dedup();
        let abs_sum = entries.iter().map(|e| e.beta.abs() + e.delta.abs()).sum();
        PerturbationTable { dim, entries, origin, offsets, abs_sum }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn origin(&self) -> &TableOrigin {
        &self.origin
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    /// Union of all offsets appearing in keys.
    pub fn offsets(&self) -> &[Site] {
        &self.offsets
    }

    /// `sum_A |beta(A)| + |delta(A)|`.
    pub fn abs_sum(&self) -> f64 {
        self.abs_sum
    }

    pub fn get(&self, set: &[Site]) -> Option<(f64, f64)> {
        let key = canonical_set(set);
        self.entries.iter().find(|e| e.set == key).map(|e| (e.beta, e.delta))
    }

    pub fn beta(&self, set: &[Site]) -> f64 {
        self.get(set).map_or(0.0, |e| e.0)
    }

    pub fn delta(&self, set: &[Site]) -> f64 {
        self.get(set).map_or(0.0, |e| e.1)
    }

    /// `c_beta = sum_A beta(A)^+`.
    pub fn c_beta(&self) -> f64 {
        self.entries.iter().map(|e| e.beta.max(0.0)).sum()
    }

    /// `(sum_A chi beta(A), sum_A chi delta(A))` at `x`. Neither sum depends on `xi(x)`.
    #[inline]
    pub fn perturbation_rates(&self, config: &Configuration, x: Site) -> (f64, f64) {
        match &self.origin {
            TableOrigin::Lv { theta0, theta1, kernel } => {
                if self.entries.is_empty() {
                    return (0.0, 0.0);
                }
                let f1 = density_of_ones(config, kernel, x);
                let f0 = 1.0 - f1;
                (theta0 * f1 * f1, theta1 * f0 * f0)
            }
            TableOrigin::TwoKernel { theta0, theta1, kernel, birth, death } => {
                if self.entries.is_empty() {
                    return (0.0, 0.0);
                }
                let f1 = density_of_ones(config, kernel, x);
                let b = if *theta0 == 0.0 { 0.0 } else { theta0 * f1 * density_of_ones(config, birth, x) };
                let d = if *theta1 == 0.0 { 0.0 } else { theta1 * (1.0 - f1) * (1.0 - density_of_ones(config, death, x)) };
                (b, d)
            }
            TableOrigin::Bias { rate, kernel } => {
                if *rate == 0.0 {
                    (0.0, 0.0)
                } else {
                    (rate * density_of_ones(config, kernel, x), 0.0)
                }
            }
            TableOrigin::User { .. } => self.scan_rates(config, x),
        }
    }

    /// Same as [`PerturbationTable::perturbation_rates`] but always by a scan of the entries.
    pub fn scan_rates(&self, config: &Configuration, x: Site) -> (f64, f64) {
        let mut b = 0.0;
        let mut d = 0.0;
        for e in &self.entries {
            if chi(config, &e.set, x) {
                b += e.beta;
                d += e.delta;
            }
        }
        (b, d)
    }

    /// Validation report at scale `N` against the voter kernel `kernel`.
    pub fn validate(&self, kernel: &KernelSpec, n: u64, seed: u64) -> ValidationReport {
        let p1_sum = self.entries.iter().map(|e| e.set.len().max(1) as f64 * (e.beta.abs() + e.delta.abs())).sum();
        let delta_negative_sum = self.entries.iter().map(|e| (-e.delta).max(0.0)).sum();
        let (k_delta, k_delta_source) = match &self.origin {
            TableOrigin::Lv { theta1, .. } | TableOrigin::TwoKernel { theta1, .. } => (Some(theta1.abs()), KDeltaSource::Certificate),
            TableOrigin::Bias { .. } => (Some(0.0), KDeltaSource::Certificate),
            TableOrigin::User { k_delta: Some(k) } => (Some(*k), KDeltaSource::User),
            TableOrigin::User { k_delta: None } => (None, KDeltaSource::Missing),
        };
        let c_beta = self.c_beta();
        let c_bar = k_delta.map(|k| c_beta + k);
        let positivity = self.check_positivity(kernel, n, k_delta, seed);
        ValidationReport {
            p1_sum,
            delta_negative_sum,
            k_delta,
            k_delta_source,
            c_beta,
            c_bar,
            positivity,
        }
    }

    fn check_positivity(&self, kernel: &KernelSpec, n: u64, k_delta: Option<f64>, seed: u64) -> PositivityCheck {
        // local sites: index 0 is the origin
        let mut sites: Vec<Site> = vec![Site::ORIGIN];
        let mut neigh: Vec<Site> = kernel.support().iter().chain(self.offsets.iter()).copied().collect();
        neigh.sort_unstable();
        neigh.dedup();
        neigh.retain(|s| !s.is_origin());
        sites.extend(neigh);
        let index: FxHashMap<Site, usize> = sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let kern: Vec<(usize, f64)> = kernel.iter().map(|(e, p)| (index[&e], p)).collect();
        let rows: Vec<(Vec<usize>, f64, f64)> = self
            .entries
            .iter()
            .map(|e| (e.set.iter().map(|s| index[s]).collect(), e.beta, e.delta))
            .collect();
        let nf = n as f64;
        let tol = 1e-12 * (nf + self.abs_sum);
        let mut out = PositivityCheck {
            method: if sites.len() <= EXHAUSTIVE_SITES { CheckMethod::Exhaustive } else { CheckMethod::Sampled },
            sites: sites.len(),
            configurations: 0,
            violations: 0,
            min_rate: f64::INFINITY,
            witness: None,
            k_delta_violations: 0,
        };
        let eval = |bits: &[bool], out: &mut PositivityCheck| {
            let f1: f64 = kern.iter().filter(|(i, _)| bits[*i]).map(|(_, p)| p).sum();
            let f0 = 1.0 - f1;
            let occ = bits[0];
            let mut b = 0.0;
            let mut d = 0.0;
            for (set, beta, delta) in &rows {
                if set.iter().all(|&i| bits[i]) {
                    b += beta;
                    d += delta;
                }
            }
            let rate = if occ { nf * f0 + d } else { nf * f1 + b };
            out.configurations += 1;
            out.min_rate = out.min_rate.min(rate);
            if rate < -tol {
                out.violations += 1;
                if out.witness.is_none() {
                    let occupied = sites.iter().zip(bits).filter(|(_, b)| **b).map(|(s, _)| *s).collect();
                    out.witness = Some(Witness { occupied, rate });
                }
            }
            if occ {
                if let Some(k) = k_delta {
                    if d < -k * f0 - tol {
                        out.k_delta_violations += 1;
                    }
                }
            }
        };
        let m = sites.len();
        let mut bits = vec![false; m];
        match out.method {
            CheckMethod::Exhaustive => {
                for mask in 0u64..(1u64 << m) {
                    for (i, b) in bits.iter_mut().enumerate() {
                        *b = mask >> i & 1 == 1;
                    }
                    eval(&bits, &mut out);
                }
            }
            CheckMethod::Sampled => {
                // extreme configurations first, then random densities
                for occ in [false, true] {
                    for rest in [false, true] {
                        bits.iter_mut().for_each(|b| *b = rest);
                        bits[0] = occ;
                        eval(&bits, &mut out);
                    }
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for k in 0..POSITIVITY_SAMPLES {
                    let q: f64 = rng.random();
                    for b in bits.iter_mut() {
                        *b = rng.random::<f64>() < q;
                    }
                    bits[0] = k % 2 == 1;
                    eval(&bits, &mut out);
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KDeltaSource {
    /// Derived from the construction.
    Certificate,
    /// Supplied with the table; only falsified by the positivity scan.
    User,
    Missing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMethod {
    Exhaustive,
    Sampled,
}

/// A local configuration (occupied offsets around the origin) with a negative rate at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub occupied: Vec<Site>,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositivityCheck {
    pub method: CheckMethod,
    pub sites: usize,
    pub configurations: u64,
    pub violations: u64,
    pub min_rate: f64,
    pub witness: Option<Witness>,
    pub k_delta_violations: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub p1_sum: f64,
    pub delta_negative_sum: f64,
    pub k_delta: Option<f64>,
    pub k_delta_source: KDeltaSource,
    pub c_beta: f64,
    pub c_bar: Option<f64>,
    pub positivity: PositivityCheck,
}

impl ValidationReport {
    pub fn positive(&self) -> bool {
        self.positivity.violations == 0
    }

    /// A usable `k_delta` that survived the scan.
    pub fn certified_k_delta(&self) -> Option<f64> {
        if self.positivity.k_delta_violations == 0 {
            self.k_delta
        } else {
            None
        }
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Site, D::Error> {
        let v: Vec<i32> = Vec::deserialize(d)?;
        Site::new(&v).map_err(serde::de::Error::custom)
    }
}

/// `N c^v(x) + c*(x)` with the voter part on `kernel`. Tiny negative values from
/// rounding are clamped to 0; a genuinely negative rate is an error.
pub fn flip_rate(config: &Configuration, site: Site, kernel: &KernelSpec, table: &PerturbationTable, n: u64) -> Result<f64> {
    let occupied = config.contains(site);
    let f1 = density_of_ones(config, kernel, site);
    let (b, d) = table.perturbation_rates(config, site);
    let nf = n as f64;
    let rate = if occupied { nf * (1.0 - f1) + d } else { nf * f1 + b };
    check_rate(rate, nf + table.abs_sum(), config, site)
}

#[inline]
pub(crate) fn check_rate(rate: f64, scale: f64, config: &Configuration, site: Site) -> Result<f64> {
    if rate >= 0.0 {
        Ok(rate)
    } else if rate >= -1e-12 * scale {
        Ok(0.0)
    } else {
        Err(Error::NegativeRate { site, rate, fingerprint: config.fingerprint() })
    }
}

#[derive(Deserialize)]
struct RawRow {
    #[serde(rename = "A")]
    a: Vec<Vec<i32>>,
    #[serde(default)]
    beta: f64,
    #[serde(default)]
    delta: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawTable {
    Rows(Vec<RawRow>),
    Wrapped { entries: Vec<RawRow>, k_delta: Option<f64> },
}

/// Parses a table file: a list of `{"A": [[..], ..], "beta": x, "delta": y}`
/// rows, optionally wrapped as `{"entries": [...], "k_delta": k}`.
pub fn table_from_json(dim: usize, text: &str, k_delta: Option<f64>) -> Result<PerturbationTable> {
    let raw: RawTable = serde_json::from_str(text)?;
    let (rows, kd) = match raw {
        RawTable::Rows(r) => (r, k_delta),
        RawTable::Wrapped { entries, k_delta: k } => (entries, k.or(k_delta)),
    };
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let mut set = Vec::with_capacity(r.a.len());
        for c in &r.a {
            if c.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
            }
            set.push(Site::new(c)?);
        }
        out.push((set, r.beta, r.delta));
    }
    PerturbationTable::from_entries(dim, out, kd)
}
