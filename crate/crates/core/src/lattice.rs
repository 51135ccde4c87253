//! Lattice sites, symmetric step kernels and local densities.
//!
//! Sites are kept as unscaled integer vectors. A kernel `p_N` on the rescaled
//! lattice `Z^d / l_N` is represented by its integer offsets `a` with
//! `p_N(a / l_N) = p(a)`; the division by `l_N` only happens when positions are
//! emitted as real coordinates (see [`ScalingParams::position`]).

use std::fmt;
use std::ops::{Add, Neg, Sub};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rustc_hash::FxHashMap;

use crate::configuration::Configuration;
use crate::error::{Error, Result};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 4;

/// Tolerance on kernel normalization and isotropy for float tables.
pub const KERNEL_TOLERANCE: f64 = 1e-12;

/// A point of `Z^d` padded with zeros to [`MAX_DIM`] coordinates.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Site(pub [i32; MAX_DIM]);

impl Site {
    pub const ORIGIN: Site = Site([0; MAX_DIM]);

    /// Builds a site from up to [`MAX_DIM`] coordinates.
    pub fn new(coords: &[i32]) -> Result<Site> {
        if coords.is_empty() || coords.len() > MAX_DIM {
            return Err(Error::UnsupportedDimension(coords.len()));
        }
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Site(c))
    }

    /// Unit vector along `axis`, scaled by `k`.
    pub fn axis(axis: usize, k: i32) -> Site {
        let mut c = [0; MAX_DIM];
        c[axis] = k;
        Site(c)
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }

    pub fn is_origin(&self) -> bool {
        self.0 == [0; MAX_DIM]
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|&c| i64::from(c) * i64::from(c)).sum()
    }

    /// Maximum norm.
    pub fn sup_norm(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }
}

impl Add for Site {
    type Output = Site;
    #[inline]
    fn add(self, o: Site) -> Site {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(o.0) {
            *a += b;
        }
        Site(c)
    }
}

impl Sub for Site {
    type Output = Site;
    #[inline]
    fn sub(self, o: Site) -> Site {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(o.0) {
            *a -= b;
        }
        Site(c)
    }
}

impl Neg for Site {
    type Output = Site;
    #[inline]
    fn neg(self) -> Site {
        Site(self.0.map(|c| -c))
    }
}

impl fmt::Debug for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let last = self.0.iter().rposition(|&c| c != 0).unwrap_or(0);
        let parts: Vec<String> = self.0[..=last].iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

/// How a kernel was constructed.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelVariant {
    /// Uniform on `([-M, M]^d ∩ Z^d) \ {0}`; offsets `a` correspond to `W_N = a / M`.
    LongRange { range: u32 },
    /// A fixed finite-support table.
    Fixed,
}

#[derive(Clone, Debug)]
enum Weights {
    /// Every support point has probability `1 / count` (exact).
    Uniform { count: u64 },
    Table(Vec<f64>),
}

/// A symmetric step distribution on `Z^d` with finite support.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    dim: usize,
    variant: KernelVariant,
    support: Vec<Site>,
    weights: Weights,
    lookup: FxHashMap<Site, usize>,
    sampler: Option<WeightedIndex<f64>>,
    sigma2: f64,
}

impl KernelSpec {
    /// Uniform kernel on the nonzero points of the box `[-M, M]^d`.
    pub fn long_range(dim: usize, range: u32) -> Result<KernelSpec> {
        check_dim(dim)?;
        if range == 0 {
            return Err(Error::InvalidKernel("long-range kernel needs M_N >= 1".into()));
        }
        let m = range as i32;
        let mut support = Vec::new();
        let mut cur = vec![-m; dim];
        loop {
            let s = Site::new(&cur)?;
            if !s.is_origin() {
                support.push(s);
            }
            let mut k = 0;
            while k < dim {
                if cur[k] < m {
                    cur[k] += 1;
                    break;
                }
                cur[k] = -m;
                k += 1;
            }
            if k == dim {
                break;
            }
        }
        support.sort();
        let count = support.len() as u64;
        // per-coordinate second moment of W_N = a / M
        let side = 2 * u64::from(range) + 1;
        let mut sum_k2 = 0.0;
        for k in -m..=m {
            sum_k2 += f64::from(k) * f64::from(k);
        }
        let sigma2 = sum_k2 * (side.pow(dim as u32 - 1) as f64)
            / (f64::from(range) * f64::from(range))
            / count as f64;
        Ok(Self::assemble(dim, KernelVariant::LongRange { range }, support, Weights::Uniform { count }, sigma2))
    }

    /// Simple symmetric random walk: probability `1/(2d)` on each unit vector.
    pub fn nearest_neighbor(dim: usize) -> Result<KernelSpec> {
        check_dim(dim)?;
        let mut support = Vec::with_capacity(2 * dim);
        for axis in 0..dim {
            support.push(Site::axis(axis, 1));
            support.push(Site::axis(axis, -1));
        }
        support.sort();
        let count = support.len() as u64;
        let sigma2 = 1.0 / dim as f64;
        Ok(Self::assemble(dim, KernelVariant::Fixed, support, Weights::Uniform { count }, sigma2))
    }

    /// Builds a fixed kernel from an explicit offset table, rejecting tables that
    /// are not symmetric, put mass at the origin, are not normalized or have
    /// anisotropic covariance.
    pub fn fixed(dim: usize, table: &[(Site, f64)]) -> Result<KernelSpec> {
        Self::from_table(dim, table, true)
    }

    /// An arbitrary finite law with `p(0) = 0`, as used for competition kernels.
    /// Symmetry and isotropy are not required.
    pub fn law(dim: usize, table: &[(Site, f64)]) -> Result<KernelSpec> {
        Self::from_table(dim, table, false)
    }

    fn from_table(dim: usize, table: &[(Site, f64)], strict: bool) -> Result<KernelSpec> {
        check_dim(dim)?;
        let mut merged: FxHashMap<Site, f64> = FxHashMap::default();
        for &(site, p) in table {
            if site.0[dim..].iter().any(|&c| c != 0) {
                return Err(Error::InvalidKernel(format!("offset {site} has more than {dim} coordinates")));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidKernel(format!("offset {site} has invalid probability {p}")));
            }
            *merged.entry(site).or_insert(0.0) += p;
        }
        merged.retain(|_, p| *p > 0.0);
        if let Some(p0) = merged.get(&Site::ORIGIN) {
            return Err(Error::InvalidKernel(format!("mass at origin: p(0) = {p0}")));
        }
        if merged.is_empty() {
            return Err(Error::InvalidKernel("empty kernel table".into()));
        }
        let total: f64 = merged.values().sum();
        if (total - 1.0).abs() > KERNEL_TOLERANCE {
            return Err(Error::InvalidKernel(format!("probabilities sum to {total}, not 1")));
        }
        for (&site, &p) in merged.iter().filter(|_| strict) {
            let q = merged.get(&-site).copied().unwrap_or(0.0);
            if (p - q).abs() > KERNEL_TOLERANCE {
                return Err(Error::InvalidKernel(format!("asymmetric: p({site}) = {p} but p({}) = {q}", -site)));
            }
        }
        let mut cov = [[0.0f64; MAX_DIM]; MAX_DIM];
        for (&site, &p) in &merged {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i][j] += f64::from(site.0[i]) * f64::from(site.0[j]) * p;
                }
            }
        }
        let sigma2 = cov[0][0];
        let tol = KERNEL_TOLERANCE * sigma2.max(1.0);
        for i in (0..dim).filter(|_| strict) {
            for j in 0..dim {
                let want = if i == j { sigma2 } else { 0.0 };
                if (cov[i][j] - want).abs() > tol {
                    return Err(Error::InvalidKernel(format!(
                        "covariance not isotropic: entry ({i},{j}) is {} but entry (0,0) is {sigma2}",
                        cov[i][j]
                    )));
                }
            }
        }
        let mut entries: Vec<(Site, f64)> = merged.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let support: Vec<Site> = entries.iter().map(|e| e.0).collect();
        let probs: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let count = probs.len() as u64;
        let uniform = probs.iter().all(|&p| (p - 1.0 / count as f64).abs() <= f64::EPSILON);
        let weights = if uniform { Weights::Uniform { count } } else { Weights::Table(probs) };
        Ok(Self::assemble(dim, KernelVariant::Fixed, support, weights, sigma2))
    }

    fn assemble(dim: usize, variant: KernelVariant, support: Vec<Site>, weights: Weights, sigma2: f64) -> KernelSpec {
        let lookup = support.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        let sampler = match &weights {
            Weights::Uniform { .. } => None,
            Weights::Table(p) => Some(WeightedIndex::new(p.iter().copied()).expect("validated weights")),
        };
        KernelSpec { dim, variant, support, weights, lookup, sampler, sigma2 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variant(&self) -> &KernelVariant {
        &self.variant
    }

    /// Support points, sorted.
    pub fn support(&self) -> &[Site] {
        &self.support
    }

    /// `M_N`: the box range of a long-range kernel, 1 for fixed kernels.
    pub fn range(&self) -> u32 {
        match self.variant {
            KernelVariant::LongRange { range } => range,
            KernelVariant::Fixed => 1,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.weights, Weights::Uniform { .. })
    }

    /// `p(a)` for an integer offset.
    pub fn prob(&self, offset: Site) -> f64 {
        match self.lookup.get(&offset) {
            Some(&i) => self.prob_at(i),
            None => 0.0,
        }
    }

    /// Probability of the `i`-th support point.
    #[inline]
    pub fn prob_at(&self, i: usize) -> f64 {
        match &self.weights {
            Weights::Uniform { count } => 1.0 / *count as f64,
            Weights::Table(p) => p[i],
        }
    }

    /// Exact probability as `(numerator, denominator)` when the kernel is uniform.
    pub fn exact_prob(&self, offset: Site) -> Option<(u64, u64)> {
        match self.weights {
            Weights::Uniform { count } => Some((u64::from(self.lookup.contains_key(&offset)), count)),
            Weights::Table(_) => None,
        }
    }

    /// Iterator over `(offset, p(offset))`.
    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.support.iter().enumerate().map(|(i, s)| (*s, self.prob_at(i)))
    }

    /// Per-coordinate second moment `E[(W_N^1)^2]`.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `sum_a p(a)^2`.
    pub fn collision_prob(&self) -> f64 {
        self.iter().map(|(_, p)| p * p).sum()
    }

    /// Draws one step offset.
    #[inline]
    pub fn sample_step<R: Rng + ?Sized>(&self, rng: &mut R) -> Site {
        let i = match (&self.weights, &self.sampler) {
            (Weights::Uniform { count }, _) => rng.random_range(0..*count as usize),
            (_, Some(w)) => w.sample(rng),
            _ => unreachable!("table kernels always carry a sampler"),
        };
        self.support[i]
    }

    /// Short identifier used in reports.
    pub fn id(&self) -> String {
        match (&self.variant, &self.weights) {
            (KernelVariant::LongRange { range }, _) => format!("long_range_d{}_M{}", self.dim, range),
            (KernelVariant::Fixed, Weights::Uniform { count }) if *count == 2 * self.dim as u64 && self.sigma2 == 1.0 / self.dim as f64 => {
                format!("nearest_neighbor_d{}", self.dim)
            }
            (KernelVariant::Fixed, _) => {
                use std::hash::{Hash, Hasher};
                let mut h = rustc_hash::FxHasher::default();
                for (s, p) in self.iter() {
                    s.hash(&mut h);
                    p.to_bits().hash(&mut h);
                }
                format!("fixed_d{}_{:08x}", self.dim, h.finish() as u32)
            }
        }
    }

    /// True when both kernels have the same dimension, support and weights.
    pub fn same_as(&self, other: &KernelSpec) -> bool {
        self.dim == other.dim && self.support == other.support && self.iter().zip(other.iter()).all(|(a, b)| a.1 == b.1)
    }

    /// Smallest nonzero probability, used for positivity sampling.
    pub fn min_prob(&self) -> f64 {
        self.iter().map(|(_, p)| p).fold(f64::INFINITY, f64::min)
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        Err(Error::UnsupportedDimension(dim))
    } else {
        Ok(())
    }
}

/// Rate scale `N`, mass normalizer `N' = N` and spatial scale `l_N`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingParams {
    pub n: u64,
    pub n_prime: u64,
    pub ell: f64,
}

impl ScalingParams {
    pub fn new(n: u64, kernel: &KernelSpec) -> Result<ScalingParams> {
        if n == 0 {
            return Err(Error::InvalidParameter("N must be positive".into()));
        }
        let ell = f64::from(kernel.range()) * (n as f64).sqrt();
        Ok(ScalingParams { n, n_prime: n, ell })
    }

    /// Real position `site / l_N`.
    pub fn position(&self, site: Site) -> [f64; MAX_DIM] {
        site.0.map(|c| f64::from(c) / self.ell)
    }

    /// Mass carried by one occupied site.
    pub fn atom_mass(&self) -> f64 {
        1.0 / self.n_prime as f64
    }
}

/// `f_i(x, xi) = sum_y p(y - x) 1{xi(y) = i}`.
pub fn local_density(config: &Configuration, kernel: &KernelSpec, site: Site, kind: u8) -> f64 {
    if let Some((num, den)) = local_density_exact(config, kernel, site, kind) {
        return num as f64 / den as f64;
    }
    let want = kind == 1;
    kernel.iter().filter(|(e, _)| config.contains(site + *e) == want).map(|(_, p)| p).sum()
}

/// `f_i` as an exact fraction `(count, support size)` for uniform kernels.
pub fn local_density_exact(config: &Configuration, kernel: &KernelSpec, site: Site, kind: u8) -> Option<(u64, u64)> {
    match kernel.weights {
        Weights::Uniform { count } => {
            let ones = occupied_neighbor_count(config, kernel, site) as u64;
            Some((if kind == 1 { ones } else { count - ones }, count))
        }
        Weights::Table(_) => None,
    }
}

/// `f_1(x, xi)`; for uniform kernels this is an exact count over the support size.
#[inline]
pub fn density_of_ones(config: &Configuration, kernel: &KernelSpec, site: Site) -> f64 {
    match kernel.weights {
        Weights::Uniform { count } => {
            let k = kernel.support.iter().filter(|e| config.contains(site + **e)).count();
            k as f64 / count as f64
        }
        Weights::Table(ref p) => kernel
            .support
            .iter()
            .zip(p)
            .filter(|(e, _)| config.contains(site + **e))
            .map(|(_, p)| *p)
            .sum(),
    }
}

/// Number of occupied sites among `site + support`.
pub fn occupied_neighbor_count(config: &Configuration, kernel: &KernelSpec, site: Site) -> usize {
    kernel.support.iter().filter(|e| config.contains(site + **e)).count()
}

/// Kernel definition file:
/// `{"d":3,"variant":"fixed","table":[[[1,0,0],0.1666...],...]}`,
/// `{"d":2,"variant":"long_range","M_N":8}` or `{"d":3,"variant":"nearest_neighbor"}`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelDef {
    Fixed { d: usize, table: Vec<(Vec<i32>, f64)> },
    LongRange {
        d: usize,
        #[serde(rename = "M_N")]
        m_n: u32,
    },
    NearestNeighbor { d: usize },
}

impl KernelDef {
    pub fn dim(&self) -> usize {
        match self {
            KernelDef::Fixed { d, .. } | KernelDef::LongRange { d, .. } | KernelDef::NearestNeighbor { d } => *d,
        }
    }

    pub fn build(&self) -> Result<KernelSpec> {
        match self {
            KernelDef::Fixed { d, table } => {
                let rows = table
                    .iter()
                    .map(|(c, p)| {
                        if c.len() != *d {
                            return Err(Error::DimensionMismatch { expected: *d, got: c.len() });
                        }
                        Ok((Site::new(c)?, *p))
                    })
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::fixed(*d, &rows)
            }
            KernelDef::LongRange { d, m_n } => KernelSpec::long_range(*d, *m_n),
            KernelDef::NearestNeighbor { d } => KernelSpec::nearest_neighbor(*d),
        }
    }
}

impl KernelSpec {
    /// Parses a kernel definition file.
    pub fn from_json(text: &str) -> Result<KernelSpec> {
        let def: KernelDef = serde_json::from_str(text)?;
        def.build()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn long_range_d1_m2_support_and_moment() {
        let k = KernelSpec::long_range(1, 2).unwrap();
        let pts: Vec<i32> = k.support().iter().map(|s| s.0[0]).collect();
        assert_eq!(pts, vec![-2, -1, 1, 2]);
        for (_, p) in k.iter() {
            assert_eq!(p, 0.25);
        }
        // oracle: enumerate W_N = a/M
        let oracle: f64 = k.support().iter().map(|s| (f64::from(s.0[0]) / 2.0).powi(2)).sum::<f64>() / 4.0;
        assert!((oracle - 0.625).abs() < 1e-15);
        assert!((k.sigma2() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn long_range_moment_decreases_to_one_third() {
        for d in 1..=3 {
            let mut prev = 0.0;
            for m in [1, 2, 4, 8] {
                let k = KernelSpec::long_range(d, m).unwrap();
                // brute-force enumeration of the coordinate second moment
                let brute: f64 = k.iter().map(|(s, p)| (f64::from(s.0[0]) / f64::from(m)).powi(2) * p).sum();
                assert!((brute - k.sigma2()).abs() < 1e-12, "d={d} M={m}");
                // closed form (M+1)(2M+1)^d / (3M((2M+1)^d - 1))
                let side = f64::from(2 * m + 1).powi(d as i32);
                let closed = f64::from(m + 1) * side / (3.0 * f64::from(m) * (side - 1.0));
                assert!((closed - k.sigma2()).abs() < 1e-12);
                if prev > 0.0 {
                    assert!(k.sigma2() < prev, "d={d} M={m}");
                }
                assert!(k.sigma2() > 1.0 / 3.0);
                prev = k.sigma2();
            }
            assert!((KernelSpec::long_range(d, 200).unwrap().sigma2() - 1.0 / 3.0).abs() < 1e-2);
        }
    }

    #[test]
    fn long_range_support_size() {
        let k = KernelSpec::long_range(2, 3).unwrap();
        assert_eq!(k.support().len(), 48);
        assert!(KernelSpec::long_range(2, 0).is_err());
    }

    #[test]
    fn nearest_neighbor_d3() {
        let k = KernelSpec::nearest_neighbor(3).unwrap();
        assert_eq!(k.support().len(), 6);
        assert!((k.sigma2() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(k.exact_prob(Site::axis(0, 1)), Some((1, 6)));
        assert_eq!(k.exact_prob(Site::axis(0, 2)), Some((0, 6)));
    }

    #[test]
    fn fixed_table_nearest_neighbor_accepted() {
        let table: Vec<(Site, f64)> = (0..3)
            .flat_map(|a| [(Site::axis(a, 1), 1.0 / 6.0), (Site::axis(a, -1), 1.0 / 6.0)])
            .collect();
        let k = KernelSpec::fixed(3, &table).unwrap();
        assert!((k.sigma2() - 2.0 / 6.0).abs() < 1e-15);
        assert!(k.is_uniform());
    }

    #[test]
    fn fixed_table_anisotropic_rejected() {
        let table = [(Site::axis(0, 1), 0.5), (Site::axis(0, -1), 0.5)];
        let err = KernelSpec::fixed(2, &table).unwrap_err().to_string();
        assert!(err.contains("isotropic"), "{err}");
    }

    #[test]
    fn fixed_table_mass_at_origin_rejected() {
        let table = [(Site::ORIGIN, 0.1), (Site::axis(0, 1), 0.45), (Site::axis(0, -1), 0.45)];
        let err = KernelSpec::fixed(1, &table).unwrap_err().to_string();
        assert!(err.contains("mass at origin"), "{err}");
    }

    #[test]
    fn fixed_table_asymmetric_and_unnormalized_rejected() {
        let asym = [(Site::axis(0, 1), 0.6), (Site::axis(0, -1), 0.4)];
        assert!(KernelSpec::fixed(1, &asym).unwrap_err().to_string().contains("asymmetric"));
        let unnorm = [(Site::axis(0, 1), 0.4), (Site::axis(0, -1), 0.4)];
        assert!(KernelSpec::fixed(1, &unnorm).unwrap_err().to_string().contains("sum to"));
    }

    #[test]
    fn competition_law_skips_shape_checks() {
        let table = [(Site::axis(0, 2), 0.5), (Site::axis(0, -2), 0.5)];
        assert!(KernelSpec::fixed(3, &table).is_err());
        let k = KernelSpec::law(3, &table).unwrap();
        assert_eq!(k.prob(Site::axis(0, 2)), 0.5);
        assert!(KernelSpec::law(3, &[(Site::ORIGIN, 1.0)]).is_err());
    }

    #[test]
    fn non_uniform_fixed_kernel() {
        let table = [
            (Site::axis(0, 1), 0.3),
            (Site::axis(0, -1), 0.3),
            (Site::axis(0, 2), 0.2),
            (Site::axis(0, -2), 0.2),
        ];
        let k = KernelSpec::fixed(1, &table).unwrap();
        assert!(!k.is_uniform());
        assert!((k.sigma2() - (0.6 + 0.4 * 4.0)).abs() < 1e-12);
        assert_eq!(k.prob(Site::axis(0, 2)), 0.2);
    }

    #[test]
    fn sampling_frequencies_nearest_neighbor() {
        let k = KernelSpec::nearest_neighbor(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 600_000;
        let mut counts: FxHashMap<Site, u64> = FxHashMap::default();
        for _ in 0..n {
            let s = k.sample_step(&mut rng);
            assert!(k.support().contains(&s));
            *counts.entry(s).or_insert(0) += 1;
        }
        let p = 1.0 / 6.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for s in k.support() {
            let f = counts[s] as f64 / n as f64;
            assert!((f - p).abs() < 4.0 * se, "{s}: {f}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let table = [(Site::axis(0, 1), 0.3), (Site::axis(0, -1), 0.3), (Site::axis(0, 2), 0.2), (Site::axis(0, -2), 0.2)];
        let k = KernelSpec::fixed(1, &table).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| k.sample_step(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(draw(3).iter().all(|s| k.support().contains(s)));
    }

    #[test]
    fn local_density_examples() {
        let k = KernelSpec::nearest_neighbor(3).unwrap();
        let mut cfg = Configuration::new(3);
        cfg.insert(Site::ORIGIN);
        assert!((local_density(&cfg, &k, Site::axis(0, 1), 1) - 1.0 / 6.0).abs() < 1e-15);
        let empty = Configuration::new(3);
        assert_eq!(local_density(&empty, &k, Site::axis(1, 4), 0), 1.0);
    }

    #[test]
    fn scaling_params() {
        let lr = KernelSpec::long_range(2, 4).unwrap();
        let s = ScalingParams::new(100, &lr).unwrap();
        assert_eq!(s.ell, 40.0);
        assert_eq!(s.n_prime, s.n);
        let nn = KernelSpec::nearest_neighbor(3).unwrap();
        assert_eq!(ScalingParams::new(400, &nn).unwrap().ell, 20.0);
    }

    proptest::proptest! {
        #[test]
        fn density_sums_to_one(bits in proptest::collection::vec(proptest::bool::ANY, 27), x in -2i32..=2, y in -2i32..=2) {
            let k = KernelSpec::nearest_neighbor(3).unwrap();
            let mut cfg = Configuration::new(3);
            for (i, b) in bits.iter().enumerate() {
                if *b {
                    let i = i as i32;
                    cfg.insert(Site::new(&[i % 3 - 1, (i / 3) % 3 - 1, i / 9 - 1]).unwrap());
                }
            }
            let site = Site::new(&[x, y, 0]).unwrap();
            let f0 = local_density(&cfg, &k, site, 0);
            let f1 = local_density(&cfg, &k, site, 1);
            proptest::prop_assert!((f0 + f1 - 1.0).abs() < 1e-15);
            let (n0, d0) = local_density_exact(&cfg, &k, site, 0).unwrap();
            let (n1, d1) = local_density_exact(&cfg, &k, site, 1).unwrap();
            proptest::prop_assert_eq!((n0 + n1, d0), (d1, d1));
            // translation covariance
            let shift = Site::new(&[5, -3, 2]).unwrap();
            let moved = cfg.translated(shift);
            proptest::prop_assert_eq!(local_density(&moved, &k, site + shift, 1), f1);
        }
    }

    #[test]
    fn kernel_files() {
        let k = KernelSpec::from_json(r#"{"d":2,"variant":"long_range","M_N":8}"#).unwrap();
        assert_eq!(k.support().len(), 17 * 17 - 1);
        let t = r#"{"d":1,"variant":"fixed","table":[[[1],0.5],[[-1],0.5]]}"#;
        assert!((KernelSpec::from_json(t).unwrap().sigma2() - 1.0).abs() < 1e-15);
        let bad = r#"{"d":2,"variant":"fixed","table":[[[1,0],0.5],[[-1,0],0.5]]}"#;
        assert!(matches!(KernelSpec::from_json(bad), Err(Error::InvalidKernel(_))));
        assert!(KernelSpec::from_json(r#"{"d":1,"variant":"fixed","table":[[[1,0],1.0]]}"#).is_err());
    }
}
