//! Empirical measures, test functions and exact pathwise functionals.
//!
//! [`Decomposer`] follows a path event by event and accumulates
//! `X_t(phi_t) = X_0(phi_0) + D^1 + D^2 - D^3 + M` together with the
//! predictable square function `<M>_1 + <M>_2`. Between events the
//! configuration is constant, so every time integral is a sum over
//! inter-event intervals. For time-dependent `phi` the integrands are
//! polynomials in time on each interval and are integrated exactly.
//!
//! `M` is computed directly as the jump sum of `X(phi)` minus its compensator,
//! and the compensator's voter part is evaluated site by site as
//! `sum_x phi(x) N (f_1(x) - xi(x))` while `D^1` uses `sum_x xi(x) A_N phi(x)`.
//! The two agree only through the symmetry of the kernel, so the residual of
//! the identity is a real check of the bookkeeping.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::configuration::Configuration;
use crate::error::{Error, Result};
use crate::lattice::{KernelSpec, ScalingParams, Site, MAX_DIM};
use crate::perturbation::chi;
use crate::report::fmt_f64;
use crate::simulator::{Domain, EventLog, LocalRates, Observer, RateModel};

/// A knot of a time-dependent test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub time: f64,
    pub phi: TestFn,
}

fn one() -> f64 {
    1.0
}

/// Test functions with analytic gradient and Laplacian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFn {
    Constant {
        c: f64,
    },
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump {
        center: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// `S((radius + ramp - |x|) / ramp)` with the quintic smoothstep
    /// `S(u) = 6u^5 - 15u^4 + 10u^3` clamped to `[0, 1]`: 1 inside `radius`,
    /// 0 beyond `radius + ramp`, `C^2` in between.
    SmoothIndicator {
        radius: f64,
        ramp: f64,
    },
    /// Linear interpolation in time between static knots; constant outside.
    TimeDependent {
        knots: Vec<Knot>,
    },
}

fn smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if u >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let u2 = u * u;
        (u2 * u * (10.0 - 15.0 * u + 6.0 * u2), 30.0 * u2 * (1.0 - u) * (1.0 - u), 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u))
    }
}

fn dist2(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}

impl TestFn {
    pub fn from_json(text: &str) -> Result<TestFn> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TestFn::Constant { .. } => "constant",
            TestFn::GaussianBump { .. } => "gaussian_bump",
            TestFn::SmoothIndicator { .. } => "smooth_indicator",
            TestFn::TimeDependent { .. } => "time_dependent",
        }
    }

    pub fn is_static(&self) -> bool {
        !matches!(self, TestFn::TimeDependent { .. })
    }

    /// Checks parameters against dimension `dim`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::UnsupportedTestFn(m));
        match self {
            TestFn::Constant { c } if !c.is_finite() => bad(format!("constant {c}")),
            TestFn::GaussianBump { center, width, amplitude } => {
                if center.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: center.len() });
                }
                if !(*width > 0.0 && width.is_finite() && amplitude.is_finite()) {
                    return bad(format!("gaussian bump width {width}, amplitude {amplitude}"));
                }
                Ok(())
            }
            TestFn::SmoothIndicator { radius, ramp } if !(*radius >= 0.0 && *ramp > 0.0) => {
                bad(format!("smooth indicator radius {radius}, ramp {ramp}"))
            }
            TestFn::TimeDependent { knots } => {
                if knots.is_empty() {
                    return bad("time-dependent test function without knots".into());
                }
                for w in knots.windows(2) {
                    if !(w[1].time > w[0].time) {
                        return bad("knot times must be strictly increasing".into());
                    }
                }
                for k in knots {
                    if !k.phi.is_static() {
                        return bad("knots must be static test functions".into());
                    }
                    k.phi.validate(dim)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Static basis functions and the knot times (empty for a static function).
    pub fn basis(&self) -> (Vec<TestFn>, Vec<f64>) {
        match self {
            TestFn::TimeDependent { knots } if knots.len() > 1 => {
                (knots.iter().map(|k| k.phi.clone()).collect(), knots.iter().map(|k| k.time).collect())
            }
            TestFn::TimeDependent { knots } => (vec![knots[0].phi.clone()], Vec::new()),
            other => (vec![other.clone()], Vec::new()),
        }
    }

    fn static_value(&self, x: &[f64]) -> f64 {
        match self {
            TestFn::Constant { c } => *c,
            TestFn::GaussianBump { center, width, amplitude } => amplitude * (-dist2(x, center) / (2.0 * width * width)).exp(),
            TestFn::SmoothIndicator { radius, ramp } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                smoothstep((radius + ramp - r) / ramp).0
            }
            TestFn::TimeDependent { .. } => unreachable!("static evaluation of a time-dependent function"),
        }
    }

    fn static_gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            TestFn::Constant { .. } => vec![0.0; x.len()],
            TestFn::GaussianBump { center, width, .. } => {
                let v = self.static_value(x);
                x.iter().zip(center).map(|(a, c)| -v * (a - c) / (width * width)).collect()
            }
            TestFn::SmoothIndicator { radius, ramp } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    return vec![0.0; x.len()];
                }
                let (_, s1, _) = smoothstep((radius + ramp - r) / ramp);
                x.iter().map(|v| -s1 / ramp * v / r).collect()
            }
            TestFn::TimeDependent { .. } => unreachable!(),
        }
    }

    fn static_laplacian(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        match self {
            TestFn::Constant { .. } => 0.0,
            TestFn::GaussianBump { center, width, .. } => {
                let w2 = width * width;
                self.static_value(x) * (dist2(x, center) / (w2 * w2) - d / w2)
            }
            TestFn::SmoothIndicator { radius, ramp } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (_, s1, s2) = smoothstep((radius + ramp - r) / ramp);
                // radial g(r) = S((R + h - r) / h): g' = -S'/h, g'' = S''/h^2
                let g1 = -s1 / ramp;
                let g2 = s2 / (ramp * ramp);
                if r == 0.0 {
                    d * g2
                } else {
                    g2 + (d - 1.0) / r * g1
                }
            }
            TestFn::TimeDependent { .. } => unreachable!(),
        }
    }

    fn weights_at(&self, t: f64) -> Vec<(usize, f64)> {
        match self {
            TestFn::TimeDependent { knots } => hat_weights(&knots.iter().map(|k| k.time).collect::<Vec<_>>(), t),
            _ => vec![(0, 1.0)],
        }
    }

    fn knot_fn(&self, i: usize) -> &TestFn {
        match self {
            TestFn::TimeDependent { knots } => &knots[i].phi,
            other => other,
        }
    }

    /// `phi(t, x)`.
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.weights_at(t).iter().map(|&(i, w)| w * self.knot_fn(i).static_value(x)).sum()
    }

    /// `d phi / dt` (0 at and outside the knot range ends; right derivative at interior knots).
    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            TestFn::TimeDependent { knots } if knots.len() > 1 => {
                let times: Vec<f64> = knots.iter().map(|k| k.time).collect();
                match hat_interval(&times, t) {
                    Some(j) => {
                        let dt = times[j + 1] - times[j];
                        (knots[j + 1].phi.static_value(x) - knots[j].phi.static_value(x)) / dt
                    }
                    None => 0.0,
                }
            }
            _ => 0.0,
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (i, w) in self.weights_at(t) {
            for (a, b) in g.iter_mut().zip(self.knot_fn(i).static_gradient(x)) {
                *a += w * b;
            }
        }
        g
    }

    pub fn laplacian(&self, t: f64, x: &[f64]) -> f64 {
        self.weights_at(t).iter().map(|&(i, w)| w * self.knot_fn(i).static_laplacian(x)).sum()
    }

    /// `sup |phi|`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            TestFn::Constant { c } => c.abs(),
            TestFn::GaussianBump { amplitude, .. } => amplitude.abs(),
            TestFn::SmoothIndicator { .. } => 1.0,
            TestFn::TimeDependent { knots } => knots.iter().map(|k| k.phi.sup_norm()).fold(0.0, f64::max),
        }
    }

    /// `sup |grad phi|`.
    pub fn gradient_bound(&self) -> f64 {
        match self {
            TestFn::Constant { .. } => 0.0,
            TestFn::GaussianBump { width, amplitude, .. } => amplitude.abs() * (-0.5f64).exp() / width,
            TestFn::SmoothIndicator { ramp, .. } => 15.0 / (8.0 * ramp),
            TestFn::TimeDependent { knots } => knots.iter().map(|k| k.phi.gradient_bound()).fold(0.0, f64::max),
        }
    }

    /// `||phi||_Lip = sup |phi| + sup |phi(x) - phi(y)| / |x - y|`.
    pub fn lipschitz_norm(&self) -> f64 {
        self.sup_norm() + self.gradient_bound()
    }
}

/// Index `j` with `times[j] <= t < times[j+1]`, if `t` is inside the knot range.
fn hat_interval(times: &[f64], t: f64) -> Option<usize> {
    if times.len() < 2 || t < times[0] || t >= times[times.len() - 1] {
        return None;
    }
    Some(times.partition_point(|&s| s <= t) - 1)
}

fn hat_weights(times: &[f64], t: f64) -> Vec<(usize, f64)> {
    let m = times.len();
    if m == 1 || t <= times[0] {
        return vec![(0, 1.0)];
    }
    if t >= times[m - 1] {
        return vec![(m - 1, 1.0)];
    }
    let j = hat_interval(times, t).expect("inside knot range");
    let lam = (t - times[j]) / (times[j + 1] - times[j]);
    vec![(j, 1.0 - lam), (j + 1, lam)]
}

/// Finite-difference audit of `||phi||_Lip` at time `t` over `grid`:
/// max `|phi|` plus max norm of the central-difference gradient.
pub fn lipschitz_audit(phi: &TestFn, t: f64, grid: &[Vec<f64>], h: f64) -> f64 {
    let mut sup = 0.0f64;
    let mut grad = 0.0f64;
    for x in grid {
        sup = sup.max(phi.value(t, x).abs());
        let mut g2 = 0.0;
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            g2 += ((phi.value(t, &a) - phi.value(t, &b)) / (2.0 * h)).powi(2);
        }
        grad = grad.max(g2.sqrt());
    }
    sup + grad
}

/// `X^N`: atoms of mass `1/N` at `site / l_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub dim: usize,
    pub mass: f64,
    pub positions: Vec<[f64; MAX_DIM]>,
}

impl EmpiricalMeasure {
    pub fn new(config: &Configuration, scaling: &ScalingParams) -> EmpiricalMeasure {
        EmpiricalMeasure {
            dim: config.dim(),
            mass: scaling.atom_mass(),
            positions: config.sorted().into_iter().map(|s| scaling.position(s)).collect(),
        }
    }

    pub fn atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.positions.len() as f64 * self.mass
    }

    /// `X(phi_t) = sum mass * phi(t, x)`.
    pub fn integrate(&self, phi: &TestFn, t: f64) -> f64 {
        self.positions.iter().map(|p| self.mass * phi.value(t, &p[..self.dim])).sum()
    }

    /// `(position, mass)` pairs.
    pub fn pairs(&self) -> Vec<(Vec<f64>, f64)> {
        self.positions.iter().map(|p| (p[..self.dim].to_vec(), self.mass)).collect()
    }
}

/// `X(phi)` of a configuration.
pub fn integrate(config: &Configuration, scaling: &ScalingParams, phi: &TestFn, t: f64) -> f64 {
    EmpiricalMeasure::new(config, scaling).integrate(phi, t)
}

/// `sup_x |A_N phi(x) - sigma^2 Delta phi(x) / 2|` over `grid` (real positions),
/// with `sigma^2` the kernel's per-coordinate second moment.
pub fn generator_gap(kernel: &KernelSpec, n: u64, phi: &TestFn, grid: &[Vec<f64>]) -> Result<f64> {
    let scaling = ScalingParams::new(n, kernel)?;
    phi.validate(kernel.dim())?;
    let d = kernel.dim();
    let mut worst = 0.0f64;
    for x in grid {
        if x.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: x.len() });
        }
        let fx = phi.value(0.0, x);
        let mut a = 0.0;
        let mut y = x.clone();
        for (e, p) in kernel.iter() {
            for i in 0..d {
                y[i] = x[i] + f64::from(e.0[i]) / scaling.ell;
            }
            a += p * (phi.value(0.0, &y) - fx);
        }
        let gap = (n as f64 * a - kernel.sigma2() * phi.laplacian(0.0, x) / 2.0).abs();
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// One row of a decomposition report.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub t: f64,
    pub x_phi: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub m: f64,
    pub qv1: f64,
    pub qv2: f64,
    pub residual: f64,
    /// `2 int X(phi^2 f_0) ds`.
    pub qv1_f0: f64,
    /// `<M>_1 - 2 int X(phi^2 f_0) ds`.
    pub m1: f64,
}

impl DecompositionRow {
    pub fn qv(&self) -> f64 {
        self.qv1 + self.qv2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub rows: Vec<DecompositionRow>,
    pub x0: f64,
    /// Largest `|residual| / scale` over every event time and grid time.
    pub max_rel_residual: f64,
    pub events: u64,
}

pub const DECOMPOSITION_HEADER: [&str; 11] = ["t", "X_phi", "D1", "D2", "D3", "M", "QV1", "QV2", "residual", "QV1_f0", "m1"];

impl DecompositionReport {
    pub fn last(&self) -> Option<&DecompositionRow> {
        self.rows.last()
    }

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| [r.t, r.x_phi, r.d1, r.d2, r.d3, r.m, r.qv1, r.qv2, r.residual, r.qv1_f0, r.m1].iter().map(|v| fmt_f64(*v)).collect())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(DECOMPOSITION_HEADER)?;
        for row in self.csv_rows() {
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Linear sums per basis function.
#[derive(Clone, Copy, Debug, Default)]
struct Lin {
    x: f64,
    ax: f64,
    b: f64,
    d3: f64,
    c: f64,
}

/// Quadratic sums per basis pair.
#[derive(Clone, Copy, Debug, Default)]
struct Quad {
    q1: f64,
    q2: f64,
    q3: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    ax: f64,
    xdot: f64,
    d2: f64,
    d3: f64,
    c: f64,
    qv1: f64,
    qv2: f64,
    qv1_f0: f64,
    jumps: f64,
}

/// Full recomputation period of the running sums, in events.
const DECOMP_REFRESH: u64 = 1 << 12;

/// Observer accumulating the martingale decomposition of `X_t(phi_t)`.
pub struct Decomposer {
    model: Arc<RateModel>,
    scaling: ScalingParams,
    phi: TestFn,
    basis: Vec<TestFn>,
    knots: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    lin: Vec<Lin>,
    quad: Vec<Quad>,
    acc: Acc,
    last: f64,
    x0: f64,
    grid: Vec<f64>,
    next_grid: usize,
    rows: Vec<DecompositionRow>,
    max_rel: f64,
    events: u64,
    since_refresh: u64,
    dim: usize,
}

impl Decomposer {
    /// `grid` lists the report times (sorted). The model must have an unbounded domain.
    pub fn new(model: Arc<RateModel>, phi: TestFn, grid: Vec<f64>) -> Result<Decomposer> {
        if model.domain() != Domain::Unbounded {
            return Err(Error::InvalidParameter("the decomposition needs an unbounded domain".into()));
        }
        let dim = model.dim();
        phi.validate(dim)?;
        if grid.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::InvalidParameter("report grid must be sorted".into()));
        }
        let scaling = ScalingParams::new(model.n(), model.kernel())?;
        let (basis, knots) = phi.basis();
        let k = basis.len();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|i| (i..k.min(i + 2)).map(move |j| (i, j))).collect();
        Ok(Decomposer {
            model,
            scaling,
            phi,
            lin: vec![Lin::default(); k],
            quad: vec![Quad::default(); pairs.len()],
            basis,
            knots,
            pairs,
            acc: Acc::default(),
            last: 0.0,
            x0: 0.0,
            grid,
            next_grid: 0,
            rows: Vec::new(),
            max_rel: 0.0,
            events: 0,
            since_refresh: 0,
            dim,
        })
    }

    pub fn report(&self) -> DecompositionReport {
        DecompositionReport { rows: self.rows.clone(), x0: self.x0, max_rel_residual: self.max_rel, events: self.events }
    }

    fn weights(&self, t: f64) -> Vec<(usize, f64)> {
        if self.knots.is_empty() {
            vec![(0, 1.0)]
        } else {
            hat_weights(&self.knots, t)
        }
    }

    fn dense_weights(&self, t: f64) -> Vec<f64> {
        let mut w = vec![0.0; self.basis.len()];
        for (i, v) in self.weights(t) {
            w[i] = v;
        }
        w
    }

    #[inline]
    fn psi(&self, k: usize, site: Site) -> f64 {
        let p = self.scaling.position(site);
        self.basis[k].static_value(&p[..self.dim])
    }

    /// `A_N psi_k(x) = sum_e speed p(e) (psi(x + e) - psi(x))`.
    fn generator(&self, k: usize, x: Site) -> f64 {
        let base = self.psi(k, x);
        let s: f64 = self.model.kernel().iter().map(|(e, p)| p * (self.psi(k, x + e) - base)).sum();
        self.model.speed() * s
    }

    /// Adds `sign` times the contribution of site `x` (excluding the generator term).
    fn contribute(&mut self, config: &Configuration, x: Site, sign: f64) {
        let lr: LocalRates = self.model.local(config, x);
        let occ = if lr.occupied { 1.0 } else { 0.0 };
        let speed = self.model.speed();
        let psis: Vec<f64> = (0..self.basis.len()).map(|k| self.psi(k, x)).collect();
        let comp = speed * (lr.f1 - occ) + lr.birth * (1.0 - occ) - lr.death * occ;
        for (k, &p) in psis.iter().enumerate() {
            let l = &mut self.lin[k];
            l.x += sign * occ * p;
            l.b += sign * p * lr.birth;
            l.d3 += sign * occ * p * (lr.birth + lr.death);
            l.c += sign * p * comp;
        }
        let q1 = speed * lr.voter();
        let q2 = if lr.occupied { lr.death } else { lr.birth };
        let q3 = occ * (1.0 - lr.f1);
        for (idx, &(i, j)) in self.pairs.iter().enumerate() {
            let pp = psis[i] * psis[j];
            let q = &mut self.quad[idx];
            q.q1 += sign * pp * q1;
            q.q2 += sign * pp * q2;
            q.q3 += sign * pp * q3;
        }
    }

    fn recompute(&mut self, config: &Configuration) {
        self.lin.iter_mut().for_each(|l| *l = Lin::default());
        self.quad.iter_mut().for_each(|q| *q = Quad::default());
        let model = Arc::clone(&self.model);
        for x in model.candidates(config) {
            self.contribute(config, x, 1.0);
        }
        for y in config.iter() {
            for k in 0..self.basis.len() {
                let a = self.generator(k, y);
                self.lin[k].ax += a;
            }
        }
        self.since_refresh = 0;
    }

    fn x_phi(&self, t: f64) -> f64 {
        self.weights(t).iter().map(|&(k, w)| w * self.lin[k].x).sum::<f64>() / self.scaling.n as f64
    }

    /// Integrates the running sums over `[self.last, t]`.
    fn integrate_to(&mut self, t: f64) {
        if t <= self.last {
            return;
        }
        let n = self.scaling.n as f64;
        let (a, b) = (self.last, t);
        // break points: knots strictly inside (a, b)
        let mut cuts = vec![a];
        cuts.extend(self.knots.iter().copied().filter(|&s| s > a && s < b));
        cuts.push(b);
        let wa = self.dense_weights(a);
        let wb = self.dense_weights(b);
        for seg in cuts.windows(2) {
            let (s0, s1) = (seg[0], seg[1]);
            let h = s1 - s0;
            let w0 = self.dense_weights(s0);
            let w1 = self.dense_weights(s1);
            let wm = self.dense_weights(0.5 * (s0 + s1));
            for (k, l) in self.lin.iter().enumerate() {
                let iw = h * 0.5 * (w0[k] + w1[k]);
                self.acc.ax += iw * l.ax / n;
                self.acc.d2 += iw * l.b / n;
                self.acc.d3 += iw * l.d3 / n;
                self.acc.c += iw * l.c / n;
            }
            for (idx, &(i, j)) in self.pairs.iter().enumerate() {
                let mult = if i == j { 1.0 } else { 2.0 };
                let iww = h / 6.0 * (w0[i] * w0[j] + 4.0 * wm[i] * wm[j] + w1[i] * w1[j]) * mult;
                let q = self.quad[idx];
                self.acc.qv1 += iww * q.q1 / (n * n);
                self.acc.qv2 += iww * q.q2 / (n * n);
                self.acc.qv1_f0 += 2.0 * iww * q.q3 / n;
            }
        }
        // int w_k' ds = w_k(b) - w_k(a) exactly
        for (k, l) in self.lin.iter().enumerate() {
            self.acc.xdot += (wb[k] - wa[k]) * l.x / n;
        }
        self.last = t;
    }

    fn row(&self, t: f64) -> (DecompositionRow, f64) {
        let acc = &self.acc;
        let x_t = self.x_phi(t);
        let d1 = acc.ax + acc.xdot;
        let m = acc.jumps - acc.c;
        let residual = x_t - self.x0 - (d1 + acc.d2 - acc.d3) - m;
        let scale = [x_t, self.x0, d1, acc.d2, acc.d3, acc.jumps, acc.c, acc.xdot, acc.ax]
            .iter()
            .fold(self.phi.sup_norm() / self.scaling.n as f64, |s, v| s.max(v.abs()));
        let row = DecompositionRow {
            t,
            x_phi: x_t,
            d1,
            d2: acc.d2,
            d3: acc.d3,
            m,
            qv1: acc.qv1,
            qv2: acc.qv2,
            residual,
            qv1_f0: acc.qv1_f0,
            m1: acc.qv1 - acc.qv1_f0,
        };
        (row, if scale > 0.0 { residual.abs() / scale } else { residual.abs() })
    }

    fn emit_grid_until(&mut self, t: f64, inclusive: bool) {
        while self.next_grid < self.grid.len() {
            let g = self.grid[self.next_grid];
            if g < t || (inclusive && g <= t) {
                self.integrate_to(g);
                let (row, rel) = self.row(g);
                self.max_rel = self.max_rel.max(rel);
                self.rows.push(row);
                self.next_grid += 1;
            } else {
                break;
            }
        }
    }

    fn affected(&self, site: Site) -> Vec<Site> {
        self.model.dependence().iter().map(|&a| site - a).collect()
    }
}

impl Observer for Decomposer {
    fn on_start(&mut self, time: f64, config: &Configuration) -> Result<()> {
        self.acc = Acc::default();
        self.rows.clear();
        self.next_grid = 0;
        self.max_rel = 0.0;
        self.events = 0;
        self.last = time;
        self.recompute(config);
        self.x0 = self.x_phi(time);
        self.emit_grid_until(time, true);
        Ok(())
    }

    fn before_flip(&mut self, time: f64, site: Site, config: &Configuration) -> Result<()> {
        self.emit_grid_until(time, false);
        self.integrate_to(time);
        for x in self.affected(site) {
            self.contribute(config, x, -1.0);
        }
        if config.contains(site) {
            for k in 0..self.basis.len() {
                let a = self.generator(k, site);
                self.lin[k].ax -= a;
            }
        }
        Ok(())
    }

    fn after_flip(&mut self, time: f64, site: Site, value: bool, config: &Configuration) -> Result<()> {
        for x in self.affected(site) {
            self.contribute(config, x, 1.0);
        }
        if value {
            for k in 0..self.basis.len() {
                let a = self.generator(k, site);
                self.lin[k].ax += a;
            }
        }
        let p = self.scaling.position(site);
        let jump = self.phi.value(time, &p[..self.dim]) / self.scaling.n as f64;
        self.acc.jumps += if value { jump } else { -jump };
        self.events += 1;
        self.since_refresh += 1;
        if self.since_refresh >= DECOMP_REFRESH {
            self.recompute(config);
        }
        let (_, rel) = self.row(time);
        self.max_rel = self.max_rel.max(rel);
        Ok(())
    }

    fn on_finish(&mut self, time: f64, _config: &Configuration) -> Result<()> {
        self.emit_grid_until(time, true);
        self.integrate_to(time);
        if self.rows.last().is_none_or(|r| r.t < time) {
            let (row, rel) = self.row(time);
            self.max_rel = self.max_rel.max(rel);
            self.rows.push(row);
        }
        Ok(())
    }
}

/// Replays a complete event log through a [`Decomposer`].
pub fn decompose(log: &EventLog, model: Arc<RateModel>, phi: &TestFn, grid: Vec<f64>) -> Result<DecompositionReport> {
    let mut d = Decomposer::new(model, phi.clone(), grid)?;
    log.replay(&mut [&mut d])?;
    Ok(d.report())
}

/// Observer for `int_0^t Delta_N(A, phi, xi_s) ds` with
/// `Delta_N = (1/N) sum_x phi(x) chi(A, x, xi) - sigma_N(A) X(phi)`.
///
/// For `A = ∅` the first term is taken as `X(phi)`, so that `Delta_N = (1 - sigma_N(∅)) X(phi) = 0`.
pub struct PerturbationStatistic {
    set: Vec<Site>,
    phi: TestFn,
    sigma: f64,
    scaling: ScalingParams,
    dim: usize,
    sum_chi: f64,
    sum_x: f64,
    integral: f64,
    last: f64,
}

impl PerturbationStatistic {
    pub fn new(set: &[Site], phi: TestFn, sigma: f64, kernel: &KernelSpec, n: u64) -> Result<PerturbationStatistic> {
        if !phi.is_static() {
            return Err(Error::UnsupportedTestFn("the perturbation statistic takes a static test function".into()));
        }
        phi.validate(kernel.dim())?;
        Ok(PerturbationStatistic {
            set: crate::perturbation::canonical_set(set),
            phi,
            sigma,
            scaling: ScalingParams::new(n, kernel)?,
            dim: kernel.dim(),
            sum_chi: 0.0,
            sum_x: 0.0,
            integral: 0.0,
            last: 0.0,
        })
    }

    /// `int_0^t Delta_N ds` so far.
    pub fn integral(&self) -> f64 {
        self.integral
    }

    fn phi_at(&self, x: Site) -> f64 {
        let p = self.scaling.position(x);
        self.phi.value(0.0, &p[..self.dim])
    }

    fn delta(&self) -> f64 {
        let first = if self.set.is_empty() { self.sum_x } else { self.sum_chi };
        (first - self.sigma * self.sum_x) / self.scaling.n as f64
    }

    fn advance(&mut self, t: f64) {
        self.integral += self.delta() * (t - self.last);
        self.last = t;
    }

    fn local(&mut self, site: Site, config: &Configuration, sign: f64) {
        if config.contains(site) {
            self.sum_x += sign * self.phi_at(site);
        }
        for i in 0..self.set.len() {
            let x = site - self.set[i];
            if chi(config, &self.set, x) {
                self.sum_chi += sign * self.phi_at(x);
            }
        }
    }
}

impl Observer for PerturbationStatistic {
    fn on_start(&mut self, time: f64, config: &Configuration) -> Result<()> {
        self.last = time;
        self.integral = 0.0;
        self.sum_x = config.iter().map(|s| self.phi_at(s)).sum();
        let mut xs: Vec<Site> = Vec::new();
        if let Some(&a0) = self.set.first() {
            xs = config.iter().map(|y| y - a0).filter(|&x| chi(config, &self.set, x)).collect();
        }
        self.sum_chi = xs.into_iter().map(|x| self.phi_at(x)).sum();
        Ok(())
    }

    fn before_flip(&mut self, time: f64, site: Site, config: &Configuration) -> Result<()> {
        self.advance(time);
        self.local(site, config, -1.0);
        Ok(())
    }

    fn after_flip(&mut self, _time: f64, site: Site, _value: bool, config: &Configuration) -> Result<()> {
        self.local(site, config, 1.0);
        Ok(())
    }

    fn on_finish(&mut self, time: f64, _config: &Configuration) -> Result<()> {
        self.advance(time);
        Ok(())
    }
}

/// `int_0^t Delta_N ds` along a complete event log.
pub fn perturbation_statistic(log: &EventLog, set: &[Site], phi: &TestFn, sigma: f64, kernel: &KernelSpec, n: u64) -> Result<f64> {
    let mut p = PerturbationStatistic::new(set, phi.clone(), sigma, kernel, n)?;
    log.replay(&mut [&mut p])?;
    Ok(p.integral())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation::PerturbationTable;
    use crate::simulator::{run, EventEngine, SimRng};
    use rand::SeedableRng;

    fn nn3() -> KernelSpec {
        KernelSpec::nearest_neighbor(3).unwrap()
    }

    fn bump3() -> TestFn {
        TestFn::GaussianBump { center: vec![0.1, 0.0, -0.1], width: 0.4, amplitude: 1.0 }
    }

    #[test]
    fn empirical_measure_examples() {
        let k = nn3();
        let sc = ScalingParams::new(100, &k).unwrap();
        let m = EmpiricalMeasure::new(&Configuration::from_sites(3, [Site::ORIGIN]), &sc);
        assert_eq!(m.atoms(), 1);
        assert!((m.total_mass() - 0.01).abs() < 1e-18);
        let g = TestFn::GaussianBump { center: vec![0.0; 3], width: 1.0, amplitude: 1.0 };
        assert!((m.integrate(&g, 0.0) - 0.01).abs() < 1e-18);
        let far = TestFn::GaussianBump { center: vec![50.0, 0.0, 0.0], width: 1.0, amplitude: 1.0 };
        assert!(m.integrate(&far, 0.0) < 1e-12);
        assert_eq!(EmpiricalMeasure::new(&Configuration::new(3), &sc).total_mass(), 0.0);
        let big = Configuration::from_sites(3, crate::configuration::cube_sites(3, 0, 9).into_iter().take(200));
        assert!((EmpiricalMeasure::new(&big, &sc).integrate(&TestFn::Constant { c: 1.0 }, 0.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let fns = [
            bump3(),
            TestFn::SmoothIndicator { radius: 0.5, ramp: 0.7 },
            TestFn::TimeDependent {
                knots: vec![Knot { time: 0.0, phi: bump3() }, Knot { time: 1.0, phi: TestFn::SmoothIndicator { radius: 0.2, ramp: 1.0 } }],
            },
        ];
        let h = 1e-4;
        for f in &fns {
            for x in [[0.3, -0.2, 0.5], [0.9, 0.1, 0.0], [0.05, 0.6, -0.4]] {
                let t = 0.3;
                let mut lap = 0.0;
                let g = f.gradient(t, &x);
                for i in 0..3 {
                    let mut a = x;
                    let mut b = x;
                    a[i] += h;
                    b[i] -= h;
                    let (fa, fb, f0) = (f.value(t, &a), f.value(t, &b), f.value(t, &x));
                    assert!(((fa - fb) / (2.0 * h) - g[i]).abs() < 1e-6, "{} gradient", f.kind());
                    lap += (fa - 2.0 * f0 + fb) / (h * h);
                }
                assert!((lap - f.laplacian(t, &x)).abs() < 1e-4, "{} laplacian", f.kind());
                let dt = (f.value(t + h, &x) - f.value(t - h, &x)) / (2.0 * h);
                assert!((dt - f.time_derivative(t, &x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn lipschitz_norm_matches_audit() {
        let line = |d: usize| -> Vec<Vec<f64>> {
            (0..=4000).map(|i| {
                let mut v = vec![0.0; d];
                v[0] = -2.0 + i as f64 * 1e-3;
                v
            }).collect()
        };
        let g = TestFn::GaussianBump { center: vec![0.0, 0.0], width: 0.3, amplitude: 2.0 };
        let s = TestFn::SmoothIndicator { radius: 0.5, ramp: 0.4 };
        for f in [g, s] {
            let audit = lipschitz_audit(&f, 0.0, &line(2), 1e-5);
            assert!((audit - f.lipschitz_norm()).abs() <= 0.05 * f.lipschitz_norm(), "{}", f.kind());
        }
    }

    fn check_identity(model: Arc<RateModel>, phi: TestFn, seed: u64, horizon: f64) -> DecompositionReport {
        let cfg = Configuration::from_sites(model.dim(), crate::configuration::box_sites(model.dim(), 1));
        let mut e = EventEngine::new(Arc::clone(&model), cfg, SimRng::seed_from_u64(seed)).unwrap();
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * horizon / 10.0).collect();
        let mut d = Decomposer::new(model, phi, grid).unwrap();
        run(&mut e, horizon, &mut [&mut d], u64::MAX).unwrap();
        let rep = d.report();
        assert!(rep.max_rel_residual <= 1e-9, "residual {}", rep.max_rel_residual);
        rep
    }

    #[test]
    fn identity_holds_for_catalog_and_models() {
        let k = nn3();
        let models = [
            RateModel::voter(k.clone(), 20).unwrap(),
            RateModel::perturbed(k.clone(), 20, PerturbationTable::lv(&k, 3.0, -2.0)).unwrap(),
            RateModel::perturbed(
                k.clone(),
                20,
                PerturbationTable::from_entries(
                    3,
                    vec![(vec![Site::axis(0, 1), Site::axis(1, 1)], 2.0, -0.5), (vec![], 0.0, 1.0), (vec![Site::axis(2, -1)], 0.5, 0.25)],
                    None,
                )
                .unwrap(),
            )
            .unwrap(),
        ];
        let fns = [
            TestFn::Constant { c: 1.0 },
            bump3(),
            TestFn::SmoothIndicator { radius: 0.2, ramp: 0.5 },
            TestFn::TimeDependent {
                knots: vec![
                    Knot { time: 0.05, phi: bump3() },
                    Knot { time: 0.12, phi: TestFn::Constant { c: 2.0 } },
                    Knot { time: 0.2, phi: TestFn::SmoothIndicator { radius: 0.1, ramp: 0.3 } },
                ],
            },
        ];
        for (i, m) in models.into_iter().enumerate() {
            let m = Arc::new(m);
            for (j, f) in fns.iter().enumerate() {
                check_identity(Arc::clone(&m), f.clone(), 10 * i as u64 + j as u64, 0.25);
            }
        }
    }

    #[test]
    fn constant_phi_has_no_d1_and_voter_has_no_d2_d3() {
        let k = nn3();
        let rep = check_identity(Arc::new(RateModel::voter(k.clone(), 30).unwrap()), TestFn::Constant { c: 1.0 }, 4, 0.3);
        for r in &rep.rows {
            assert!(r.d1.abs() < 1e-12 && r.d2 == 0.0 && r.d3 == 0.0 && r.qv2 == 0.0);
            assert!((r.x_phi - rep.x0 - r.m).abs() < 1e-12);
        }
        // with phi = 1, <M>_1 + <M>_2 = N^{-2} int total rate
        let lv = Arc::new(RateModel::perturbed(k.clone(), 30, PerturbationTable::lv(&k, 2.0, 1.0)).unwrap());
        let rep = check_identity(lv, TestFn::Constant { c: 1.0 }, 5, 0.2);
        assert!(rep.last().unwrap().qv() > 0.0);
    }

    #[test]
    fn decompose_replays_logs() {
        let k = nn3();
        let m = Arc::new(RateModel::perturbed(k.clone(), 15, PerturbationTable::lv(&k, 1.0, 1.0)).unwrap());
        let cfg = Configuration::from_sites(3, crate::configuration::box_sites(3, 1));
        let mut e = EventEngine::new(Arc::clone(&m), cfg, SimRng::seed_from_u64(9)).unwrap();
        let mut log = EventLog::new(3);
        let mut live = Decomposer::new(Arc::clone(&m), bump3(), vec![0.1, 0.2]).unwrap();
        run(&mut e, 0.2, &mut [&mut log, &mut live], u64::MAX).unwrap();
        let replayed = decompose(&log, Arc::clone(&m), &bump3(), vec![0.1, 0.2]).unwrap();
        assert_eq!(replayed, live.report());
        let mut truncated = log.clone();
        truncated.complete = false;
        assert!(matches!(decompose(&truncated, m, &bump3(), vec![]), Err(Error::TruncatedLog(_))));
    }

    #[test]
    fn perturbation_statistic_cases() {
        let k = nn3();
        let m = Arc::new(RateModel::perturbed(k.clone(), 20, PerturbationTable::lv(&k, 1.0, 1.0)).unwrap());
        let cfg = Configuration::from_sites(3, crate::configuration::box_sites(3, 1));
        let mut e = EventEngine::new(Arc::clone(&m), cfg, SimRng::seed_from_u64(2)).unwrap();
        let mut log = EventLog::new(3);
        run(&mut e, 0.3, &mut [&mut log], u64::MAX).unwrap();
        let phi = bump3();
        assert_eq!(perturbation_statistic(&log, &[], &phi, 1.0, &k, 20).unwrap(), 0.0);
        let mut empty = EventLog::new(3);
        empty.horizon = 1.0;
        empty.complete = true;
        assert_eq!(perturbation_statistic(&empty, &[Site::axis(0, 1)], &phi, 1.0, &k, 20).unwrap(), 0.0);
        // brute-force oracle: integrate Delta over the replayed path
        let set = [Site::axis(0, 1), Site::axis(1, 1)];
        let got = perturbation_statistic(&log, &set, &phi, 0.3, &k, 20).unwrap();
        let sc = ScalingParams::new(20, &k).unwrap();
        let mut cfg = log.initial.clone();
        let mut last = 0.0;
        let mut want = 0.0;
        let delta = |c: &Configuration| {
            let mut s = 0.0;
            for x in crate::configuration::box_sites(3, 8) {
                if chi(c, &set, x) {
                    s += phi.value(0.0, &sc.position(x)[..3]);
                }
            }
            (s - 0.3 * c.iter().map(|y| phi.value(0.0, &sc.position(y)[..3])).sum::<f64>()) / 20.0
        };
        for ev in &log.events {
            want += delta(&cfg) * (ev.time - last);
            cfg.set(ev.site, ev.value);
            last = ev.time;
        }
        want += delta(&cfg) * (0.3 - last);
        assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn generator_gap_examples() {
        let k = nn3();
        let grid: Vec<Vec<f64>> = (0..20).map(|i| vec![-1.0 + 0.1 * i as f64, 0.05, 0.0]).collect();
        assert_eq!(generator_gap(&k, 100, &TestFn::Constant { c: 3.0 }, &grid).unwrap(), 0.0);
        let b = TestFn::GaussianBump { center: vec![0.0; 3], width: 0.5, amplitude: 1.0 };
        let gaps: Vec<f64> = [25, 100, 400].iter().map(|&n| generator_gap(&k, n, &b, &grid).unwrap()).collect();
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn quadratic_interior_generator_is_exact() {
        // a very wide bump is locally quadratic; A_N of x_0^2 is sigma^2 exactly
        let k = nn3();
        let n = 400u64;
        let sc = ScalingParams::new(n, &k).unwrap();
        let q = |x: &[f64]| x[0] * x[0];
        let x = [0.1, 0.2, 0.3];
        let mut a = 0.0;
        for (e, p) in k.iter() {
            let y: Vec<f64> = (0..3).map(|i| x[i] + f64::from(e.0[i]) / sc.ell).collect();
            a += n as f64 * p * (q(&y) - q(&x));
        }
        // second difference oracle: sigma^2 * Delta(x0^2) / 2 = (1/3) * 2 / 2
        assert!((a - 1.0 / 3.0).abs() < 1e-12);
    }
}
