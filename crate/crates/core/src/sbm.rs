//! Reference predictions for the super-Brownian limit: total-mass moments,
//! the Feller diffusion `dZ = theta Z dt + sqrt(b Z) dW`, and the first-moment
//! heat-flow formula.
//!
//! The transition of the Feller diffusion is compound Poisson: with
//! `k = b (e^{theta t} - 1) / (2 theta)` (`b t / 2` at `theta = 0`),
//! `Z_t = Gamma(K, scale k)` where `K ~ Poisson(Z_0 e^{theta t} / k)`, and
//! `Z_t = 0` when `K = 0`. This follows from the Laplace functional
//! `E exp(-l Z_t) = exp(-Z_0 e^{theta t} l / (1 + k l))`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::TestFn;

/// Parameters `(b, theta, sigma^2)` of the limiting martingale problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MPParams {
    pub b: f64,
    pub theta: f64,
    pub sigma2: f64,
    /// Where the values came from (free text).
    pub note: String,
}

impl MPParams {
    pub fn new(b: f64, theta: f64, sigma2: f64, note: &str) -> Result<MPParams> {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Error::InvalidParameter(format!("branching rate b = {b} must be >= 0")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma^2 = {sigma2} must be > 0")));
        }
        if !theta.is_finite() {
            return Err(Error::InvalidParameter("theta must be finite".into()));
        }
        Ok(MPParams { b, theta, sigma2, note: note.to_string() })
    }

    /// `b = 2 gamma`.
    pub fn gamma(&self) -> f64 {
        self.b / 2.0
    }
}

/// `(e^{theta t} - 1) / theta`, continuous at `theta = 0`.
fn growth(theta: f64, t: f64) -> f64 {
    if theta == 0.0 {
        t
    } else {
        (theta * t).exp_m1() / theta
    }
}

/// Mean and variance of `Z_t` given `Z_0`.
pub fn feller_moments(z0: f64, t: f64, b: f64, theta: f64) -> (f64, f64) {
    let e = (theta * t).exp();
    (z0 * e, b * z0 * e * growth(theta, t))
}

/// Scale `k` of the Gamma jumps in the compound Poisson transition.
fn gamma_scale(t: f64, b: f64, theta: f64) -> f64 {
    b * growth(theta, t) / 2.0
}

/// `P(Z_t = 0)`; `e^{-2 Z_0 / (b t)}` at `theta = 0`.
pub fn extinction_probability(z0: f64, t: f64, b: f64, theta: f64) -> f64 {
    if z0 == 0.0 {
        return 1.0;
    }
    if b == 0.0 || t == 0.0 {
        return 0.0;
    }
    (-z0 * (theta * t).exp() / gamma_scale(t, b, theta)).exp()
}

/// Poisson means above this use the full-truncation Euler fallback.
const MAX_POISSON_MEAN: f64 = 1e12;
/// Euler step of the fallback scheme.
pub const EULER_STEP: f64 = 1e-3;

/// Terminal mass `Z_t` from `Z_0 = z0`, exact in law where stable.
pub fn simulate_feller<R: Rng + ?Sized>(z0: f64, t: f64, b: f64, theta: f64, rng: &mut R) -> Result<f64> {
    if !(z0 >= 0.0) || !(t >= 0.0) || !(b >= 0.0) {
        return Err(Error::InvalidParameter(format!("need z0, t, b >= 0 (got {z0}, {t}, {b})")));
    }
    if z0 == 0.0 {
        return Ok(0.0);
    }
    if b == 0.0 || t == 0.0 {
        return Ok(z0 * (theta * t).exp());
    }
    let k = gamma_scale(t, b, theta);
    let mu = z0 * (theta * t).exp() / k;
    if !(mu.is_finite() && mu < MAX_POISSON_MEAN && k > 0.0) {
        return simulate_feller_euler(z0, t, b, theta, EULER_STEP, rng);
    }
    let count: f64 = Poisson::new(mu).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(rng);
    if count == 0.0 {
        return Ok(0.0);
    }
    let g = Gamma::new(count, k).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(g.sample(rng))
}

/// Full-truncation Euler scheme with step `dt`; absorbed at 0.
pub fn simulate_feller_euler<R: Rng + ?Sized>(z0: f64, t: f64, b: f64, theta: f64, dt: f64, rng: &mut R) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("Euler step {dt} must be positive")));
    }
    let steps = (t / dt).ceil().max(1.0) as u64;
    let h = t / steps as f64;
    let mut z = z0;
    for _ in 0..steps {
        if z <= 0.0 {
            return Ok(0.0);
        }
        let w: f64 = rng.sample(StandardNormal);
        z += theta * z * h + (b * z * h).sqrt() * w;
    }
    Ok(z.max(0.0))
}

/// `e^{theta t} X_0(P_t phi)` for the heat semigroup at diffusivity `sigma^2`,
/// where `atoms` are `(position, mass)` pairs. Gaussian bumps spread to
/// `w^2 + sigma^2 t` with amplitude scaled by `(w^2 / (w^2 + sigma^2 t))^{d/2}`.
pub fn sbm_mean(atoms: &[(Vec<f64>, f64)], phi: &TestFn, t: f64, theta: f64, sigma2: f64) -> Result<f64> {
    let evolved = heat_evolve(phi, sigma2 * t)?;
    let total: f64 = atoms.iter().map(|(x, m)| m * evolved.value(0.0, x)).sum();
    Ok((theta * t).exp() * total)
}

/// `P_t phi` as a test function, where `spread = sigma^2 t`.
pub fn heat_evolve(phi: &TestFn, spread: f64) -> Result<TestFn> {
    match phi {
        TestFn::Constant { c } => Ok(TestFn::Constant { c: *c }),
        TestFn::GaussianBump { center, width, amplitude } => {
            let w2 = width * width;
            let d = center.len() as i32;
            let new_w2 = w2 + spread;
            let ratio = w2 / new_w2;
            Ok(TestFn::GaussianBump {
                center: center.clone(),
                width: new_w2.sqrt(),
                amplitude: amplitude * ratio.sqrt().powi(d),
            })
        }
        other => Err(Error::UnsupportedTestFn(format!("no closed-form heat flow for {}", other.kind()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::SimRng;
    use rand::SeedableRng;

    #[test]
    fn moment_edge_cases() {
        assert_eq!(feller_moments(2.0, 0.0, 3.0, 1.0), (2.0, 0.0));
        let (m, v) = feller_moments(1.5, 2.0, 0.0, -0.5);
        assert!((m - 1.5 * (-1.0f64).exp()).abs() < 1e-15 && v == 0.0);
        let (m, v) = feller_moments(1.5, 2.0, 0.7, 0.0);
        assert_eq!((m, v), (1.5, 0.7 * 1.5 * 2.0));
    }

    #[test]
    fn deterministic_cases() {
        let mut rng = SimRng::seed_from_u64(1);
        assert_eq!(simulate_feller(0.0, 1.0, 2.0, 1.0, &mut rng).unwrap(), 0.0);
        assert!((simulate_feller(2.0, 1.0, 0.0, 1.0, &mut rng).unwrap() - 2.0 * std::f64::consts::E).abs() < 1e-15);
        assert!((extinction_probability(1.0, 1.0, 2.0, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn exact_and_euler_agree_in_mean() {
        let mut rng = SimRng::seed_from_u64(2);
        let n = 20_000;
        let exact: Vec<f64> = (0..n).map(|_| simulate_feller(1.0, 1.0, 1.0, 0.5, &mut rng).unwrap()).collect();
        let euler: Vec<f64> = (0..n).map(|_| simulate_feller_euler(1.0, 1.0, 1.0, 0.5, 1e-2, &mut rng).unwrap()).collect();
        let (a, b) = (crate::stats::Summary::of(&exact), crate::stats::Summary::of(&euler));
        assert!((a.mean - b.mean).abs() < 4.0 * (a.se.powi(2) + b.se.powi(2)).sqrt(), "{a:?} {b:?}");
        assert!(a.within(0.5f64.exp(), 4.0));
    }

    #[test]
    fn heat_flow_of_gaussian_matches_quadrature() {
        // 1-d convolution of a unit Gaussian bump with the N(0, s) density
        let phi = TestFn::GaussianBump { center: vec![0.0], width: 0.5, amplitude: 1.0 };
        let s = 0.3;
        let got = sbm_mean(&[(vec![0.0], 1.0)], &phi, 1.0, 0.0, s).unwrap();
        let h = 1e-3;
        let mut quad = 0.0;
        for i in -8000..=8000 {
            let y = i as f64 * h;
            quad += (-y * y / (2.0 * 0.25)).exp() * (-y * y / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt() * h;
        }
        assert!((got - quad).abs() < 1e-9, "{got} vs {quad}");
        assert_eq!(sbm_mean(&[(vec![0.0], 2.0)], &TestFn::Constant { c: 1.0 }, 3.0, 0.0, 1.0).unwrap(), 2.0);
    }
}
