//! Summary statistics and the hypothesis tests used by the verification gates.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Sample mean with standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub se: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, sd: f64::NAN, se: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, sd, se: sd / (n as f64).sqrt(), n }
    }

    /// `|mean - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

pub fn normal_cdf(z: f64) -> f64 {
    std_normal().cdf(z)
}

/// Upper quantile `z` with `P(Z > z) = alpha`.
pub fn normal_upper(alpha: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_value: f64,
}

impl ZTest {
    pub fn from_z(z: f64) -> ZTest {
        let p_value = if z.is_nan() { f64::NAN } else { 2.0 * (1.0 - normal_cdf(z.abs())) };
        ZTest { z, p_value }
    }

    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Pooled two-proportion z-test. Identical degenerate proportions give `z = 0`.
pub fn two_proportion_z(k1: u64, n1: u64, k2: u64, n2: u64) -> ZTest {
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let p = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return ZTest::from_z(if p1 == p2 { 0.0 } else { f64::INFINITY });
    }
    ZTest::from_z((p1 - p2) / se)
}

/// z statistic for the difference of two independent estimates.
pub fn difference_z(a: f64, se_a: f64, b: f64, se_b: f64) -> ZTest {
    let se = (se_a * se_a + se_b * se_b).sqrt();
    if se == 0.0 {
        return ZTest::from_z(if a == b { 0.0 } else { f64::INFINITY });
    }
    ZTest::from_z((a - b) / se)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chi2Test {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Bin edges (inclusive lower bounds) after merging sparse bins.
    pub bins: Vec<usize>,
}

impl Chi2Test {
    pub fn passes(&self, level: f64) -> bool {
        self.p_value >= level
    }
}

/// Two-sample chi-square homogeneity test on integer-valued samples. Adjacent
/// values are merged until every bin has expected count at least 5 in both samples.
pub fn chi2_two_sample(xs: &[usize], ys: &[usize]) -> Result<Chi2Test> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidParameter("chi-square test needs two nonempty samples".into()));
    }
    let max = xs.iter().chain(ys).copied().max().unwrap_or(0);
    let mut cx = vec![0u64; max + 1];
    let mut cy = vec![0u64; max + 1];
    for &x in xs {
        cx[x] += 1;
    }
    for &y in ys {
        cy[y] += 1;
    }
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let frac_x = nx / (nx + ny);
    let enough = |a: u64, b: u64| {
        let t = (a + b) as f64;
        t * frac_x >= 5.0 && t * (1.0 - frac_x) >= 5.0
    };
    let mut bins: Vec<(usize, u64, u64)> = Vec::new();
    let (mut start, mut a, mut b) = (0usize, 0u64, 0u64);
    for v in 0..=max {
        if a + b == 0 {
            start = v;
        }
        a += cx[v];
        b += cy[v];
        if enough(a, b) {
            bins.push((start, a, b));
            a = 0;
            b = 0;
        }
    }
    if a + b > 0 {
        match bins.last_mut() {
            Some(last) => {
                last.1 += a;
                last.2 += b;
            }
            None => bins.push((start, a, b)),
        }
    }
    if bins.len() < 2 {
        return Ok(Chi2Test { statistic: 0.0, df: 0, p_value: 1.0, bins: bins.iter().map(|b| b.0).collect() });
    }
    let mut stat = 0.0;
    for &(_, a, b) in &bins {
        let t = (a + b) as f64;
        let ex = t * frac_x;
        let ey = t * (1.0 - frac_x);
        stat += (a as f64 - ex).powi(2) / ex + (b as f64 - ey).powi(2) / ey;
    }
    let df = bins.len() - 1;
    let p_value = 1.0 - ChiSquared::new(df as f64).expect("df >= 1").cdf(stat);
    Ok(Chi2Test { statistic: stat, df, p_value, bins: bins.iter().map(|b| b.0).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ols {
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<Ols> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::InvalidParameter("regression needs two equal-length series of at least 2 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("regression design has no spread".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se_slope = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(Ols { slope, intercept, se_slope })
}

/// Delete-a-group jackknife: standard error of `stat` over replicas split into `groups` blocks.
pub fn jackknife_se<T, F: Fn(&[&T]) -> f64>(items: &[T], groups: usize, stat: F) -> f64 {
    let g = groups.min(items.len()).max(2);
    if items.len() < 2 {
        return f64::NAN;
    }
    let vals: Vec<f64> = (0..g)
        .map(|k| {
            let kept: Vec<&T> = items.iter().enumerate().filter(|(i, _)| i % g != k).map(|(_, v)| v).collect();
            stat(&kept)
        })
        .collect();
    let m = vals.iter().sum::<f64>() / g as f64;
    ((g - 1) as f64 / g as f64 * vals.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sqrt()
}

/// Slope of `log(mean mass)` against time. `paths[r][k]` is the mass of
/// replica `r` at `times[k]`. Standard error by a 20-group jackknife over replicas.
pub fn log_mean_slope(times: &[f64], paths: &[Vec<f64>]) -> Result<(f64, f64)> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("no replicas".into()));
    }
    let slope = |rows: &[&Vec<f64>]| -> f64 {
        let means: Vec<f64> = (0..times.len()).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64).collect();
        let logs: Vec<f64> = means.iter().map(|m| m.ln()).collect();
        ols(times, &logs).map(|o| o.slope).unwrap_or(f64::NAN)
    };
    let all: Vec<&Vec<f64>> = paths.iter().collect();
    let est = slope(&all);
    let se = jackknife_se(paths, 20, |rows| slope(rows));
    Ok((est, se))
}

/// Ratio of sums `sum num / sum den` with a delta-method standard error.
pub fn ratio_of_sums(num: &[f64], den: &[f64]) -> (f64, f64) {
    let n = num.len() as f64;
    let sn: f64 = num.iter().sum();
    let sd: f64 = den.iter().sum();
    let r = sn / sd;
    let md = sd / n;
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| a - r * b).collect();
    let var = resid.iter().map(|e| e * e).sum::<f64>() / (n - 1.0).max(1.0);
    (r, (var / n).sqrt() / md)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Final estimate consistent with the target and no significant move away.
    Pass,
    /// Moving toward the target but still significantly off at the last point.
    Trend,
    Fail,
    InsufficientReplicas,
}

impl Verdict {
    pub fn ok(&self) -> bool {
        matches!(self, Verdict::Pass | Verdict::Trend)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendGate {
    pub verdict: Verdict,
    pub target: f64,
    pub errors: Vec<f64>,
    /// One-sided z statistics for moving away from the target between ladder points.
    pub away_z: Vec<f64>,
}

/// Monotone-trend gate at level `alpha` over ladder estimates `(estimate, se)`.
///
/// Passes when no consecutive step moves significantly away from the target
/// (one-sided z below `z_{1-alpha}`) and the last estimate is either no further
/// from the target than the first or within `z_{1-alpha/2}` standard errors of it.
pub fn trend_gate(points: &[(f64, f64)], target: f64, alpha: f64) -> TrendGate {
    let errors: Vec<f64> = points.iter().map(|(e, _)| e - target).collect();
    let away_z: Vec<f64> = points
        .windows(2)
        .zip(errors.windows(2))
        .map(|(p, e)| (e[1].abs() - e[0].abs()) / (p[0].1.powi(2) + p[1].1.powi(2)).sqrt())
        .collect();
    let zc = normal_upper(alpha);
    let z2 = normal_upper(alpha / 2.0);
    let (first, last) = (errors[0], errors[errors.len() - 1]);
    let se_last = points[points.len() - 1].1;
    let no_retreat = away_z.iter().all(|z| !(*z >= zc));
    let consistent = last.abs() <= z2 * se_last;
    let closer = last.abs() <= first.abs();
    let verdict = match (no_retreat && (closer || consistent), consistent) {
        (true, true) => Verdict::Pass,
        (true, false) => Verdict::Trend,
        _ => Verdict::Fail,
    };
    TrendGate { verdict, target, errors, away_z }
}
