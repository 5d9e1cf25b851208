//! Statistics helpers shared by the Monte Carlo experiments: binomial
//! confidence intervals, empirical CDFs with DKW bands, and a one-sample
//! Kolmogorov–Smirnov test against the uniform distribution.

use serde::{Deserialize, Serialize};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Wilson score interval for a binomial proportion.
///
/// Unlike the Wald interval it stays informative when no successes were
/// observed: for `successes == 0` the upper limit is `z²/(n + z²)`.
pub fn wilson_interval(successes: u64, n: u64, z: f64) -> Interval {
    assert!(successes <= n, "successes exceed trials");
    if n == 0 {
        return Interval { lo: 0.0, hi: 1.0 };
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the bounds are exactly 0 and 1 at the extremes; avoid rounding residue
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    Interval { lo, hi }
}

/// Half-width of the Dvoretzky–Kiefer–Wolfowitz band at level `1 - alpha`.
pub fn dkw_halfwidth(n: usize, alpha: f64) -> f64 {
    assert!(n > 0, "DKW band needs at least one sample");
    ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt()
}

/// Empirical CDF over a sorted copy of the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(samples: &[f64]) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self { sorted }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted.is_empty() {
            return 0.0;
        }
        let k = self.sorted.partition_point(|&v| v <= x);
        k as f64 / self.sorted.len() as f64
    }

    /// Lower empirical quantile: the smallest sample `v` with `F(v) >= p`.
    pub fn quantile(&self, p: f64) -> f64 {
        assert!(!self.sorted.is_empty(), "quantile of empty ECDF");
        let n = self.sorted.len();
        let k = ((p.clamp(0.0, 1.0) * n as f64).ceil() as usize).clamp(1, n);
        self.sorted[k - 1]
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// Step points `(x, F(x), lower band, upper band)` with a DKW band at
    /// level `1 - alpha`.
    pub fn with_dkw_band(&self, alpha: f64) -> Vec<EcdfPoint> {
        let eps = dkw_halfwidth(self.sorted.len(), alpha);
        let n = self.sorted.len() as f64;
        let mut out = Vec::new();
        for (i, &x) in self.sorted.iter().enumerate() {
            // collapse ties onto the last index carrying that value
            if i + 1 < self.sorted.len() && self.sorted[i + 1] == x {
                continue;
            }
            let f = (i + 1) as f64 / n;
            out.push(EcdfPoint {
                x,
                f,
                lo: (f - eps).max(0.0),
                hi: (f + eps).min(1.0),
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcdfPoint {
    pub x: f64,
    pub f: f64,
    pub lo: f64,
    pub hi: f64,
}

/// True when `a` first-order stochastically dominates `b` from below, i.e.
/// every quantile of `a` is `<=` the matching quantile of `b` (equivalently
/// the ECDF of `a` lies at or above that of `b`).
pub fn quantiles_dominate(a: &Ecdf, b: &Ecdf, grid: usize) -> bool {
    (1..=grid).all(|k| {
        let p = k as f64 / grid as f64;
        a.quantile(p) <= b.quantile(p)
    })
}

/// One-sample KS statistic against U(0,1) and its asymptotic p-value.
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let ecdf = Ecdf::new(samples);
    let n = ecdf.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in ecdf.samples().iter().enumerate() {
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((hi - x).abs()).max((x - lo).abs());
    }
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_zero_successes_upper_bound() {
        let ci = wilson_interval(0, 1_000_000, Z95);
        assert_eq!(ci.lo, 0.0);
        // z^2 / (n + z^2) by hand
        let z2 = Z95 * Z95;
        assert!((ci.hi - z2 / (1e6 + z2)).abs() < 1e-15);
        assert!((ci.hi - 3.8415e-6).abs() < 1e-9);
    }

    #[test]
    fn wilson_matches_hand_value() {
        // p = 0.5, n = 100: centre 0.5, half = z*sqrt(.25/100 + z^2/40000)/(1+z^2/100)
        let ci = wilson_interval(50, 100, Z95);
        let z2 = Z95 * Z95;
        let half = Z95 * (0.0025 + z2 / 40000.0).sqrt() / (1.0 + z2 / 100.0);
        assert!((ci.lo - (0.5 - half)).abs() < 1e-12);
        assert!((ci.hi - (0.5 + half)).abs() < 1e-12);
    }

    #[test]
    fn dkw_at_3000() {
        let w = dkw_halfwidth(3000, 0.05);
        assert!((w - (40f64.ln() / 6000.0).sqrt()).abs() < 1e-15);
        assert!((w - 0.0248).abs() < 1e-4);
    }

    #[test]
    fn ecdf_eval_and_quantile() {
        let e = Ecdf::new(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(e.eval(0.5), 0.0);
        assert_eq!(e.eval(2.0), 0.75);
        assert_eq!(e.eval(3.0), 1.0);
        assert_eq!(e.quantile(0.25), 1.0);
        assert_eq!(e.quantile(0.5), 2.0);
        assert_eq!(e.quantile(1.0), 3.0);
        let pts = e.with_dkw_band(0.05);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[1].f, 0.75);
    }

    #[test]
    fn dominance() {
        let a = Ecdf::new(&[1.0, 2.0, 3.0]);
        let b = Ecdf::new(&[2.0, 3.0, 4.0]);
        assert!(quantiles_dominate(&a, &b, 100));
        assert!(!quantiles_dominate(&b, &a, 100));
    }

    #[test]
    fn ks_rejects_skewed_sample() {
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&even).1 > 0.99);
        let skewed: Vec<f64> = even.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skewed).1 < 1e-6);
    }
}
