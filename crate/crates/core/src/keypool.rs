//! Birth–death analytics of the key pool.
//!
//! State `s ∈ {0..M}` counts available bits. Births (replenishment) occur at
//! rate `μ` while `s < M`, deaths (consumption) at rate `λk` while `s > 0`,
//! and `ρ = λk/μ`. Detailed balance `π_{s−1}·μ = π_s·λk` gives
//! `π_s ∝ ρ^{−s}`, so for `ρ < 1` mass piles up near a full pool and
//!
//! ```text
//! π_s = ρ^{M−s}(1−ρ) / (1−ρ^{M+1}),    π_0 = ρ^M(1−ρ) / (1−ρ^{M+1}).
//! ```
//!
//! The opposite orientation `π_s ∝ ρ^s` is kept behind
//! [`Orientation::AsPrinted`] for comparison only.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;
use crate::stats::{wilson_interval, Interval, Z95};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypoolError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> KeypoolError {
    KeypoolError::Domain {
        name,
        value,
        domain,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirthDeathParams {
    /// Replenishment rate μ (bits/s).
    pub mu: f64,
    /// Transaction arrival rate λ (1/s).
    pub lambda: f64,
    /// Bits consumed per transaction.
    pub k: f64,
    pub capacity: u64,
}

impl BirthDeathParams {
    pub fn new(mu: f64, lambda: f64, k: f64, capacity: u64) -> Result<Self, KeypoolError> {
        for (name, v) in [("mu", mu), ("lambda", lambda), ("k", k)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(domain(name, v, "positive and finite"));
            }
        }
        if capacity == 0 {
            return Err(domain("capacity", 0.0, ">= 1"));
        }
        Ok(Self {
            mu,
            lambda,
            k,
            capacity,
        })
    }

    /// Unit birth rate, death rate `ρ`.
    pub fn from_rho(rho: f64, capacity: u64) -> Result<Self, KeypoolError> {
        Self::new(1.0, rho, 1.0, capacity)
    }

    pub fn death_rate(&self) -> f64 {
        self.lambda * self.k
    }

    pub fn rho(&self) -> f64 {
        self.death_rate() / self.mu
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub pi: Vec<f64>,
}

impl StationaryDistribution {
    pub fn pi0(&self) -> f64 {
        self.pi[0]
    }

    pub fn capacity(&self) -> u64 {
        self.pi.len() as u64 - 1
    }

    pub fn mean_level(&self) -> f64 {
        self.pi.iter().enumerate().map(|(s, p)| s as f64 * p).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `π_s ∝ ρ^{−s}`, consistent with the balance equations.
    #[default]
    Corrected,
    /// `π_s ∝ ρ^s`.
    AsPrinted,
}

/// Closed-form stationary distribution (corrected orientation).
pub fn stationary_distribution(p: &BirthDeathParams) -> StationaryDistribution {
    stationary_distribution_oriented(p, Orientation::Corrected)
}

pub fn stationary_distribution_oriented(
    p: &BirthDeathParams,
    orientation: Orientation,
) -> StationaryDistribution {
    let rho = p.rho();
    let m = p.capacity as usize;
    if rho == 1.0 {
        return StationaryDistribution {
            pi: vec![1.0 / (m as f64 + 1.0); m + 1],
        };
    }
    // Both orientations are geometric in s with ratio g; written so that the
    // ratio applied is always < 1 to keep the powers bounded.
    let g = match orientation {
        Orientation::Corrected => 1.0 / rho,
        Orientation::AsPrinted => rho,
    };
    let pi = if g < 1.0 {
        // π_s = g^s (1−g)/(1−g^{M+1})
        let norm = (1.0 - g) / -((m as f64 + 1.0) * g.ln()).exp_m1();
        (0..=m).map(|s| norm * (s as f64 * g.ln()).exp()).collect()
    } else {
        // π_s = h^{M−s} (1−h)/(1−h^{M+1}), h = 1/g
        let h = 1.0 / g;
        let norm = (1.0 - h) / -((m as f64 + 1.0) * h.ln()).exp_m1();
        (0..=m)
            .map(|s| norm * ((m - s) as f64 * h.ln()).exp())
            .collect()
    };
    StationaryDistribution { pi }
}

/// Limit of `π_0` as `M → ∞`: 0 under the corrected orientation for `ρ < 1`,
/// `1 − ρ` under the as-printed one.
pub fn pi0_infinite_capacity(rho: f64, orientation: Orientation) -> f64 {
    match orientation {
        Orientation::Corrected if rho < 1.0 => 0.0,
        Orientation::Corrected => 1.0 - 1.0 / rho,
        Orientation::AsPrinted if rho < 1.0 => 1.0 - rho,
        Orientation::AsPrinted => 0.0,
    }
}

/// Stationary distribution from the global balance equations `πQ = 0`,
/// independent of the closed form.
///
/// The tridiagonal generator is eliminated state by state: with
/// `x_s = π_s/π_{s−1}` the interior balance row
/// `π_{s−1}·b + π_{s+1}·d = π_s·(b + d)` becomes
/// `x_{s+1} = ((b + d) − b/x_s)/d`, seeded by the boundary row
/// `π_0·b = π_1·d`. The ratios are accumulated in log space and normalised
/// with log-sum-exp. The recursion runs from whichever end keeps it stable.
pub fn stationary_oracle(p: &BirthDeathParams) -> StationaryDistribution {
    let m = p.capacity as usize;
    let (b, d) = (p.mu, p.death_rate());
    // Walking downward from M swaps the roles of births and deaths.
    let upward = b >= d;
    let (fwd, bwd) = if upward { (b, d) } else { (d, b) };

    let mut log_w = vec![0.0f64; m + 1];
    let mut x = fwd / bwd;
    // Neumaier-compensated running sum; the plain sum drifts by ~1e-10
    // relative in the far tail at M ≈ 2000
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for i in 1..=m {
        if i > 1 {
            x = ((fwd + bwd) - fwd / x) / bwd;
        }
        let term = x.ln();
        let t = sum + term;
        comp += if sum.abs() >= term.abs() {
            (sum - t) + term
        } else {
            (term - t) + sum
        };
        sum = t;
        log_w[i] = sum + comp;
    }
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = log_w.iter().map(|l| (l - top).exp()).sum();
    let mut pi: Vec<f64> = log_w.iter().map(|l| (l - top).exp() / z).collect();
    if !upward {
        pi.reverse();
    }
    StationaryDistribution { pi }
}

/// Closed-form capacity bound `⌈ln(1/target)/ln(1/ρ) − 1⌉`.
pub fn min_capacity(rho: f64, target_pi0: f64) -> Result<u64, KeypoolError> {
    check_capacity_args(rho, target_pi0)?;
    let m = ((1.0 / target_pi0).ln() / (1.0 / rho).ln() - 1.0).ceil();
    Ok(m.max(0.0) as u64)
}

/// Smallest `M ≥ 1` whose exact `π_0` is at most `target_pi0`.
pub fn exact_min_capacity(rho: f64, target_pi0: f64) -> Result<u64, KeypoolError> {
    check_capacity_args(rho, target_pi0)?;
    let pi0 =
        |m: u64| stationary_distribution(&BirthDeathParams::from_rho(rho, m).expect("valid")).pi0();
    let mut hi = 1u64;
    while pi0(hi) > target_pi0 {
        hi *= 2;
    }
    let mut lo = hi / 2;
    if lo == 0 {
        return Ok(1);
    }
    // invariant: pi0(lo) > target >= pi0(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if pi0(mid) > target_pi0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

fn check_capacity_args(rho: f64, target: f64) -> Result<(), KeypoolError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(domain(
            "rho",
            rho,
            "(0, 1); the chain is not positive recurrent otherwise",
        ));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(domain("target_pi0", target, "(0, 1)"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSimResult {
    /// Time-weighted occupancy of state 0.
    pub empty_fraction: f64,
    /// Time spent in each state.
    pub visits: Vec<f64>,
    pub total_time: f64,
    pub events: u64,
    /// Per-epoch indicators: the chain is sampled at every epoch boundary.
    pub epochs: u64,
    pub empty_epochs: u64,
    pub wilson_ci: Interval,
}

impl PoolSimResult {
    /// Time-weighted histogram normalised to a distribution.
    pub fn occupancy(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v / self.total_time).collect()
    }

    /// Pools two independent runs. The operation is associative and
    /// commutative up to floating-point summation order.
    pub fn merge(&self, other: &Self) -> Self {
        assert_eq!(self.visits.len(), other.visits.len());
        let visits: Vec<f64> = self
            .visits
            .iter()
            .zip(&other.visits)
            .map(|(a, b)| a + b)
            .collect();
        let total_time = self.total_time + other.total_time;
        let epochs = self.epochs + other.epochs;
        let empty_epochs = self.empty_epochs + other.empty_epochs;
        Self {
            empty_fraction: visits[0] / total_time,
            visits,
            total_time,
            events: self.events + other.events,
            epochs,
            empty_epochs,
            wilson_ci: wilson_interval(empty_epochs, epochs, Z95),
        }
    }
}

/// Stopping rule for [`simulate_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimBudget {
    /// Simulated time in seconds.
    Horizon(f64),
    /// Number of jumps.
    Events(u64),
}

/// Event-driven simulation of the chain from a full pool.
///
/// Inter-event times are exponential with the total rate of the current
/// state. The chain is also sampled every `1/(μ + λk)` time units to build the
/// per-epoch empty indicators behind the Wilson interval.
pub fn simulate_pool(
    p: &BirthDeathParams,
    budget: SimBudget,
    seed: u64,
) -> Result<PoolSimResult, KeypoolError> {
    let (horizon, max_events) = match budget {
        SimBudget::Horizon(h) if h > 0.0 && h.is_finite() => (h, u64::MAX),
        SimBudget::Horizon(h) => return Err(domain("horizon_s", h, "positive and finite")),
        SimBudget::Events(0) => return Err(domain("events", 0.0, ">= 1")),
        SimBudget::Events(n) => (f64::INFINITY, n),
    };
    let m = p.capacity as usize;
    let (b, d) = (p.mu, p.death_rate());
    let epoch = 1.0 / (b + d);
    let mut rng = rng_from_seed(seed);

    let mut visits = vec![0.0f64; m + 1];
    let mut s = m;
    let mut t = 0.0f64;
    let mut next_epoch = epoch;
    let mut epochs = 0u64;
    let mut empty_epochs = 0u64;
    let mut events = 0u64;

    loop {
        let up = if s < m { b } else { 0.0 };
        let down = if s > 0 { d } else { 0.0 };
        let rate = up + down;
        let u: f64 = rng.random();
        let dt = -(1.0 - u).ln() / rate;
        let t_next = (t + dt).min(horizon);
        visits[s] += t_next - t;
        while next_epoch <= t_next {
            epochs += 1;
            if s == 0 {
                empty_epochs += 1;
            }
            next_epoch += epoch;
        }
        t = t_next;
        if t >= horizon {
            break;
        }
        events += 1;
        if rng.random::<f64>() * rate < up {
            s += 1;
        } else {
            s -= 1;
        }
        if events >= max_events {
            break;
        }
    }

    Ok(PoolSimResult {
        empty_fraction: visits[0] / t,
        visits,
        total_time: t,
        events,
        epochs,
        empty_epochs,
        wilson_ci: wilson_interval(empty_epochs, epochs, Z95),
    })
}
