//! Stackelberg-constrained bilateral clearing over a DC PTDF network.
//!
//! Prosumer `i` at bus `k(i)` has cost `p²/(2α_i)` and answers the line
//! prices `u ≥ 0` with
//!
//! ```text
//! p_i(u) = clip(α_i (π_i − Σ_b u_b H_{b,k(i)}), −P_i^max, P_i^max)
//! ```
//!
//! The grid operator leads with `min ½q‖u‖² + cᵀu` subject to
//! `H·p(u) ≤ P^max`. Four clearing rules are compared:
//!
//! * `SOCIAL`: the welfare-maximising dispatch, solved through its dual.
//! * `STACK`: the leader problem, by sequential quadratic programming.
//! * `BASE`: unconstrained responses scaled down uniformly until feasible.
//! * `WBASE`: curtailment toward zero weighted by `α_i`, with no reversal of
//!   any injection.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("no price vector satisfies the line limits")]
    Infeasible,
    #[error("no convergence after {iterations} iterations (KKT residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid instance: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prosumer {
    #[serde(default, skip_serializing)]
    pub id: usize,
    pub alpha: f64,
    pub pi: f64,
    pub p_max: f64,
    pub bus: usize,
}

impl Prosumer {
    /// Welfare contribution `π p − p²/(2α)`.
    pub fn welfare(&self, p: f64) -> f64 {
        self.pi * p - p * p / (2.0 * self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderCost {
    pub q_diag: f64,
    /// Linear term; empty means zero.
    #[serde(default)]
    pub c: Vec<f64>,
}

impl Default for LeaderCost {
    fn default() -> Self {
        Self {
            q_diag: 1.0,
            c: Vec::new(),
        }
    }
}

/// Instance file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    pub prosumers: Vec<Prosumer>,
    /// Dense rows, one per line, one column per bus.
    pub ptdf: Vec<Vec<f64>>,
    pub line_limits: Vec<f64>,
    #[serde(default)]
    pub leader_cost: LeaderCost,
}

impl MarketInstance {
    pub fn from_json(s: &str) -> Result<Self, MarketError> {
        let mut inst: Self =
            serde_json::from_str(s).map_err(|e| MarketError::Invalid(e.to_string()))?;
        for (i, p) in inst.prosumers.iter_mut().enumerate() {
            p.id = i;
        }
        inst.validate()?;
        Ok(inst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialises")
    }

    pub fn lines(&self) -> usize {
        self.line_limits.len()
    }

    pub fn buses(&self) -> usize {
        self.ptdf.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |m: String| Err(MarketError::Invalid(m));
        if self.ptdf.len() != self.line_limits.len() {
            return bad(format!(
                "{} ptdf rows for {} lines",
                self.ptdf.len(),
                self.line_limits.len()
            ));
        }
        let nb = self.buses();
        if self.ptdf.iter().any(|r| r.len() != nb) {
            return bad("ragged ptdf".into());
        }
        if self.line_limits.iter().any(|&l| !(l > 0.0)) {
            return bad("line limits must be positive".into());
        }
        if !(self.leader_cost.q_diag > 0.0) {
            return bad("leader cost must be strictly convex".into());
        }
        if !self.leader_cost.c.is_empty() && self.leader_cost.c.len() != self.lines() {
            return bad("leader cost c has the wrong length".into());
        }
        for p in &self.prosumers {
            if !(p.alpha > 0.0 && p.p_max > 0.0) || p.bus >= nb {
                return bad(format!("prosumer {} out of domain", p.id));
            }
        }
        Ok(())
    }

    /// Same grid with only the listed prosumers.
    pub fn subset(&self, ids: &[usize]) -> Self {
        Self {
            prosumers: ids.iter().map(|&i| self.prosumers[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn welfare(&self, p: &[f64]) -> f64 {
        self.prosumers
            .iter()
            .zip(p)
            .map(|(pr, &x)| pr.welfare(x))
            .sum()
    }

    /// `Σ_b u_b H_{b,k}` for every bus `k`.
    pub fn bus_prices(&self, u: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.buses()];
        for (row, &ub) in self.ptdf.iter().zip(u) {
            if ub != 0.0 {
                for (sk, &h) in s.iter_mut().zip(row) {
                    *sk += ub * h;
                }
            }
        }
        s
    }

    /// Line flows `H·p`.
    pub fn flows(&self, p: &[f64]) -> Vec<f64> {
        let mut inj = vec![0.0; self.buses()];
        for (pr, &x) in self.prosumers.iter().zip(p) {
            inj[pr.bus] += x;
        }
        self.ptdf
            .iter()
            .map(|row| row.iter().zip(&inj).map(|(h, x)| h * x).sum())
            .collect()
    }

    fn leader_c(&self, b: usize) -> f64 {
        self.leader_cost.c.get(b).copied().unwrap_or(0.0)
    }

    pub fn leader_cost_value(&self, u: &[f64]) -> f64 {
        u.iter()
            .enumerate()
            .map(|(b, &x)| 0.5 * self.leader_cost.q_diag * x * x + self.leader_c(b) * x)
            .sum()
    }
}

/// `clip(α(π − u·H_col), ±p_max)`.
pub fn follower_response(p: &Prosumer, price: f64) -> f64 {
    (p.alpha * (p.pi - price)).clamp(-p.p_max, p.p_max)
}

/// Per-follower responses to line prices `u`.
pub fn aggregate_response(inst: &MarketInstance, u: &[f64]) -> Vec<f64> {
    let s = inst.bus_prices(u);
    inst.prosumers
        .iter()
        .map(|p| follower_response(p, s[p.bus]))
        .collect()
}

/// Unclipped closed form `A⁻¹(π − Hᵀu)` with `A = diag(1/α)`.
pub fn aggregate_response_matrix(inst: &MarketInstance, u: &[f64]) -> Vec<f64> {
    let n = inst.prosumers.len();
    // Hᵀu per prosumer column, built column by column
    let mut htu = vec![0.0; n];
    for (i, pr) in inst.prosumers.iter().enumerate() {
        htu[i] = inst
            .ptdf
            .iter()
            .zip(u)
            .map(|(row, ub)| row[pr.bus] * ub)
            .sum();
    }
    inst.prosumers
        .iter()
        .zip(&htu)
        .map(|(p, h)| p.alpha * (p.pi - h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "SOCIAL")]
    Social,
    #[serde(rename = "STACK")]
    Stack,
    #[serde(rename = "BASE")]
    Base,
    #[serde(rename = "WBASE")]
    Wbase,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Social,
        Scenario::Stack,
        Scenario::Base,
        Scenario::Wbase,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Social => "SOCIAL",
            Scenario::Stack => "STACK",
            Scenario::Base => "BASE",
            Scenario::Wbase => "WBASE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketOutcome {
    pub scenario: Scenario,
    /// Line prices; the leader's decision for STACK, the dual for SOCIAL and
    /// WBASE, zero for BASE.
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub welfare: f64,
    pub feasible: bool,
    /// Constraint multipliers of the leader problem (STACK only).
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Uniform factor applied after the solve (1 when none was needed).
    pub scale: f64,
}

impl MarketOutcome {
    fn empty(scenario: Scenario, lines: usize) -> Self {
        Self {
            scenario,
            u: vec![0.0; lines],
            p: Vec::new(),
            welfare: 0.0,
            feasible: true,
            multipliers: vec![0.0; lines],
            iterations: 0,
            kkt_residual: 0.0,
            scale: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral projected gradient on the nonnegative orthant
// ---------------------------------------------------------------------------

struct SpgResult {
    x: Vec<f64>,
    iterations: usize,
    pg_norm: f64,
}

fn project_nonneg(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `f` over `x ≥ 0` with Barzilai–Borwein steps and a
/// nonmonotone Armijo search (memory 10).
fn spg<F>(x0: Vec<f64>, mut fg: F, tol: f64, max_iter: usize) -> SpgResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    const MEMORY: usize = 10;
    const GAMMA: f64 = 1e-4;
    const STEP_MIN: f64 = 1e-12;
    const STEP_MAX: f64 = 1e12;

    let mut x = x0;
    project_nonneg(&mut x);
    let (mut f, mut g) = fg(&x);
    let mut history = vec![f];
    let pg = |x: &[f64], g: &[f64]| -> f64 {
        x.iter().zip(g).fold(0.0f64, |m, (&xi, &gi)| {
            m.max(((xi - gi).max(0.0) - xi).abs())
        })
    };
    let mut step = {
        let n = pg(&x, &g);
        if n > 0.0 {
            (1.0 / n).clamp(STEP_MIN, STEP_MAX)
        } else {
            1.0
        }
    };
    let mut it = 0;
    let mut pg_norm = pg(&x, &g);
    while pg_norm > tol && it < max_iter {
        it += 1;
        let d: Vec<f64> = x
            .iter()
            .zip(&g)
            .map(|(&xi, &gi)| (xi - step * gi).max(0.0) - xi)
            .collect();
        let gd = dot(&g, &d);
        let f_ref = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lam = 1.0;
        let (x_new, f_new, g_new) = loop {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + lam * b).collect();
            let (ft, gt) = fg(&xt);
            if ft <= f_ref + GAMMA * lam * gd || lam < 1e-20 {
                break (xt, ft, gt);
            }
            // safeguarded quadratic interpolation
            let lt = -0.5 * gd * lam * lam / (ft - f - lam * gd);
            lam = if lt >= 0.1 * lam && lt <= 0.9 * lam {
                lt
            } else {
                lam / 2.0
            };
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        step = if sy <= 0.0 {
            STEP_MAX
        } else {
            (dot(&s, &s) / sy).clamp(STEP_MIN, STEP_MAX)
        };
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        if history.len() > MEMORY {
            history.remove(0);
        }
        pg_norm = pg(&x, &g);
    }
    SpgResult {
        x,
        iterations: it,
        pg_norm,
    }
}

// ---------------------------------------------------------------------------
// SOCIAL and WBASE: dual projected gradient
// ---------------------------------------------------------------------------

/// Box `[lo_i, hi_i]` for each injection.
fn response_in_box(inst: &MarketInstance, s: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    inst.prosumers
        .iter()
        .enumerate()
        .map(|(i, p)| (p.alpha * (p.pi - s[p.bus])).clamp(lo[i], hi[i]))
        .collect()
}

/// Maximises welfare subject to `lo ≤ p ≤ hi` and `H p ≤ P^max`.
///
/// The dual `d(λ) = max_p Σ(π_i − (Hᵀλ)_i)p_i − p_i²/(2α_i) + λᵀP^max` is
/// minimised over `λ ≥ 0`; its gradient is `P^max − H p(λ)`.
fn solve_boxed_welfare(
    inst: &MarketInstance,
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    scenario: Scenario,
) -> Result<MarketOutcome, MarketError> {
    let nl = inst.lines();
    let limits = &inst.line_limits;
    let scale = 1.0 + inf_norm(limits);
    let dual = |lam: &[f64]| {
        let s = inst.bus_prices(lam);
        let p = response_in_box(inst, &s, lo, hi);
        let mut val = dot(lam, limits);
        for (pr, &x) in inst.prosumers.iter().zip(&p) {
            val += (pr.pi - s[pr.bus]) * x - x * x / (2.0 * pr.alpha);
        }
        let flows = inst.flows(&p);
        let grad: Vec<f64> = limits.iter().zip(&flows).map(|(l, f)| l - f).collect();
        (val, grad)
    };

    let mut lam = vec![0.0; nl];
    let mut iterations = 0;
    let mut inner_tol = tol * scale;
    let mut residual = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        let r = spg(lam, dual, inner_tol, MAX_ITERATIONS - iterations);
        iterations += r.iterations;
        lam = r.x;
        if inf_norm(&lam) > 1e12 {
            return Err(MarketError::Infeasible);
        }
        let p = response_in_box(inst, &inst.bus_prices(&lam), lo, hi);
        residual = welfare_kkt(inst, &lam, &p);
        if residual <= tol || r.pg_norm > inner_tol {
            break;
        }
        inner_tol *= 0.1;
        if inner_tol < 1e-15 * scale {
            break;
        }
    }
    let p = response_in_box(inst, &inst.bus_prices(&lam), lo, hi);
    if residual > tol {
        return Err(MarketError::NoConvergence {
            iterations,
            residual,
        });
    }
    Ok(MarketOutcome {
        scenario,
        welfare: inst.welfare(&p),
        feasible: true,
        u: lam,
        p,
        multipliers: vec![0.0; nl],
        iterations,
        kkt_residual: residual,
        scale: 1.0,
    })
}

/// Scaled KKT residual of the welfare problem: primal infeasibility and
/// complementary slackness relative to the line-limit scale.
fn welfare_kkt(inst: &MarketInstance, lam: &[f64], p: &[f64]) -> f64 {
    let flows = inst.flows(p);
    let scale = 1.0 + inf_norm(&inst.line_limits);
    let mut r = 0.0f64;
    for ((&l, &f), &m) in lam.iter().zip(&flows).zip(&inst.line_limits) {
        let slack = m - f;
        r = r.max((-slack).max(0.0) / scale);
        r = r.max(l * slack.abs() / (scale * (1.0 + l)));
    }
    r
}

pub fn solve_social(inst: &MarketInstance, tol: f64) -> Result<MarketOutcome, MarketError> {
    inst.validate()?;
    if inst.prosumers.is_empty() {
        return Ok(MarketOutcome::empty(Scenario::Social, inst.lines()));
    }
    let lo: Vec<f64> = inst.prosumers.iter().map(|p| -p.p_max).collect();
    let hi: Vec<f64> = inst.prosumers.iter().map(|p| p.p_max).collect();
    solve_boxed_welfare(inst, &lo, &hi, tol, Scenario::Social)
}

// ---------------------------------------------------------------------------
// STACK: feasible SQP on the leader problem
// ---------------------------------------------------------------------------

struct LeaderEval {
    g: Vec<f64>,
    p: Vec<f64>,
}

fn leader_eval(inst: &MarketInstance, u: &[f64]) -> LeaderEval {
    let p = aggregate_response(inst, u);
    let g = inst
        .flows(&p)
        .iter()
        .zip(&inst.line_limits)
        .map(|(f, m)| f - m)
        .collect();
    LeaderEval { g, p }
}

/// Follower sitting on its clip, which makes `g` kinked at `u`.
#[derive(Debug, Clone, Copy)]
struct Kink {
    bus: usize,
    alpha: f64,
    /// Sign of the unclipped response.
    side: f64,
}

/// Local piecewise-linear model of `g` around `u`: `g(u) + J(v − u)` on the
/// lines plus `σ_j (Hᵀv)_{k_j} ≤ σ_j (Hᵀu)_{k_j}` keeping each kinked
/// follower on one side of its clip, with `J = −H·diag(active)·Hᵀ`.
struct LocalModel {
    active: Vec<f64>,
    kinks: Vec<(usize, f64)>,
}

impl LocalModel {
    fn rows(&self, nl: usize) -> usize {
        nl + self.kinks.len()
    }

    fn jt_times(&self, inst: &MarketInstance, w: &[f64]) -> Vec<f64> {
        let mut t = inst.bus_prices(w);
        for (tk, a) in t.iter_mut().zip(&self.active) {
            *tk *= a;
        }
        inst.ptdf.iter().map(|row| -dot(row, &t)).collect()
    }

    fn at_times(&self, inst: &MarketInstance, n: &[f64]) -> Vec<f64> {
        let nl = inst.lines();
        let mut out = self.jt_times(inst, &n[..nl]);
        for (&(k, sigma), &w) in self.kinks.iter().zip(&n[nl..]) {
            if w != 0.0 {
                for (o, row) in out.iter_mut().zip(&inst.ptdf) {
                    *o += w * sigma * row[k];
                }
            }
        }
        out
    }
}

/// Per-bus slope of the interior followers and the kinked followers.
fn classify_followers(inst: &MarketInstance, u: &[f64]) -> (Vec<f64>, Vec<Kink>) {
    let s = inst.bus_prices(u);
    let mut active = vec![0.0; inst.buses()];
    let mut kinks = Vec::new();
    for pr in &inst.prosumers {
        let raw = pr.alpha * (pr.pi - s[pr.bus]);
        let gap = raw.abs() - pr.p_max;
        if gap < -KINK_BAND * pr.p_max {
            active[pr.bus] += pr.alpha;
        } else if gap <= KINK_BAND * pr.p_max {
            kinks.push(Kink {
                bus: pr.bus,
                alpha: pr.alpha,
                side: raw.signum(),
            });
        }
    }
    (active, kinks)
}

const KINK_BAND: f64 = 1e-9;

/// Sorted step lengths in `(0, 1)` at which some follower reaches `±p_max`
/// along `u + t·d`.
fn clip_breakpoints(inst: &MarketInstance, u: &[f64], d: &[f64]) -> Vec<f64> {
    let s = inst.bus_prices(u);
    let ds = inst.bus_prices(d);
    let mut out = Vec::new();
    for pr in &inst.prosumers {
        let rate = -pr.alpha * ds[pr.bus];
        if rate == 0.0 {
            continue;
        }
        let raw = pr.alpha * (pr.pi - s[pr.bus]);
        for edge in [pr.p_max, -pr.p_max] {
            let t = (edge - raw) / rate;
            if t > 1e-15 && t < 1.0 {
                out.push(t);
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}
/// Above this many kinked followers the pieces are not enumerated.
const MAX_ENUMERATED_KINKS: usize = 8;

/// Piece `mask` of the local model: bit `j` set puts kinked follower `j` on
/// its responsive side.
fn piece_model(base: &[f64], kinks: &[Kink], mask: u64) -> LocalModel {
    let mut active = base.to_vec();
    let mut rows = Vec::with_capacity(kinks.len());
    for (j, kk) in kinks.iter().enumerate() {
        if mask >> j & 1 == 1 {
            active[kk.bus] += kk.alpha;
            // |raw| may only shrink: side·(Hᵀd)_k ≥ 0
            rows.push((kk.bus, -kk.side));
        } else {
            rows.push((kk.bus, kk.side));
        }
    }
    LocalModel {
        active,
        kinks: rows,
    }
}

struct QpSolution {
    v: Vec<f64>,
    n: Vec<f64>,
    value: f64,
}

/// `min ½q‖v‖² + cᵀv` subject to `A v ≤ b` and `v ≥ 0` by a dense
/// Mehrotra predictor-corrector interior point method. Returns `v` and the
/// multipliers of the `A` rows.
fn dense_qp(
    q: f64,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    const TOL: f64 = 1e-10;
    let (ma, n) = a.shape();
    let m = ma + n;
    let g_times = |v: &DVector<f64>| -> DVector<f64> {
        let av = a * v;
        DVector::from_iterator(m, av.iter().copied().chain(v.iter().map(|x| -x)))
    };
    let gt_times = |y: &DVector<f64>| -> DVector<f64> {
        let ya = y.rows(0, ma).into_owned();
        a.tr_mul(&ya) - y.rows(ma, n)
    };
    let h = DVector::from_iterator(m, b.iter().copied().chain(std::iter::repeat_n(0.0, n)));
    let scale_d = 1.0 + c.amax();
    let scale_p = 1.0 + h.amax();

    let mut v = DVector::zeros(n);
    let mut s = (&h - g_times(&v)).map(|x| x.max(1.0));
    let mut z = DVector::from_element(m, 1.0);
    for _ in 0..200 {
        let r_d = &v * q + c + gt_times(&z);
        let r_p = g_times(&v) + &s - &h;
        let mu = s.dot(&z) / m as f64;
        if r_d.amax() <= TOL * scale_d && r_p.amax() <= TOL * scale_p && mu <= 1e-3 * TOL * scale_p
        {
            return Some(polish_active_set(q, c, a, b, &v, &s, &z));
        }
        let w = z.component_div(&s);
        let mut kkt = DMatrix::<f64>::identity(n, n) * q;
        let wa = DMatrix::from_diagonal(&w.rows(0, ma).into_owned());
        kkt += a.tr_mul(&(wa * a));
        for i in 0..n {
            kkt[(i, i)] += w[ma + i];
        }
        let Some(chol) = kkt.cholesky() else {
            let close = r_d.amax() <= 1e-7 * scale_d && r_p.amax() <= 1e-7 * scale_p;
            return close.then(|| polish_active_set(q, c, a, b, &v, &s, &z));
        };
        let solve = |r_c: &DVector<f64>| {
            let t = (z.component_mul(&r_p) - r_c).component_div(&s);
            let dv = chol.solve(&(-&r_d - gt_times(&t)));
            let ds = -&r_p - g_times(&dv);
            let dz = (-r_c - z.component_mul(&ds)).component_div(&s);
            (dv, ds, dz)
        };
        let max_step = |x: &DVector<f64>, dx: &DVector<f64>| {
            x.iter()
                .zip(dx.iter())
                .filter(|(_, d)| **d < 0.0)
                .fold(1.0f64, |acc, (xi, di)| acc.min(-xi / di))
        };
        let sz = s.component_mul(&z);
        let (_, ds_a, dz_a) = solve(&sz);
        let alpha_a = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
        let mu_a = (&s + &ds_a * alpha_a).dot(&(&z + &dz_a * alpha_a)) / m as f64;
        let sigma = (mu_a / mu).powi(3);
        let r_c = sz + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
        let (dv, ds, dz) = solve(&r_c);
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        v += &dv * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
    }
    None
}

/// Re-solves the QP exactly on the active set read off an interior point
/// iterate: bounds with `v_i ≤ z_i` are fixed at zero and rows with slack
/// below their multiplier hold with equality. Falls back to the iterate when
/// the polished point is not primal and dual feasible.
fn polish_active_set(
    q: f64,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    v: &DVector<f64>,
    s: &DVector<f64>,
    z: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (ma, n) = a.shape();
    let fallback = || (v.clone(), z.rows(0, ma).into_owned());
    let free: Vec<usize> = (0..n).filter(|&i| v[i] > z[ma + i]).collect();
    let rows: Vec<usize> = (0..ma).filter(|&r| s[r] < z[r]).collect();
    let af = DMatrix::from_fn(rows.len(), free.len(), |r, j| a[(rows[r], free[j])]);
    let cf = DVector::from_fn(free.len(), |j, _| c[free[j]]);
    let br = DVector::from_fn(rows.len(), |r, _| b[rows[r]]);
    // free part: v_F = −(c_F + A_Fᵀλ)/q with A_F v_F = b_R
    let lam = if rows.is_empty() {
        DVector::zeros(0)
    } else {
        let m = &af * af.transpose() / q;
        let rhs = -(&br + &af * &cf / q);
        let eps_svd = 1e-12 * (1.0 + m.amax());
        match m.svd(true, true).solve(&rhs, eps_svd) {
            Ok(l) => l,
            Err(_) => return fallback(),
        }
    };
    let vf = -(&cf + af.tr_mul(&lam)) / q;
    let mut vp = DVector::zeros(n);
    for (j, &i) in free.iter().enumerate() {
        vp[i] = vf[j];
    }
    let mut np = DVector::zeros(ma);
    for (r, &row) in rows.iter().enumerate() {
        np[row] = lam[r];
    }
    let eps = 1e-9 * (1.0 + b.amax().max(c.amax()));
    let grad = &vp * q + c + a.tr_mul(&np);
    let primal_ok = vp.iter().all(|&x| x >= -eps) && (a * &vp - b).iter().all(|&x| x <= eps);
    let dual_ok = np.iter().all(|&x| x >= -eps)
        && free.iter().all(|&i| grad[i].abs() <= eps)
        && (0..n).all(|i| grad[i] >= -eps);
    if primal_ok && dual_ok {
        (vp.map(|x| x.max(0.0)), np.map(|x| x.max(0.0)))
    } else {
        fallback()
    }
}

/// Solves the subproblem of one piece: `min ½q‖v‖² + cᵀv` over `v ≥ 0`
/// with the linearised lines and the piece's kink rows.
fn solve_local_qp(
    inst: &MarketInstance,
    model: &LocalModel,
    u: &[f64],
    g: &[f64],
    q: f64,
    c: &[f64],
) -> Option<QpSolution> {
    let nl = inst.lines();
    let nb = inst.buses();
    let hm = DMatrix::from_fn(nl, nb, |b, k| inst.ptdf[b][k]);
    let hs = DMatrix::from_fn(nl, nb, |b, k| inst.ptdf[b][k] * model.active[k].sqrt());
    let rows = model.rows(nl);
    let mut a = DMatrix::zeros(rows, nl);
    a.view_mut((0, 0), (nl, nl))
        .copy_from(&(-(&hs * hs.transpose())));
    for (j, &(k, sigma)) in model.kinks.iter().enumerate() {
        for b in 0..nl {
            a[(nl + j, b)] = sigma * hm[(b, k)];
        }
    }
    let uv = DVector::from_column_slice(u);
    let au = &a * &uv;
    let rhs = DVector::from_fn(
        rows,
        |r, _| if r < nl { au[r] - g[r].min(0.0) } else { au[r] },
    );
    let (v, n) = dense_qp(q, &DVector::from_column_slice(c), &a, &rhs)?;
    let v: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    let value = v
        .iter()
        .zip(c)
        .map(|(&x, &ci)| 0.5 * q * x * x + ci * x)
        .sum();
    Some(QpSolution {
        v,
        n: n.iter().map(|x| x.max(0.0)).collect(),
        value,
    })
}

/// Scaled KKT residual of the leader problem at `u` for the local piece
/// `model` with multipliers `n` (lines first, then kink rows).
fn stack_kkt(inst: &MarketInstance, u: &[f64], model: &LocalModel, n: &[f64]) -> f64 {
    let nl = inst.lines();
    let g = leader_eval(inst, u).g;
    let q = inst.leader_cost.q_diag;
    let atn = model.at_times(inst, n);
    let lim_scale = 1.0 + inf_norm(&inst.line_limits);
    let u_scale = 1.0 + inf_norm(u);
    let mut r = 0.0f64;
    for b in 0..nl {
        let grad = q * u[b] + inst.leader_c(b) + atn[b];
        r = r.max(((u[b] - grad).max(0.0) - u[b]).abs() / (u_scale * q.max(1.0)));
        r = r.max(g[b].max(0.0) / lim_scale);
        r = r.max(n[b] * g[b].abs() / (lim_scale * (1.0 + n[b])));
    }
    r
}

/// Leader problem from the social dual prices.
pub fn solve_stackelberg(inst: &MarketInstance, tol: f64) -> Result<MarketOutcome, MarketError> {
    solve_stackelberg_from(inst, tol, None)
}

/// Leader problem from a given starting point.
///
/// Sequential quadratic programming with feasible iterates. Each step
/// solves the local piecewise-linear model of the line constraints, one QP
/// per side of every follower sitting on its clip, and backtracks along the
/// best step until the objective falls without violating any line.
pub fn solve_stackelberg_from(
    inst: &MarketInstance,
    tol: f64,
    u0: Option<&[f64]>,
) -> Result<MarketOutcome, MarketError> {
    inst.validate()?;
    let nl = inst.lines();
    if inst.prosumers.is_empty() {
        return Ok(MarketOutcome::empty(Scenario::Stack, nl));
    }
    let q = inst.leader_cost.q_diag;
    let c: Vec<f64> = (0..nl).map(|b| inst.leader_c(b)).collect();
    let lim_scale = 1.0 + inf_norm(&inst.line_limits);
    let feas_tol = 1e-2 * tol * lim_scale;
    let objective = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&c)
            .map(|(&xi, &ci)| 0.5 * q * xi * xi + ci * xi)
            .sum()
    };
    let max_g = |x: &[f64]| {
        leader_eval(inst, x)
            .g
            .iter()
            .fold(f64::MIN, |m, &g| m.max(g))
    };

    // The social dual prices are a feasible leader decision. An infeasible
    // start is pulled toward them until it satisfies every line.
    let anchor = solve_social(inst, tol * 1e-3)?.u;
    let mut u = u0.map_or_else(|| anchor.clone(), <[f64]>::to_vec);
    project_nonneg(&mut u);
    if max_g(&u) > feas_tol {
        let start = u.clone();
        for k in 1..=64 {
            let t = k as f64 / 64.0;
            u = start
                .iter()
                .zip(&anchor)
                .map(|(a, b)| a + t * (b - a))
                .collect();
            if max_g(&u) <= feas_tol {
                break;
            }
        }
    }
    if max_g(&u) > feas_tol {
        return Err(MarketError::Infeasible);
    }

    let mut n = vec![0.0; nl];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let g = leader_eval(inst, &u).g;
        let (base, mut kinks) = classify_followers(inst, &u);
        if kinks.len() > MAX_ENUMERATED_KINKS {
            // keep the kinks on the lines with the largest multipliers
            let weight = |kk: &Kink| -> f64 {
                inst.ptdf
                    .iter()
                    .zip(&n)
                    .map(|(row, nb)| (row[kk.bus] * nb).abs())
                    .sum()
            };
            kinks.sort_by(|a, b| weight(b).total_cmp(&weight(a)));
            kinks.truncate(MAX_ENUMERATED_KINKS);
        }
        let mut best: Option<(QpSolution, LocalModel)> = None;
        for mask in 0..(1u64 << kinks.len()) {
            let model = piece_model(&base, &kinks, mask);
            let Some(sol) = solve_local_qp(inst, &model, &u, &g, q, &c) else {
                continue;
            };
            if best.as_ref().is_none_or(|(b, _)| sol.value < b.value) {
                best = Some((sol, model));
            }
        }
        let Some((sol, model)) = best else {
            break;
        };
        n = sol.n;
        residual = stack_kkt(inst, &u, &model, &n);
        if residual <= tol {
            break;
        }
        let d: Vec<f64> = sol.v.iter().zip(&u).map(|(a, b)| a - b).collect();
        let f0 = objective(&u);
        let slope: f64 = (0..nl).map(|b| (q * u[b] + c[b]) * d[b]).sum();
        let g0 = max_g(&u).max(feas_tol);
        // a breakpoint very close to `u` gains less than the rounding of f0
        let f_round = 8.0 * f64::EPSILON * (1.0 + f0.abs());
        let accept = |t: f64| -> Option<Vec<f64>> {
            let cand: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            (objective(&cand) <= f0 + 1e-4 * t * slope.min(0.0) + f_round && max_g(&cand) <= g0)
                .then_some(cand)
        };
        // the model is exact up to the first clip crossing along d, so the
        // step lands on a breakpoint when the full step fails
        let breaks = clip_breakpoints(inst, &u, &d);
        let mut next = accept(1.0);
        if next.is_none() {
            if let Some(first) = breaks.first().and_then(|&t0| accept(t0)) {
                let (mut lo, mut hi) = (0, breaks.len());
                next = Some(first);
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if let Some(x) = accept(breaks[mid]) {
                        lo = mid;
                        next = Some(x);
                    } else {
                        hi = mid;
                    }
                }
            } else {
                let mut t = breaks.first().copied().unwrap_or(1.0);
                while next.is_none() && t > 1e-12 {
                    t *= 0.5;
                    next = accept(t);
                }
            }
        }
        let moved = next.as_ref().is_some_and(|x| *x != u);
        if let Some(x) = next {
            u = x;
        }
        if !moved {
            break;
        }
    }

    let e = leader_eval(inst, &u);
    let viol = e.g.iter().fold(0.0f64, |m, &g| m.max(g)) / lim_scale;
    if residual > tol {
        return Err(MarketError::NoConvergence {
            iterations,
            residual,
        });
    }
    n.truncate(nl);
    Ok(MarketOutcome {
        scenario: Scenario::Stack,
        welfare: inst.welfare(&e.p),
        feasible: viol <= tol,
        p: e.p,
        u,
        multipliers: n,
        iterations,
        kkt_residual: residual,
        scale: 1.0,
    })
}

// ---------------------------------------------------------------------------
// BASE and WBASE
// ---------------------------------------------------------------------------

/// Unconstrained responses `clip(α_i π_i, ±p_max)`.
pub fn unconstrained_response(inst: &MarketInstance) -> Vec<f64> {
    inst.prosumers
        .iter()
        .map(|p| follower_response(p, 0.0))
        .collect()
}

/// Largest `s ∈ [0, 1]` with `H (s·p) ≤ P^max`.
pub fn uniform_scale_factor(inst: &MarketInstance, p: &[f64]) -> f64 {
    inst.flows(p)
        .iter()
        .zip(&inst.line_limits)
        .filter(|(f, m)| *f > *m)
        .map(|(f, m)| m / f)
        .fold(1.0, f64::min)
}

pub fn solve_base(
    inst: &MarketInstance,
    weighted: bool,
    tol: f64,
) -> Result<MarketOutcome, MarketError> {
    inst.validate()?;
    let scenario = if weighted {
        Scenario::Wbase
    } else {
        Scenario::Base
    };
    if inst.prosumers.is_empty() {
        return Ok(MarketOutcome::empty(scenario, inst.lines()));
    }
    let p0 = unconstrained_response(inst);
    let s0 = uniform_scale_factor(inst, &p0);
    if s0 >= 1.0 || !weighted {
        let p: Vec<f64> = p0.iter().map(|x| x * s0).collect();
        return Ok(MarketOutcome {
            scenario,
            welfare: inst.welfare(&p),
            p,
            scale: s0,
            ..MarketOutcome::empty(scenario, inst.lines())
        });
    }
    // curtail within [min(0, p0), max(0, p0)], never reversing an injection
    let lo: Vec<f64> = p0.iter().map(|&x| x.min(0.0)).collect();
    let hi: Vec<f64> = p0.iter().map(|&x| x.max(0.0)).collect();
    let mut out = solve_boxed_welfare(inst, &lo, &hi, tol, Scenario::Wbase)?;
    // remove the residual infeasibility left by the tolerance
    let s = uniform_scale_factor(inst, &out.p);
    if s < 1.0 {
        out.p.iter_mut().for_each(|x| *x *= s);
        out.welfare = inst.welfare(&out.p);
        out.scale = s;
    }
    Ok(out)
}

pub fn solve_scenario(
    inst: &MarketInstance,
    scenario: Scenario,
    tol: f64,
) -> Result<MarketOutcome, MarketError> {
    match scenario {
        Scenario::Social => solve_social(inst, tol),
        Scenario::Stack => solve_stackelberg(inst, tol),
        Scenario::Base => solve_base(inst, false, tol),
        Scenario::Wbase => solve_base(inst, true, tol),
    }
}

// ---------------------------------------------------------------------------
// Instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGrid {
    pub lines: usize,
    pub buses: usize,
    pub prosumers: usize,
    /// Nonzero PTDF entries per line.
    pub line_support: usize,
    /// Line limits as a fraction of the unconstrained flow, drawn uniformly
    /// from this range for lines loaded in the positive direction.
    pub tightness: (f64, f64),
}

impl Default for SyntheticGrid {
    fn default() -> Self {
        Self {
            lines: 186,
            buses: 118,
            prosumers: 3000,
            line_support: 6,
            tightness: (0.7, 1.1),
        }
    }
}

/// Random instance on a sparse zero-mean PTDF with rows scaled to unit
/// maximum magnitude.
pub fn synthetic_instance(g: &SyntheticGrid, seed: u64) -> MarketInstance {
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let support = g.line_support.clamp(1, g.buses);
    let mut ptdf = vec![vec![0.0; g.buses]; g.lines];
    for row in &mut ptdf {
        for _ in 0..support {
            let k = rng.random_range(0..g.buses);
            row[k] += normal.sample(&mut rng);
        }
        let m = inf_norm(row);
        if m > 0.0 {
            row.iter_mut().for_each(|h| *h /= m);
        }
    }
    let prosumers: Vec<Prosumer> = (0..g.prosumers)
        .map(|id| Prosumer {
            id,
            alpha: rng.random_range(0.5..2.0),
            pi: rng.random_range(-5.0..15.0),
            p_max: rng.random_range(5.0..20.0),
            bus: (id * g.buses) / g.prosumers.max(1),
        })
        .collect();
    let mut inst = MarketInstance {
        prosumers,
        ptdf,
        line_limits: vec![1.0; g.lines],
        leader_cost: LeaderCost::default(),
    };
    let f0 = inst.flows(&unconstrained_response(&inst));
    let floor = 1.0 + 0.01 * inf_norm(&f0);
    inst.line_limits = f0
        .iter()
        .map(|&f| {
            let theta = rng.random_range(g.tightness.0..g.tightness.1);
            if f > 0.0 {
                (theta * f).max(floor)
            } else {
                f.abs().max(floor)
            }
        })
        .collect();
    inst
}

/// Small random instance with one bus per prosumer.
pub fn random_small_instance(n: usize, lines: usize, seed: u64) -> MarketInstance {
    synthetic_instance(
        &SyntheticGrid {
            lines,
            buses: n,
            prosumers: n,
            line_support: n.min(3),
            tightness: (0.5, 1.2),
        },
        seed,
    )
}

// ---------------------------------------------------------------------------
// Security-coupled participation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityStack {
    pub name: String,
    pub key_budget_bits: f64,
    pub handshake_deadline_ms: f64,
    pub per_node_key_cost_bits: f64,
}

/// Admits nodes in id order: node `i` joins iff its handshake latency meets
/// the deadline and its key cost still fits in the remaining budget.
pub fn security_filter(latencies_ms: &[f64], stack: &SecurityStack) -> Vec<usize> {
    let mut spent = 0.0;
    let mut admitted = Vec::new();
    for (i, &l) in latencies_ms.iter().enumerate() {
        if l <= stack.handshake_deadline_ms
            && spent + stack.per_node_key_cost_bits <= stack.key_budget_bits
        {
            spent += stack.per_node_key_cost_bits;
            admitted.push(i);
        }
    }
    admitted
}

/// Per-node latencies drawn with replacement from a benchmark sample.
pub fn sample_node_latencies(pool: &[f64], n: usize, seed: u64) -> Vec<f64> {
    assert!(!pool.is_empty());
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledClearing {
    pub stack: String,
    pub admitted: Vec<usize>,
    pub outcomes: Vec<Result<MarketOutcome, String>>,
}

pub fn security_coupled_clearing(
    inst: &MarketInstance,
    latencies_ms: &[f64],
    stack: &SecurityStack,
    tol: f64,
) -> CoupledClearing {
    let admitted = security_filter(latencies_ms, stack);
    let sub = inst.subset(&admitted);
    let outcomes = Scenario::ALL
        .iter()
        .map(|&s| solve_scenario(&sub, s, tol).map_err(|e| e.to_string()))
        .collect();
    CoupledClearing {
        stack: stack.name.clone(),
        admitted,
        outcomes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareRow {
    pub stack: String,
    pub scenario: Scenario,
    pub welfare: f64,
    pub participants: usize,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl CoupledClearing {
    pub fn rows(&self) -> Vec<WelfareRow> {
        Scenario::ALL
            .iter()
            .zip(&self.outcomes)
            .map(|(&scenario, o)| match o {
                Ok(o) => WelfareRow {
                    stack: self.stack.clone(),
                    scenario,
                    welfare: o.welfare,
                    participants: self.admitted.len(),
                    iterations: o.iterations,
                    kkt_residual: o.kkt_residual,
                },
                Err(_) => WelfareRow {
                    stack: self.stack.clone(),
                    scenario,
                    welfare: f64::NAN,
                    participants: self.admitted.len(),
                    iterations: 0,
                    kkt_residual: f64::NAN,
                },
            })
            .collect()
    }
}

/// `stack,scenario,welfare,participants,iterations,kkt_residual`
pub fn write_welfare_csv<W: Write>(mut w: W, rows: &[WelfareRow]) -> std::io::Result<()> {
    writeln!(
        w,
        "stack,scenario,welfare,participants,iterations,kkt_residual"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.6},{},{},{:.3e}",
            r.stack,
            r.scenario.name(),
            r.welfare,
            r.participants,
            r.iterations,
            r.kkt_residual
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pros(alpha: f64, pi: f64, p_max: f64, bus: usize) -> Prosumer {
        Prosumer {
            id: bus,
            alpha,
            pi,
            p_max,
            bus,
        }
    }

    /// α = (1, 1), π = (10, 6), H = [1, 1], P^max = 12, C(u) = u².
    fn two_node() -> MarketInstance {
        MarketInstance {
            prosumers: vec![pros(1.0, 10.0, 100.0, 0), pros(1.0, 6.0, 100.0, 1)],
            ptdf: vec![vec![1.0, 1.0]],
            line_limits: vec![12.0],
            leader_cost: LeaderCost {
                q_diag: 2.0,
                c: vec![],
            },
        }
    }

    fn three_node() -> MarketInstance {
        MarketInstance {
            prosumers: vec![
                pros(1.0, 1.5, 2.0, 0),
                pros(2.0, 0.8, 1.5, 1),
                pros(0.5, 2.0, 3.0, 2),
            ],
            ptdf: vec![vec![1.0, 0.5, -0.3]],
            line_limits: vec![1.2],
            leader_cost: LeaderCost::default(),
        }
    }

    #[test]
    fn follower_examples() {
        assert_eq!(follower_response(&pros(2.0, 10.0, 100.0, 0), 4.0), 12.0);
        assert_eq!(follower_response(&pros(2.0, 10.0, 100.0, 0), 10.0), 0.0);
        assert_eq!(follower_response(&pros(2.0, 10.0, 5.0, 0), 0.0), 5.0);
    }

    #[test]
    fn loop_and_matrix_forms_agree_unclipped() {
        for seed in 0..200 {
            let mut inst = random_small_instance(6, 3, seed);
            inst.prosumers.iter_mut().for_each(|p| p.p_max = 1e9);
            let mut rng = rng_from_seed(seed);
            let u: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..5.0)).collect();
            let a = aggregate_response(&inst, &u);
            let b = aggregate_response_matrix(&inst, &u);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} {y}");
            }
        }
        let inst = two_node();
        assert_eq!(aggregate_response(&inst, &[0.0]), vec![10.0, 6.0]);
    }

    #[test]
    fn two_node_stackelberg_matches_scan() {
        let inst = two_node();
        let out = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        // brute-force leader scan over u ∈ [0, 10] at 1e-4
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let u = k as f64 * 1e-4;
            let feasible = inst.flows(&aggregate_response(&inst, &[u]))[0] <= 12.0 + 1e-12;
            if feasible && u * u < best.0 {
                best = (u * u, u);
            }
        }
        assert!(
            (out.u[0] - best.1).abs() < 1e-3,
            "{} vs {}",
            out.u[0],
            best.1
        );
        assert!((out.u[0] - 2.0).abs() < 1e-5);
        assert!((out.welfare - 64.0).abs() / 64.0 < 1e-4);
        assert!(out.kkt_residual <= DEFAULT_TOL);
    }

    #[test]
    fn slack_lines_give_zero_prices() {
        let mut inst = two_node();
        inst.line_limits = vec![100.0];
        let out = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        assert_eq!(out.u, vec![0.0]);
        assert_eq!(out.p, vec![10.0, 6.0]);
        let s = solve_social(&inst, DEFAULT_TOL).unwrap();
        assert!((s.p[0] - 10.0).abs() < 1e-9 && (s.p[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let inst = random_small_instance(8, 2, 5);
        let a = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        let mut perm = inst.clone();
        perm.prosumers.reverse();
        let b = solve_stackelberg(&perm, DEFAULT_TOL).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((x - y).abs() <= 10.0 * DEFAULT_TOL * (1.0 + x.abs()));
        }
    }

    #[test]
    fn three_node_social_matches_grid_search() {
        let inst = three_node();
        let out = solve_social(&inst, DEFAULT_TOL).unwrap();
        // grid over (p0, p1) at 1e-3; for each, p2 maximises its own
        // concave term subject to the remaining line capacity
        let (h, m) = (&inst.ptdf[0], inst.line_limits[0]);
        let pr = &inst.prosumers;
        let mut best = f64::NEG_INFINITY;
        let steps = |pm: f64| (-(pm * 1000.0) as i64)..=((pm * 1000.0) as i64);
        for a in steps(pr[0].p_max) {
            let p0 = a as f64 * 1e-3;
            for b in steps(pr[1].p_max) {
                let p1 = b as f64 * 1e-3;
                let room = m - h[0] * p0 - h[1] * p1;
                // h2 < 0: constraint h2·p2 ≤ room ⇔ p2 ≥ room / h2
                let lo = (room / h[2]).max(-pr[2].p_max);
                if lo > pr[2].p_max {
                    continue;
                }
                let p2 = (pr[2].alpha * pr[2].pi).clamp(lo, pr[2].p_max);
                let w = pr[0].welfare(p0) + pr[1].welfare(p1) + pr[2].welfare(p2);
                best = best.max(w);
            }
        }
        assert!(
            (out.welfare - best).abs() / best.abs() < 1e-4,
            "{} vs {best}",
            out.welfare
        );
        assert!(out.welfare >= best - 1e-9);
    }

    #[test]
    fn three_node_stackelberg_matches_scan() {
        let inst = three_node();
        let out = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for k in 0..=100_000 {
            let u = k as f64 * 1e-4;
            let p = aggregate_response(&inst, &[u]);
            if inst.flows(&p)[0] <= inst.line_limits[0] + 1e-12 && u < best.0 {
                best = (u, u, inst.welfare(&p));
            }
        }
        assert!(
            (out.u[0] - best.1).abs() < 1e-3,
            "{} vs {}",
            out.u[0],
            best.1
        );
        assert!((out.welfare - best.2).abs() / best.2.abs() < 1e-3);
    }

    #[test]
    fn base_scaling_by_hand() {
        // homogeneous pair, unconstrained flow 16 over a 12 MW line
        let mut inst = two_node();
        inst.prosumers[1].pi = 10.0;
        let out = solve_base(&inst, false, DEFAULT_TOL).unwrap();
        assert!((out.scale - 12.0 / 20.0).abs() < 1e-15);
        assert!((inst.flows(&out.p)[0] - 12.0).abs() < 1e-12);
        let mut slack = inst.clone();
        slack.line_limits = vec![50.0];
        let b = solve_base(&slack, false, DEFAULT_TOL).unwrap();
        let w = solve_base(&slack, true, DEFAULT_TOL).unwrap();
        assert_eq!(b.p, unconstrained_response(&slack));
        assert_eq!(b.p, w.p);
    }

    #[test]
    fn weighted_base_beats_uniform_with_heterogeneous_alpha() {
        let mut checked = 0;
        for seed in 0..100 {
            let inst = random_small_instance(6, 2, seed);
            let b = solve_base(&inst, false, DEFAULT_TOL).unwrap();
            if b.scale >= 1.0 {
                continue;
            }
            let w = solve_base(&inst, true, DEFAULT_TOL).unwrap();
            let s = solve_social(&inst, DEFAULT_TOL).unwrap();
            assert!(
                w.welfare >= b.welfare - 1e-9,
                "seed {seed}: {} < {}",
                w.welfare,
                b.welfare
            );
            assert!(
                s.welfare >= w.welfare - 1e-6 * s.welfare.abs(),
                "seed {seed}"
            );
            assert!(inst
                .flows(&w.p)
                .iter()
                .zip(&inst.line_limits)
                .all(|(f, m)| f <= &(m + 1e-9)));
            checked += 1;
        }
        assert!(checked > 10, "{checked}");
    }

    #[test]
    fn social_dominates_stack() {
        for seed in 0..100 {
            let inst = random_small_instance(10, 3, 1000 + seed);
            let Ok(st) = solve_stackelberg(&inst, DEFAULT_TOL) else {
                continue;
            };
            let so = solve_social(&inst, DEFAULT_TOL).unwrap();
            assert!(
                so.welfare >= st.welfare - 1e-6 * (1.0 + so.welfare.abs()),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn stack_kkt_and_multiplier_slackness() {
        for seed in 0..50 {
            let inst = random_small_instance(8, 3, 77 + seed);
            let Ok(out) = solve_stackelberg(&inst, DEFAULT_TOL) else {
                continue;
            };
            assert!(out.kkt_residual <= DEFAULT_TOL);
            let flows = inst.flows(&out.p);
            let scale = 1.0 + inf_norm(&inst.line_limits);
            for b in 0..inst.lines() {
                let slack = inst.line_limits[b] - flows[b];
                assert!(
                    out.multipliers[b] * slack.abs()
                        <= DEFAULT_TOL * scale * (1.0 + out.multipliers[b])
                );
            }
        }
    }

    #[test]
    fn empty_market() {
        let mut inst = two_node();
        inst.prosumers.clear();
        for s in Scenario::ALL {
            let o = solve_scenario(&inst, s, DEFAULT_TOL).unwrap();
            assert_eq!(o.welfare, 0.0);
        }
    }

    #[test]
    fn security_filter_examples() {
        let lat = [10.0, 50.0, 20.0, 5.0];
        let open = SecurityStack {
            name: "x".into(),
            key_budget_bits: f64::INFINITY,
            handshake_deadline_ms: f64::INFINITY,
            per_node_key_cost_bits: 256.0,
        };
        assert_eq!(security_filter(&lat, &open), vec![0, 1, 2, 3]);
        let zero = SecurityStack {
            key_budget_bits: 0.0,
            ..open.clone()
        };
        assert!(security_filter(&lat, &zero).is_empty());
        let tight = SecurityStack {
            key_budget_bits: 512.0,
            handshake_deadline_ms: 30.0,
            ..open
        };
        // node 1 misses the deadline; nodes 0 and 2 exhaust the budget
        assert_eq!(security_filter(&lat, &tight), vec![0, 2]);
    }

    #[test]
    fn instance_json_round_trip() {
        let inst = two_node();
        let back = MarketInstance::from_json(&inst.to_json()).unwrap();
        assert_eq!(back.prosumers.len(), 2);
        assert_eq!(back.prosumers[1].id, 1);
        assert_eq!(back.ptdf, inst.ptdf);
        let v: serde_json::Value = serde_json::from_str(&inst.to_json()).unwrap();
        assert!(v["prosumers"][0].get("alpha").is_some());
        assert!(v["leader_cost"].get("q_diag").is_some());
        assert!(MarketInstance::from_json(
            r#"{"prosumers":[],"ptdf":[[1.0]],"line_limits":[-1.0]}"#
        )
        .is_err());
    }

    #[test]
    fn welfare_csv_header() {
        let mut buf = Vec::new();
        write_welfare_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "stack,scenario,welfare,participants,iterations,kkt_residual\n"
        );
    }
}
