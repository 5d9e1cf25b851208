//! Randomness-quality calculators for the quantum entropy source and the
//! synthetic QBER traces that drive the rate-controller experiments.
//!
//! Everything here is a pure function of its arguments. Probabilities are
//! computed in `f64`.

use std::io::{self, BufRead, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::rng::rng_from_seed;

/// Default smoothing parameter, 2^-64.
pub const DEFAULT_EPSILON: f64 = 5.421_010_862_427_522e-20;
/// Fixed length of the privacy-amplification security margin, in bits.
pub const EXTRACTOR_MARGIN_BITS: f64 = 128.0;
pub const TRACE_SAMPLE_RATE_HZ: f64 = 1000.0;
pub const QBER_CLIP_LO: f64 = 0.001;
pub const QBER_CLIP_HI: f64 = 0.08;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EntropyError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("malformed trace data: {0}")]
    Format(String),
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> EntropyError {
    EntropyError::Domain {
        name,
        value,
        domain,
    }
}

/// Binary Shannon entropy `h2(q)` in bits, with `0·log2(0) = 0`.
pub fn binary_entropy(q: f64) -> Result<f64, EntropyError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(domain("q", q, "[0, 1]"));
    }
    Ok(h2_unchecked(q))
}

fn h2_unchecked(q: f64) -> f64 {
    let xlog = |x: f64| if x <= 0.0 { 0.0 } else { x * x.log2() };
    -(xlog(q) + xlog(1.0 - q))
}

/// Raw block size, error rate and smoothing parameter for the entropy bounds.
///
/// [`EntropyParams::new`] enforces the strict domain `n ≥ 1`, `0 < q < 0.5`,
/// `0 < ε < 1`. The bound functions themselves also accept the closed limits
/// `q = 0` and `ε = 1`, so a struct literal can be used to probe them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyParams {
    pub n: u64,
    pub q: f64,
    pub epsilon: f64,
}

impl EntropyParams {
    pub fn new(n: u64, q: f64, epsilon: f64) -> Result<Self, EntropyError> {
        if n == 0 {
            return Err(domain("n", 0.0, "n >= 1"));
        }
        if !(q > 0.0 && q < 0.5) {
            return Err(domain("q", q, "(0, 0.5)"));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(domain("epsilon", epsilon, "(0, 1)"));
        }
        Ok(Self { n, q, epsilon })
    }

    fn yield_bits(&self) -> f64 {
        self.n as f64 * (1.0 - h2_unchecked(self.q))
    }

    fn log_inv_eps(&self) -> f64 {
        -self.epsilon.log2()
    }
}

/// Smooth min-entropy lower bound under a binary symmetric channel,
/// `n(1 − h2(q)) − log2(1/ε)`. Negative values mean no extractable guarantee.
pub fn min_entropy_lower_bound(p: &EntropyParams) -> f64 {
    p.yield_bits() - p.log_inv_eps()
}

/// Output length of the leftover-hash extractor,
/// `max(0, ⌊n(1 − h2(q)) − 2·log2(1/ε) − 128⌋)`.
pub fn extractable_length(p: &EntropyParams) -> u64 {
    let l = p.yield_bits() - 2.0 * p.log_inv_eps() - EXTRACTOR_MARGIN_BITS;
    if l <= 0.0 {
        0
    } else {
        l.floor() as u64
    }
}

/// Miss-detection probability of the χ² QBER alarm.
///
/// The statistic `(Δq)²·n/q0` is compared against a χ² law with one degree
/// of freedom; the result is its upper tail `Q(1/2, x/2)`.
pub fn chi_square_miss_probability(q0: f64, delta_q: f64, n: u64) -> Result<f64, EntropyError> {
    if !(q0 > 0.0) {
        return Err(domain("q0", q0, "q0 > 0"));
    }
    if !(delta_q >= 0.0) {
        return Err(domain("delta_q", delta_q, "delta_q >= 0"));
    }
    if n == 0 {
        return Err(domain("n", 0.0, "n >= 1"));
    }
    let stat = delta_q * delta_q * n as f64 / q0;
    if stat == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(0.5, stat / 2.0))
}

/// Composed statistical-distance bound `ε_smooth + P_miss`, capped at 1.
pub fn statistical_distance_bound(epsilon_smooth: f64, p_miss: f64) -> Result<f64, EntropyError> {
    for (name, v) in [("epsilon_smooth", epsilon_smooth), ("p_miss", p_miss)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(domain(name, v, "[0, 1]"));
        }
    }
    Ok((epsilon_smooth + p_miss).min(1.0))
}

/// Parameters of the synthetic QBER generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceParams {
    pub duration_s: f64,
    pub base_q: f64,
    pub noise_sigma: f64,
    pub pulse_count: u32,
    pub pulse_amplitude: (f64, f64),
    /// Full width at half maximum of a pulse, in samples.
    pub pulse_fwhm_samples: (f64, f64),
}

impl Default for TraceParams {
    fn default() -> Self {
        Self::with_duration(60.0)
    }
}

impl TraceParams {
    /// Defaults scaled to `duration_s`: 12 pulses per minute.
    pub fn with_duration(duration_s: f64) -> Self {
        Self {
            duration_s,
            base_q: 0.01,
            noise_sigma: 0.004,
            pulse_count: (12.0 * duration_s / 60.0).round() as u32,
            pulse_amplitude: (0.01, 0.05),
            pulse_fwhm_samples: (50.0, 500.0),
        }
    }
}

/// A 1 kHz QBER time series clipped to `[q_lo, q_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QberTrace {
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
    pub q_lo: f64,
    pub q_hi: f64,
    pub seed: u64,
}

impl QberTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        crate::stats::mean(&self.samples)
    }

    pub fn variance(&self) -> f64 {
        crate::stats::variance(&self.samples)
    }

    /// Writes `t_ms,qber`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_ms,qber")?;
        for (t, q) in self.samples.iter().enumerate() {
            writeln!(w, "{t},{q}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64) -> Result<Self, EntropyError> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "t_ms,qber" => {}
            _ => return Err(EntropyError::Format("missing `t_ms,qber` header".into())),
        }
        let mut samples = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| EntropyError::Format(e.to_string()))?;
            let (t, q) = line
                .split_once(',')
                .ok_or_else(|| EntropyError::Format(format!("row {i}: expected two fields")))?;
            let t: usize = t
                .trim()
                .parse()
                .map_err(|_| EntropyError::Format(format!("row {i}: bad t_ms")))?;
            if t != i {
                return Err(EntropyError::Format(format!(
                    "row {i}: t_ms out of sequence"
                )));
            }
            samples.push(
                q.trim()
                    .parse()
                    .map_err(|_| EntropyError::Format(format!("row {i}: bad qber")))?,
            );
        }
        Ok(Self::from_samples(samples, seed))
    }

    /// Little-endian `f64` samples, no header.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        for q in &self.samples {
            w.write_all(&q.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, seed: u64) -> Result<Self, EntropyError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| EntropyError::Format(e.to_string()))?;
        if buf.len() % 8 != 0 {
            return Err(EntropyError::Format("length is not a multiple of 8".into()));
        }
        let samples = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self::from_samples(samples, seed))
    }

    /// Wraps externally supplied samples, clipping them into the default range.
    pub fn from_samples(samples: Vec<f64>, seed: u64) -> Self {
        Self {
            sample_rate_hz: TRACE_SAMPLE_RATE_HZ,
            samples: samples
                .into_iter()
                .map(|q| q.clamp(QBER_CLIP_LO, QBER_CLIP_HI))
                .collect(),
            q_lo: QBER_CLIP_LO,
            q_hi: QBER_CLIP_HI,
            seed,
        }
    }
}

/// Synthesises a QBER trace: `base_q` plus Gaussian noise truncated at ±3σ,
/// plus `pulse_count` Gaussian bumps with uniform centres, widths and
/// amplitudes, clipped to `[0.001, 0.08]`.
pub fn generate_qber_trace(params: &TraceParams, seed: u64) -> Result<QberTrace, EntropyError> {
    if !(params.duration_s > 0.0) {
        return Err(domain("duration_s", params.duration_s, "duration_s > 0"));
    }
    if !(params.noise_sigma >= 0.0) {
        return Err(domain(
            "noise_sigma",
            params.noise_sigma,
            "noise_sigma >= 0",
        ));
    }
    let n = (params.duration_s * TRACE_SAMPLE_RATE_HZ).round().max(1.0) as usize;
    let mut rng = rng_from_seed(seed);

    let mut samples: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        let z = loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 3.0 {
                break z;
            }
        };
        samples.push(params.base_q + params.noise_sigma * z);
    }

    // FWHM = 2·sqrt(2 ln 2)·σ
    let fwhm_to_sigma = 1.0 / (8.0 * std::f64::consts::LN_2).sqrt();
    for _ in 0..params.pulse_count {
        let centre = rng.random_range(0.0..n as f64);
        let (w_lo, w_hi) = params.pulse_fwhm_samples;
        let (a_lo, a_hi) = params.pulse_amplitude;
        let sigma = rng.random_range(w_lo..=w_hi) * fwhm_to_sigma;
        let amp = rng.random_range(a_lo..=a_hi);
        // bumps are negligible beyond 8σ
        let lo = (centre - 8.0 * sigma).floor().max(0.0) as usize;
        let hi = ((centre + 8.0 * sigma).ceil() as usize).min(n);
        for (t, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let d = (t as f64 - centre) / sigma;
            *s += amp * (-0.5 * d * d).exp();
        }
    }

    Ok(QberTrace::from_samples(samples, seed))
}
