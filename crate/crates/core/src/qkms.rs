//! Quantum key management service.
//!
//! The pool of distilled key material behaves as a token bucket: balance
//! `B(t)` accrues at the generation rate up to the capacity `M` and is spent
//! by `Rent` calls. A deployment runs `m` replicas, each owning a disjoint
//! share of the pool. Replicas reconcile their key registries with a
//! min-merge CRDT, so a retirement seen anywhere wins everywhere.
//!
//! The second half of the module is the Rate-Adapt output controller and the
//! per-millisecond simulation that compares it against a fixed-rate strategy.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use base64::Engine;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{self, EntropyParams, QberTrace};
use crate::rng::{rng_from_seed, SimRng};

pub const DEFAULT_TTL_MS: u64 = 30_000;
/// A QBER alarm fires when the miss probability of the χ² test drops below this.
pub const QBER_ALARM_P_MISS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KmsError {
    #[error("insufficient entropy: requested {requested} bits, balance {available}")]
    InsufficientEntropy { requested: u64, available: u64 },
    #[error("unknown key {0}")]
    UnknownKey(KeyId),
    #[error("key {0} already retired")]
    AlreadyRetired(KeyId),
    #[error("key {0} has expired")]
    Expired(KeyId),
    #[error("invalid request: {0}")]
    InvalidRequest(&'static str),
}

// ---------------------------------------------------------------------------
// Token bucket
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyPoolState {
    pub balance_bits: u64,
    pub capacity_bits: u64,
    /// Replenishment rate `R_gen(t)` in bit/s.
    pub gen_rate_bps: f64,
    pub clock_ms: u64,
}

impl KeyPoolState {
    pub fn full(capacity_bits: u64, gen_rate_bps: f64) -> Self {
        Self {
            balance_bits: capacity_bits,
            capacity_bits,
            gen_rate_bps,
            clock_ms: 0,
        }
    }

    pub fn replenishment(&self, delta_ms: u64) -> u64 {
        (self.gen_rate_bps.max(0.0) * delta_ms as f64 / 1000.0).floor() as u64
    }
}

/// Advances the bucket by `delta_ms`:
/// `B' = clamp(B − consumed + ⌊R_gen·δ⌋, 0, M)`.
pub fn step_bucket(s: &KeyPoolState, delta_ms: u64, consumed_bits: u64) -> KeyPoolState {
    let refill = s.replenishment(delta_ms) as i128;
    let next = s.balance_bits as i128 - consumed_bits as i128 + refill;
    KeyPoolState {
        balance_bits: next.clamp(0, s.capacity_bits as i128) as u64,
        clock_ms: s.clock_ms + delta_ms,
        ..*s
    }
}

// ---------------------------------------------------------------------------
// Keys
// ---------------------------------------------------------------------------

/// 128-bit key identifier. The top byte holds the issuing replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId(pub u128);

impl KeyId {
    pub fn replica(&self) -> u8 {
        (self.0 >> 120) as u8
    }

    pub fn to_hex(&self) -> String {
        format!("{:032x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 32 {
            return None;
        }
        u128::from_str_radix(s, 16).ok().map(KeyId)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyState {
    Active,
    Retired,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub key_id: KeyId,
    pub key_bits: Vec<u8>,
    pub bit_len: u64,
    pub ttl_ms: u64,
    pub issued_at_ms: u64,
    pub state: KeyState,
}

impl KeyRecord {
    pub fn expires_at_ms(&self) -> u64 {
        self.issued_at_ms + self.ttl_ms
    }
}

/// Wire form of a successful `Rent(n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RentResponse {
    /// 32 lowercase hex characters.
    pub key_id: String,
    /// Standard base64 of the key bytes.
    pub key: String,
    pub ttl_ms: u64,
}

impl From<&KeyRecord> for RentResponse {
    fn from(k: &KeyRecord) -> Self {
        Self {
            key_id: k.key_id.to_hex(),
            key: base64::engine::general_purpose::STANDARD.encode(&k.key_bits),
            ttl_ms: k.ttl_ms,
        }
    }
}

/// Source of key identifiers and key material for one replica.
#[derive(Debug, Clone)]
pub struct KeyIssuer {
    replica: u8,
    rng: SimRng,
}

impl KeyIssuer {
    pub fn new(replica: u8, seed: u64) -> Self {
        Self {
            replica,
            rng: rng_from_seed(seed),
        }
    }

    pub fn replica(&self) -> u8 {
        self.replica
    }

    fn next_id(&mut self) -> KeyId {
        let low: u128 = self.rng.random::<u128>() & ((1u128 << 120) - 1);
        KeyId(((self.replica as u128) << 120) | low)
    }

    fn material(&mut self, n_bits: u64) -> Vec<u8> {
        let mut bytes = vec![0u8; n_bits.div_ceil(8) as usize];
        self.rng.fill_bytes(&mut bytes);
        let spare = (bytes.len() as u64 * 8 - n_bits) as u32;
        if spare > 0 {
            if let Some(last) = bytes.last_mut() {
                *last &= 0xffu8 << spare;
            }
        }
        bytes
    }
}

/// `Rent(n)` against a bucket snapshot. Fails without touching the state when
/// `n > B(t)`.
pub fn rent(
    s: &KeyPoolState,
    n_bits: u64,
    now_ms: u64,
    issuer: &mut KeyIssuer,
) -> Result<(KeyRecord, KeyPoolState), KmsError> {
    if n_bits == 0 {
        return Err(KmsError::InvalidRequest("n_bits must be positive"));
    }
    if n_bits > s.balance_bits {
        return Err(KmsError::InsufficientEntropy {
            requested: n_bits,
            available: s.balance_bits,
        });
    }
    let record = KeyRecord {
        key_id: issuer.next_id(),
        key_bits: issuer.material(n_bits),
        bit_len: n_bits,
        ttl_ms: DEFAULT_TTL_MS,
        issued_at_ms: now_ms,
        state: KeyState::Active,
    };
    let next = KeyPoolState {
        balance_bits: s.balance_bits - n_bits,
        ..*s
    };
    Ok((record, next))
}

// ---------------------------------------------------------------------------
// CRDT
// ---------------------------------------------------------------------------

/// The CRDT join: `merge(x, y) = min(x, y)`.
pub fn crdt_merge(x: u64, y: u64) -> u64 {
    x.min(y)
}

/// Replicated registry of remaining-use counters per key.
///
/// An active key holds its bit length, a retired or expired key holds 0.
/// Counters only decrease locally, and merging takes the pointwise minimum.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRegistry {
    counters: BTreeMap<KeyId, u64>,
}

impl KeyRegistry {
    pub fn record_issue(&mut self, id: KeyId, bits: u64) {
        let c = self.counters.entry(id).or_insert(bits);
        *c = crdt_merge(*c, bits);
    }

    pub fn record_retire(&mut self, id: KeyId) {
        self.counters.insert(id, 0);
    }

    pub fn get(&self, id: &KeyId) -> Option<u64> {
        self.counters.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &KeyId> {
        self.counters.keys()
    }

    pub fn merge(&self, other: &Self) -> Self {
        let mut counters = self.counters.clone();
        for (id, &v) in &other.counters {
            counters
                .entry(*id)
                .and_modify(|c| *c = crdt_merge(*c, v))
                .or_insert(v);
        }
        Self { counters }
    }
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmsEventKind {
    Rent,
    RentFailed,
    Retire,
    Expire,
    Merge,
}

impl KmsEventKind {
    fn as_str(&self) -> &'static str {
        match self {
            Self::Rent => "rent",
            Self::RentFailed => "rent_failed",
            Self::Retire => "retire",
            Self::Expire => "expire",
            Self::Merge => "merge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmsEvent {
    pub t_ms: u64,
    pub kind: KmsEventKind,
    pub replica: u8,
    pub key_id: Option<KeyId>,
    pub bits: u64,
    pub balance: u64,
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyFlag {
    EmptyPool,
    QberAlarm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub session_id: String,
    pub window_ms: (u64, u64),
    pub bits_consumed: u64,
    pub rent_count: u64,
    pub failure_count: u64,
    pub anomaly_flags: Vec<AnomalyFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmsConfig {
    pub replicas: u8,
    pub capacity_bits: u64,
    pub gen_rate_bps: f64,
    /// Baseline QBER `q0` used by the audit alarm.
    pub baseline_qber: f64,
}

impl Default for KmsConfig {
    fn default() -> Self {
        Self {
            replicas: 3,
            capacity_bits: 1 << 20,
            gen_rate_bps: 5e6,
            baseline_qber: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Replica {
    pool: KeyPoolState,
    issuer: KeyIssuer,
    keys: BTreeMap<KeyId, KeyRecord>,
    registry: KeyRegistry,
}

#[derive(Debug, Clone, Copy)]
struct QberObservation {
    t_ms: u64,
    q: f64,
    n_bits: u64,
}

/// In-process KMS with `m` replicas behind uniform (ECMP-style) load balancing.
///
/// Mutations are serialised through `&mut self`; `reconcile` is the only
/// cross-replica interaction.
#[derive(Debug, Clone)]
pub struct Kms {
    cfg: KmsConfig,
    replicas: Vec<Replica>,
    balancer: SimRng,
    log: Vec<KmsEvent>,
    qber: Vec<QberObservation>,
}

impl Kms {
    pub fn new(cfg: KmsConfig, seed: u64) -> Self {
        assert!(cfg.replicas >= 1, "at least one replica");
        let m = cfg.replicas as u64;
        let mut seeder = rng_from_seed(seed);
        let replicas = (0..cfg.replicas)
            .map(|i| Replica {
                pool: KeyPoolState::full(cfg.capacity_bits / m, cfg.gen_rate_bps / m as f64),
                issuer: KeyIssuer::new(i, seeder.random()),
                keys: BTreeMap::new(),
                registry: KeyRegistry::default(),
            })
            .collect();
        Self {
            cfg,
            replicas,
            balancer: rng_from_seed(seeder.random()),
            log: Vec::new(),
            qber: Vec::new(),
        }
    }

    pub fn config(&self) -> &KmsConfig {
        &self.cfg
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn pool(&self, replica: usize) -> &KeyPoolState {
        &self.replicas[replica].pool
    }

    pub fn total_balance(&self) -> u64 {
        self.replicas.iter().map(|r| r.pool.balance_bits).sum()
    }

    pub fn events(&self) -> &[KmsEvent] {
        &self.log
    }

    pub fn registry(&self, replica: usize) -> &KeyRegistry {
        &self.replicas[replica].registry
    }

    /// Updates the generation rate of every replica (split evenly).
    pub fn set_generation_rate(&mut self, total_bps: f64) {
        let m = self.replicas.len() as f64;
        for r in &mut self.replicas {
            r.pool.gen_rate_bps = total_bps / m;
        }
    }

    /// Advances every replica's bucket to `now_ms`.
    pub fn advance_to(&mut self, now_ms: u64) {
        for r in &mut self.replicas {
            if now_ms > r.pool.clock_ms {
                let dt = now_ms - r.pool.clock_ms;
                r.pool = step_bucket(&r.pool, dt, 0);
            }
        }
    }

    /// `Rent(n)` routed to a uniformly chosen replica.
    pub fn rent(
        &mut self,
        n_bits: u64,
        now_ms: u64,
        session_id: &str,
    ) -> Result<RentResponse, KmsError> {
        let idx = self.balancer.random_range(0..self.replicas.len());
        self.rent_on(idx, n_bits, now_ms, session_id)
    }

    /// `Rent(n)` against a specific replica.
    pub fn rent_on(
        &mut self,
        replica: usize,
        n_bits: u64,
        now_ms: u64,
        session_id: &str,
    ) -> Result<RentResponse, KmsError> {
        self.advance_to(now_ms);
        let r = &mut self.replicas[replica];
        match rent(&r.pool, n_bits, now_ms, &mut r.issuer) {
            Ok((record, pool)) => {
                r.pool = pool;
                r.registry.record_issue(record.key_id, n_bits);
                let resp = RentResponse::from(&record);
                self.log.push(KmsEvent {
                    t_ms: now_ms,
                    kind: KmsEventKind::Rent,
                    replica: replica as u8,
                    key_id: Some(record.key_id),
                    bits: n_bits,
                    balance: r.pool.balance_bits,
                    session_id: Some(session_id.to_owned()),
                });
                r.keys.insert(record.key_id, record);
                Ok(resp)
            }
            Err(e) => {
                self.log.push(KmsEvent {
                    t_ms: now_ms,
                    kind: KmsEventKind::RentFailed,
                    replica: replica as u8,
                    key_id: None,
                    bits: n_bits,
                    balance: r.pool.balance_bits,
                    session_id: Some(session_id.to_owned()),
                });
                Err(e)
            }
        }
    }

    pub fn key(&self, id: &KeyId) -> Option<&KeyRecord> {
        self.replicas.get(id.replica() as usize)?.keys.get(id)
    }

    /// `Retire(key_id)`.
    pub fn retire(&mut self, id: KeyId, now_ms: u64) -> Result<(), KmsError> {
        let idx = id.replica() as usize;
        let r = self.replicas.get_mut(idx).ok_or(KmsError::UnknownKey(id))?;
        let rec = r.keys.get_mut(&id).ok_or(KmsError::UnknownKey(id))?;
        match rec.state {
            KeyState::Active => {}
            KeyState::Retired => return Err(KmsError::AlreadyRetired(id)),
            KeyState::Expired => return Err(KmsError::Expired(id)),
        }
        rec.state = KeyState::Retired;
        r.registry.record_retire(id);
        self.log.push(KmsEvent {
            t_ms: now_ms,
            kind: KmsEventKind::Retire,
            replica: idx as u8,
            key_id: Some(id),
            bits: 0,
            balance: r.pool.balance_bits,
            session_id: None,
        });
        Ok(())
    }

    /// Moves every active key whose ttl has elapsed to `Expired`.
    pub fn expire_sweep(&mut self, now_ms: u64) -> usize {
        let mut count = 0;
        for (idx, r) in self.replicas.iter_mut().enumerate() {
            for rec in r.keys.values_mut() {
                if rec.state == KeyState::Active && now_ms > rec.expires_at_ms() {
                    rec.state = KeyState::Expired;
                    r.registry.record_retire(rec.key_id);
                    count += 1;
                    self.log.push(KmsEvent {
                        t_ms: now_ms,
                        kind: KmsEventKind::Expire,
                        replica: idx as u8,
                        key_id: Some(rec.key_id),
                        bits: 0,
                        balance: r.pool.balance_bits,
                        session_id: None,
                    });
                }
            }
        }
        count
    }

    /// Anti-entropy round: every replica adopts the merged registry.
    pub fn reconcile(&mut self, now_ms: u64) {
        let merged = self
            .replicas
            .iter()
            .fold(KeyRegistry::default(), |acc, r| acc.merge(&r.registry));
        for (idx, r) in self.replicas.iter_mut().enumerate() {
            r.registry = merged.clone();
            // adopt retirements decided elsewhere
            for rec in r.keys.values_mut() {
                if rec.state == KeyState::Active && merged.get(&rec.key_id) == Some(0) {
                    rec.state = KeyState::Retired;
                }
            }
            self.log.push(KmsEvent {
                t_ms: now_ms,
                kind: KmsEventKind::Merge,
                replica: idx as u8,
                key_id: None,
                bits: merged.len() as u64,
                balance: r.pool.balance_bits,
                session_id: None,
            });
        }
    }

    /// Records a QBER measurement over `n_bits` raw bits.
    pub fn observe_qber(&mut self, t_ms: u64, q: f64, n_bits: u64) {
        self.qber.push(QberObservation { t_ms, q, n_bits });
    }

    /// `Audit(sid, window)`: consumption and anomalies in `[from, to)`.
    pub fn audit(&self, session_id: &str, window_ms: (u64, u64)) -> AuditReport {
        let (from, to) = window_ms;
        let mut bits = 0;
        let mut rents = 0;
        let mut failures = 0;
        let mut any_failure = false;
        for e in self.log.iter().filter(|e| e.t_ms >= from && e.t_ms < to) {
            let mine = e.session_id.as_deref() == Some(session_id);
            match e.kind {
                KmsEventKind::Rent if mine => {
                    bits += e.bits;
                    rents += 1;
                }
                KmsEventKind::RentFailed => {
                    any_failure = true;
                    if mine {
                        failures += 1;
                    }
                }
                _ => {}
            }
        }
        let mut anomaly_flags = Vec::new();
        if any_failure {
            anomaly_flags.push(AnomalyFlag::EmptyPool);
        }
        if self.qber_alarm(window_ms) {
            anomaly_flags.push(AnomalyFlag::QberAlarm);
        }
        AuditReport {
            session_id: session_id.to_owned(),
            window_ms,
            bits_consumed: bits,
            rent_count: rents,
            failure_count: failures,
            anomaly_flags,
        }
    }

    fn qber_alarm(&self, (from, to): (u64, u64)) -> bool {
        let obs: Vec<_> = self
            .qber
            .iter()
            .filter(|o| o.t_ms >= from && o.t_ms < to)
            .collect();
        let n: u64 = obs.iter().map(|o| o.n_bits).sum();
        if n == 0 {
            return false;
        }
        let mean = obs.iter().map(|o| o.q * o.n_bits as f64).sum::<f64>() / n as f64;
        let dq = (mean - self.cfg.baseline_qber).max(0.0);
        entropy::chi_square_miss_probability(self.cfg.baseline_qber, dq, n)
            .map(|p| p < QBER_ALARM_P_MISS)
            .unwrap_or(false)
    }

    /// Event log as CSV `t_ms,event,replica,key_id,bits,balance`.
    pub fn write_event_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_ms,event,replica,key_id,bits,balance")?;
        for e in &self.log {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.t_ms,
                e.kind.as_str(),
                e.replica,
                e.key_id.map(|k| k.to_hex()).unwrap_or_default(),
                e.bits,
                e.balance
            )?;
        }
        Ok(())
    }
}

/// Generation rate `R_0(1 − η)` with the extractor-implied loss
/// `η = h2(q) + 2·64/n`, floored at zero.
pub fn generation_rate(r0_bps: f64, q: f64, n_bits: u64) -> f64 {
    let h = entropy::binary_entropy(q.clamp(0.0, 1.0)).unwrap_or(1.0);
    let eta = h + 128.0 / n_bits.max(1) as f64;
    (r0_bps * (1.0 - eta)).max(0.0)
}

// ---------------------------------------------------------------------------
// Rate-Adapt
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateAdaptState {
    pub r_t_bps: f64,
    pub r_max_bps: f64,
    pub gamma0: f64,
    /// Step counter, starts at 1.
    pub t: u64,
}

impl RateAdaptState {
    pub fn new(r_max_bps: f64, gamma0: f64) -> Self {
        Self {
            r_t_bps: r_max_bps,
            r_max_bps,
            gamma0,
            t: 1,
        }
    }

    pub fn floor_bps(&self) -> f64 {
        0.1 * self.r_max_bps
    }
}

/// One Rate-Adapt update: `γ_t = γ0/t`,
/// `R_{t+1} = max(0.1·R_max, (1 − γ_t·q_t)·R_t)`.
pub fn rate_adapt_step(st: &RateAdaptState, q_t: f64) -> RateAdaptState {
    let gamma_t = st.gamma0 / st.t.max(1) as f64;
    RateAdaptState {
        r_t_bps: (st.floor_bps()).max((1.0 - gamma_t * q_t) * st.r_t_bps),
        t: st.t.max(1) + 1,
        ..*st
    }
}

/// Steady-state rate `R_max(1 − γ·q̄)` for a caller-supplied gain.
pub fn rate_adapt_fixed_point(r_max: f64, gamma: f64, q_bar: f64) -> f64 {
    r_max * (1.0 - gamma * q_bar)
}

/// Mean-square error bound `γ0·R_max²·Var(q)/(2 − γ0)`.
pub fn rate_adapt_mse_bound(
    gamma0: f64,
    r_max: f64,
    var_q: f64,
) -> Result<f64, entropy::EntropyError> {
    if !(gamma0 > 0.0 && gamma0 < 2.0) {
        return Err(entropy::EntropyError::Domain {
            name: "gamma0",
            value: gamma0,
            domain: "(0, 2)",
        });
    }
    Ok(gamma0 * r_max * r_max * var_q / (2.0 - gamma0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RateAdapt,
    Fixed,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::RateAdapt => "rate_adapt",
            Self::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub strategy: Strategy,
    pub window_ms: u64,
    /// Target rate of the fixed strategy.
    pub fixed_rate_bps: f64,
    pub epsilon: f64,
}

impl ControllerConfig {
    pub fn rate_adapt(window_ms: u64) -> Self {
        Self {
            strategy: Strategy::RateAdapt,
            window_ms,
            fixed_rate_bps: f64::NAN,
            epsilon: entropy::DEFAULT_EPSILON,
        }
    }

    pub fn fixed(rate_bps: f64) -> Self {
        Self {
            strategy: Strategy::Fixed,
            window_ms: 1,
            fixed_rate_bps: rate_bps,
            epsilon: entropy::DEFAULT_EPSILON,
        }
    }
}

/// One 1 ms interval of a controller run. Bit counts are per interval except
/// `dropped_bits`, which is cumulative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSample {
    pub t_ms: u64,
    pub qber: f64,
    pub target_bits: u64,
    pub capacity_bits: u64,
    pub output_bits: u64,
    pub dropped_bits: u64,
    /// Raw-rate setpoint in force during the interval.
    pub setpoint_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRun {
    pub strategy: Strategy,
    pub samples: Vec<ControllerSample>,
}

impl ControllerRun {
    /// Fraction of intervals in which the target exceeded secure capacity.
    pub fn cap_exceed_fraction(&self) -> f64 {
        let n = self
            .samples
            .iter()
            .filter(|s| s.target_bits > s.capacity_bits)
            .count();
        n as f64 / self.samples.len().max(1) as f64
    }

    pub fn dropped_bits(&self) -> u64 {
        self.samples.last().map(|s| s.dropped_bits).unwrap_or(0)
    }

    /// Delivered rates in bit/s, one per interval.
    pub fn output_rates_bps(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.output_bits as f64 * 1000.0)
            .collect()
    }

    pub fn min_setpoint_bps(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.setpoint_bps)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Runs one strategy over a QBER trace at 1 ms resolution.
///
/// Secure capacity of each interval is the extractor output for
/// `⌊R_max/1000⌋` raw bits at that interval's QBER. Rate-Adapt targets the
/// extractor output of its own setpoint `R_t`, which is updated once per
/// `window_ms` with the window-mean QBER. The fixed strategy targets
/// `⌊fixed_rate/1000⌋` bits regardless of the channel. Output is clipped to
/// capacity in both cases and the excess is counted as dropped.
pub fn run_rate_controller(
    trace: &QberTrace,
    st0: &RateAdaptState,
    cfg: &ControllerConfig,
) -> ControllerRun {
    assert!(!trace.is_empty(), "empty QBER trace");
    let window = cfg.window_ms.max(1) as usize;
    let n_cap = (st0.r_max_bps / 1000.0).floor() as u64;
    let mut st = *st0;
    let mut dropped = 0u64;
    let mut samples = Vec::with_capacity(trace.len());

    for (i, &q) in trace.samples.iter().enumerate() {
        if cfg.strategy == Strategy::RateAdapt && i > 0 && i % window == 0 {
            let w = &trace.samples[i - window..i];
            st = rate_adapt_step(&st, w.iter().sum::<f64>() / w.len() as f64);
        }
        let capacity = secure_bits(n_cap, q, cfg.epsilon);
        let (target, setpoint) = match cfg.strategy {
            Strategy::RateAdapt => (
                secure_bits((st.r_t_bps / 1000.0).floor() as u64, q, cfg.epsilon),
                st.r_t_bps,
            ),
            Strategy::Fixed => (
                (cfg.fixed_rate_bps / 1000.0).floor() as u64,
                cfg.fixed_rate_bps,
            ),
        };
        dropped += target.saturating_sub(capacity);
        samples.push(ControllerSample {
            t_ms: i as u64,
            qber: q,
            target_bits: target,
            capacity_bits: capacity,
            output_bits: target.min(capacity),
            dropped_bits: dropped,
            setpoint_bps: setpoint,
        });
    }
    ControllerRun {
        strategy: cfg.strategy,
        samples,
    }
}

fn secure_bits(n: u64, q: f64, epsilon: f64) -> u64 {
    if n == 0 {
        return 0;
    }
    entropy::extractable_length(&EntropyParams { n, q, epsilon })
}
