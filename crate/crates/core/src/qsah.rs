//! Quantum Symmetric Authenticated Handshake.
//!
//! ```text
//! C → S : n_c ∥ GMAC_K(n_c)
//! S → C : n_s ∥ GMAC_K(n_s ∥ n_c)
//! K_sess = HKDF-SHA256(salt = ∅, ikm = K ∥ n_c ∥ n_s, info = "Q-EnergyDEX")
//! ```
//!
//! GMAC is AES-256-GCM over an empty plaintext with the message as associated
//! data. Its 96-bit IV is `index (4 bytes, BE) ∥ SHA-256("qsah-iv" ∥ data)[..8]`
//! where `index` is 1 for the first message and 2 for the second.

use std::collections::{HashMap, HashSet};
use std::io::Write;

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use hkdf::Hkdf;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::{LinkModel, NetEvent, Network, US_PER_MS};
use crate::qkms::{KeyId, KeyRecord, Kms, KmsConfig};
use crate::rng::{rng_from_seed, substream, SimRng};
use crate::stats::{Ecdf, EcdfPoint};

pub const KDF_INFO: &[u8; 11] = b"Q-EnergyDEX";
pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
pub const MESSAGE_LEN: usize = NONCE_LEN + TAG_LEN;
pub const KEY_BITS: u64 = 256;

pub type Nonce128 = [u8; NONCE_LEN];
pub type Tag = [u8; TAG_LEN];
pub type Key256 = [u8; 32];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QsahError {
    #[error("no shared key available")]
    NoKey,
    #[error("authentication failed")]
    AuthFail,
    #[error("replayed client nonce")]
    Replay,
    #[error("client and server nonces collide")]
    NonceCollision,
    #[error("malformed message of {0} bytes")]
    Malformed(usize),
    #[error("operation invalid in state {0:?}")]
    BadState(SessionState),
}

/// `GMAC_K(data)` with an explicit 96-bit IV.
pub fn gmac(key: &Key256, iv: &[u8; 12], data: &[u8]) -> Tag {
    let cipher = Aes256Gcm::new(key.into());
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(iv), data, &mut [])
        .expect("empty plaintext is within GCM limits");
    tag.into()
}

pub fn transcript_iv(index: u32, data: &[u8]) -> [u8; 12] {
    let mut h = Sha256::new();
    h.update(b"qsah-iv");
    h.update(data);
    let d = h.finalize();
    let mut iv = [0u8; 12];
    iv[..4].copy_from_slice(&index.to_be_bytes());
    iv[4..].copy_from_slice(&d[..8]);
    iv
}

fn mac_message(key: &Key256, index: u32, data: &[u8]) -> Tag {
    gmac(key, &transcript_iv(index, data), data)
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn derive_session_key(k: &Key256, n_c: &Nonce128, n_s: &Nonce128) -> Key256 {
    let mut ikm = [0u8; 64];
    ikm[..32].copy_from_slice(k);
    ikm[32..48].copy_from_slice(n_c);
    ikm[48..].copy_from_slice(n_s);
    let hk = Hkdf::<Sha256>::new(None, &ikm);
    let mut okm = [0u8; 32];
    hk.expand(KDF_INFO, &mut okm)
        .expect("32 bytes is a valid HKDF length");
    okm
}

/// `ε_mac + ε_kdf + ε_rnd`, capped at 1.
pub fn advantage_bound(eps_mac: f64, eps_kdf: f64, eps_rnd: f64) -> f64 {
    (eps_mac + eps_kdf + eps_rnd).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientHello {
    pub n_c: Nonce128,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerResponse {
    pub n_s: Nonce128,
    pub tag: Tag,
}

fn split(bytes: &[u8]) -> Result<(Nonce128, Tag), QsahError> {
    if bytes.len() != MESSAGE_LEN {
        return Err(QsahError::Malformed(bytes.len()));
    }
    let mut n = [0u8; NONCE_LEN];
    let mut t = [0u8; TAG_LEN];
    n.copy_from_slice(&bytes[..NONCE_LEN]);
    t.copy_from_slice(&bytes[NONCE_LEN..]);
    Ok((n, t))
}

fn join(n: &Nonce128, t: &Tag) -> [u8; MESSAGE_LEN] {
    let mut out = [0u8; MESSAGE_LEN];
    out[..NONCE_LEN].copy_from_slice(n);
    out[NONCE_LEN..].copy_from_slice(t);
    out
}

impl ClientHello {
    pub fn to_bytes(&self) -> [u8; MESSAGE_LEN] {
        join(&self.n_c, &self.tag)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, QsahError> {
        let (n_c, tag) = split(b)?;
        Ok(Self { n_c, tag })
    }
}

impl ServerResponse {
    pub fn to_bytes(&self) -> [u8; MESSAGE_LEN] {
        join(&self.n_s, &self.tag)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, QsahError> {
        let (n_s, tag) = split(b)?;
        Ok(Self { n_s, tag })
    }
}

/// A rented 256-bit key as seen by both peers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedKey {
    pub key_id: KeyId,
    pub key: Key256,
    pub expires_at_ms: u64,
}

impl SharedKey {
    /// `None` unless the record carries exactly 256 bits.
    pub fn from_record(r: &KeyRecord) -> Option<Self> {
        if r.bit_len != KEY_BITS {
            return None;
        }
        Some(Self {
            key_id: r.key_id,
            key: r.key_bits.as_slice().try_into().ok()?,
            expires_at_ms: r.expires_at_ms(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Init,
    Challenged,
    Established,
    Failed,
}

#[derive(Debug, Clone)]
pub struct HandshakeSession {
    key: Option<SharedKey>,
    n_c: Option<Nonce128>,
    n_s: Option<Nonce128>,
    session_key: Option<Key256>,
    state: SessionState,
    pub t_start_ms: f64,
    pub t_done_ms: Option<f64>,
}

impl HandshakeSession {
    /// Client-side session. `key` is `None` when the rent failed.
    pub fn new(key: Option<SharedKey>, t_start_ms: f64) -> Self {
        Self {
            key,
            n_c: None,
            n_s: None,
            session_key: None,
            state: SessionState::Init,
            t_start_ms,
            t_done_ms: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn key_id(&self) -> Option<KeyId> {
        self.key.as_ref().map(|k| k.key_id)
    }

    /// Defined only once established.
    pub fn session_key(&self) -> Option<&Key256> {
        self.session_key.as_ref()
    }

    pub fn n_c(&self) -> Option<&Nonce128> {
        self.n_c.as_ref()
    }

    pub fn client_hello<R: RngCore>(&mut self, rng: &mut R) -> Result<ClientHello, QsahError> {
        if self.state != SessionState::Init {
            return Err(QsahError::BadState(self.state));
        }
        let Some(key) = &self.key else {
            self.state = SessionState::Failed;
            return Err(QsahError::NoKey);
        };
        let mut n_c = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n_c);
        let tag = mac_message(&key.key, 1, &n_c);
        self.n_c = Some(n_c);
        self.state = SessionState::Challenged;
        Ok(ClientHello { n_c, tag })
    }

    pub fn client_finish(&mut self, msg2: &[u8], now_ms: f64) -> Result<&Key256, QsahError> {
        if self.state != SessionState::Challenged {
            return Err(QsahError::BadState(self.state));
        }
        let result = self.verify_response(msg2);
        match result {
            Ok((n_s, sk)) => {
                self.n_s = Some(n_s);
                self.session_key = Some(sk);
                self.state = SessionState::Established;
                self.t_done_ms = Some(now_ms);
                Ok(self.session_key.as_ref().expect("just set"))
            }
            Err(e) => {
                self.state = SessionState::Failed;
                Err(e)
            }
        }
    }

    fn verify_response(&self, msg2: &[u8]) -> Result<(Nonce128, Key256), QsahError> {
        let key = self.key.as_ref().ok_or(QsahError::NoKey)?;
        let n_c = self.n_c.expect("challenged sessions carry n_c");
        let resp = ServerResponse::from_bytes(msg2)?;
        let mut data = [0u8; 2 * NONCE_LEN];
        data[..NONCE_LEN].copy_from_slice(&resp.n_s);
        data[NONCE_LEN..].copy_from_slice(&n_c);
        if !ct_eq(&mac_message(&key.key, 2, &data), &resp.tag) {
            return Err(QsahError::AuthFail);
        }
        if resp.n_s == n_c {
            return Err(QsahError::NonceCollision);
        }
        Ok((resp.n_s, derive_session_key(&key.key, &n_c, &resp.n_s)))
    }
}

/// Seen client nonces per key, dropped once the key expires.
#[derive(Debug, Clone, Default)]
pub struct ReplayCache {
    seen: HashMap<KeyId, (u64, HashSet<Nonce128>)>,
}

impl ReplayCache {
    /// Records `n_c`; false if it was already present.
    pub fn check_and_insert(&mut self, key: &SharedKey, n_c: &Nonce128, now_ms: u64) -> bool {
        self.purge(now_ms);
        let entry = self
            .seen
            .entry(key.key_id)
            .or_insert_with(|| (key.expires_at_ms, HashSet::new()));
        entry.1.insert(*n_c)
    }

    pub fn purge(&mut self, now_ms: u64) {
        self.seen.retain(|_, (exp, _)| *exp > now_ms);
    }

    pub fn len(&self) -> usize {
        self.seen.values().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Server side of a completed exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerOutcome {
    pub response: ServerResponse,
    pub n_c: Nonce128,
    pub session_key: Key256,
    pub state: SessionState,
}

#[derive(Debug, Clone, Default)]
pub struct Server {
    replay: ReplayCache,
}

impl Server {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    /// Verifies message 1 and answers with message 2. The MAC is checked
    /// before the replay cache so forged hellos cannot fill it.
    pub fn server_response<R: RngCore>(
        &mut self,
        key: &SharedKey,
        msg1: &[u8],
        now_ms: u64,
        rng: &mut R,
    ) -> Result<ServerOutcome, QsahError> {
        let hello = ClientHello::from_bytes(msg1)?;
        if !ct_eq(&mac_message(&key.key, 1, &hello.n_c), &hello.tag) {
            return Err(QsahError::AuthFail);
        }
        if !self.replay.check_and_insert(key, &hello.n_c, now_ms) {
            return Err(QsahError::Replay);
        }
        let mut n_s = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n_s);
        if n_s == hello.n_c {
            return Err(QsahError::NonceCollision);
        }
        let mut data = [0u8; 2 * NONCE_LEN];
        data[..NONCE_LEN].copy_from_slice(&n_s);
        data[NONCE_LEN..].copy_from_slice(&hello.n_c);
        let tag = mac_message(&key.key, 2, &data);
        Ok(ServerOutcome {
            response: ServerResponse { n_s, tag },
            n_c: hello.n_c,
            session_key: derive_session_key(&key.key, &hello.n_c, &n_s),
            state: SessionState::Established,
        })
    }
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

/// Modelled TLS-style handshake: `round_trips` exchanges, each followed by a
/// lognormal compute cost at the responder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineHandshakeModel {
    pub round_trips: u32,
    pub compute_median_ms: f64,
    pub compute_sigma: f64,
}

impl Default for BaselineHandshakeModel {
    fn default() -> Self {
        Self {
            round_trips: 3,
            compute_median_ms: 2.0,
            compute_sigma: 0.5,
        }
    }
}

impl BaselineHandshakeModel {
    fn compute_dist(&self) -> LogNormal<f64> {
        LogNormal::new(self.compute_median_ms.ln(), self.compute_sigma)
            .expect("sigma is non-negative")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub n_handshakes: usize,
    pub batch_size: usize,
    pub link: LinkModel,
    pub baseline: BaselineHandshakeModel,
    /// Cost of one MAC/KDF step at either peer.
    pub mac_compute_ms: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_handshakes: 3000,
            batch_size: 500,
            link: LinkModel::default(),
            baseline: BaselineHandshakeModel::default(),
            mac_compute_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Qsah,
    BaselineLocal,
    BaselineRtt,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::Qsah,
        Scenario::BaselineLocal,
        Scenario::BaselineRtt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Qsah => "qsah",
            Scenario::BaselineLocal => "baseline_local",
            Scenario::BaselineRtt => "baseline_rtt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub qsah: Vec<f64>,
    pub baseline_local: Vec<f64>,
    pub baseline_rtt: Vec<f64>,
    /// Handshakes that failed to establish (rent failure or protocol error).
    pub qsah_failures: usize,
}

impl LatencyReport {
    pub fn latencies(&self, s: Scenario) -> &[f64] {
        match s {
            Scenario::Qsah => &self.qsah,
            Scenario::BaselineLocal => &self.baseline_local,
            Scenario::BaselineRtt => &self.baseline_rtt,
        }
    }

    pub fn ecdf(&self, s: Scenario) -> Ecdf {
        Ecdf::new(self.latencies(s))
    }

    pub fn ecdf_with_dkw(&self, s: Scenario, alpha: f64) -> Vec<EcdfPoint> {
        self.ecdf(s).with_dkw_band(alpha)
    }

    /// `scenario,handshake_idx,latency_ms`
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scenario,handshake_idx,latency_ms")?;
        for s in Scenario::ALL {
            for (i, l) in self.latencies(s).iter().enumerate() {
                writeln!(w, "{},{},{:.3}", s.name(), i, l)?;
            }
        }
        Ok(())
    }

    /// `scenario,latency_ms,ecdf,dkw_lo,dkw_hi`
    pub fn write_ecdf_csv<W: Write>(&self, mut w: W, alpha: f64) -> std::io::Result<()> {
        writeln!(w, "scenario,latency_ms,ecdf,dkw_lo,dkw_hi")?;
        for s in Scenario::ALL {
            if self.latencies(s).is_empty() {
                continue;
            }
            for p in self.ecdf_with_dkw(s, alpha) {
                writeln!(
                    w,
                    "{},{:.3},{:.6},{:.6},{:.6}",
                    s.name(),
                    p.x,
                    p.f,
                    p.lo,
                    p.hi
                )?;
            }
        }
        Ok(())
    }
}

const CLIENT: u32 = 0;
const SERVER: u32 = 1;

fn tagged(idx: usize, body: &[u8]) -> Vec<u8> {
    let mut v = (idx as u32).to_le_bytes().to_vec();
    v.extend_from_slice(body);
    v
}

fn untag(payload: &[u8]) -> (usize, &[u8]) {
    let idx = u32::from_le_bytes(payload[..4].try_into().expect("4-byte header")) as usize;
    (idx, &payload[4..])
}

fn us(ms: f64) -> u64 {
    (ms * US_PER_MS as f64).round() as u64
}

/// Q-SAH, baseline-with-RTT and baseline-local latencies.
///
/// Handshakes run in batches launched together at slot boundaries; a batch
/// starts once the previous one has drained. Q-SAH keys are rented from a
/// fresh KMS, so a handshake whose rent fails counts as a failure.
pub fn latency_benchmark(cfg: &BenchConfig, seed: u64) -> LatencyReport {
    assert!(cfg.n_handshakes >= 1 && cfg.batch_size >= 1);
    let (qsah, qsah_failures) = run_qsah(cfg, seed);
    let baseline_rtt = run_baseline_rtt(cfg, seed);
    let dist = cfg.baseline.compute_dist();
    let mut rng = rng_from_seed(substream(seed, "qsah-baseline-local"));
    let baseline_local = (0..cfg.n_handshakes)
        .map(|_| {
            let total: f64 = (0..cfg.baseline.round_trips)
                .map(|_| dist.sample(&mut rng))
                .sum();
            (total * 1000.0).round() / 1000.0
        })
        .collect();
    LatencyReport {
        qsah,
        baseline_local,
        baseline_rtt,
        qsah_failures,
    }
}

fn batches(cfg: &BenchConfig) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    (0..cfg.n_handshakes)
        .step_by(cfg.batch_size)
        .map(move |s| s..(s + cfg.batch_size).min(cfg.n_handshakes))
}

fn next_slot_start(net: &mut Network) -> u64 {
    let t = net.now_us().div_ceil(100 * US_PER_MS) * 100 * US_PER_MS;
    net.reset_clock(t);
    t
}

fn run_qsah(cfg: &BenchConfig, seed: u64) -> (Vec<f64>, usize) {
    let link = LinkModel {
        seed: substream(seed, "qsah-net"),
        ..cfg.link
    };
    let mut net = Network::with_nodes(link, 2);
    let mut rng: SimRng = rng_from_seed(substream(seed, "qsah-nonces"));
    let mut kms = Kms::new(KmsConfig::default(), substream(seed, "qsah-kms"));
    let compute = us(cfg.mac_compute_ms);
    let mut server = Server::new();
    let mut latencies = Vec::with_capacity(cfg.n_handshakes);
    let mut failures = 0;

    for batch in batches(cfg) {
        let t0 = next_slot_start(&mut net);
        let mut sessions = Vec::with_capacity(batch.len());
        let mut keys = Vec::with_capacity(batch.len());
        for idx in batch.clone() {
            let key = kms
                .rent(KEY_BITS, t0 / US_PER_MS, &format!("hs-{idx}"))
                .ok()
                .and_then(|r| KeyId::from_hex(&r.key_id))
                .and_then(|id| kms.key(&id).and_then(SharedKey::from_record));
            let mut s = HandshakeSession::new(key.clone(), t0 as f64 / 1000.0);
            match s.client_hello(&mut rng) {
                Ok(hello) => {
                    net.send(
                        CLIENT,
                        SERVER,
                        "qsah1",
                        tagged(idx - batch.start, &hello.to_bytes()),
                    )
                    .expect("registered nodes");
                }
                Err(_) => failures += 1,
            }
            sessions.push(s);
            keys.push(key);
        }
        while net.in_flight() > 0 {
            let Some(ev) = net.next_event(u64::MAX) else {
                break;
            };
            let NetEvent::Deliver(m) = ev else { continue };
            let (i, body) = untag(&m.payload);
            match m.dst {
                SERVER => {
                    let key = keys[i].as_ref().expect("hello implies a key");
                    match server.server_response(key, body, net.now_us() / US_PER_MS, &mut rng) {
                        Ok(out) => {
                            net.send_after(
                                compute,
                                SERVER,
                                CLIENT,
                                "qsah2",
                                tagged(i, &out.response.to_bytes()),
                            )
                            .expect("registered nodes");
                        }
                        Err(_) => failures += 1,
                    }
                }
                _ => {
                    let done = (net.now_us() + compute) as f64 / 1000.0;
                    match sessions[i].client_finish(body, done) {
                        Ok(_) => latencies.push(done - sessions[i].t_start_ms),
                        Err(_) => failures += 1,
                    }
                }
            }
        }
    }
    (latencies, failures)
}

fn run_baseline_rtt(cfg: &BenchConfig, seed: u64) -> Vec<f64> {
    let link = LinkModel {
        seed: substream(seed, "baseline-net"),
        ..cfg.link
    };
    let mut net = Network::with_nodes(link, 2);
    let dist = cfg.baseline.compute_dist();
    let mut rng = rng_from_seed(substream(seed, "baseline-compute"));
    let mut latencies = vec![0.0; cfg.n_handshakes];

    for batch in batches(cfg) {
        let t0 = next_slot_start(&mut net);
        let mut remaining = vec![cfg.baseline.round_trips; batch.len()];
        for i in 0..batch.len() {
            net.send(CLIENT, SERVER, "base", tagged(i, &[]))
                .expect("registered nodes");
        }
        while net.in_flight() > 0 {
            let Some(ev) = net.next_event(u64::MAX) else {
                break;
            };
            let NetEvent::Deliver(m) = ev else { continue };
            let (i, _) = untag(&m.payload);
            if m.dst == SERVER {
                let work = us(dist.sample(&mut rng));
                net.send_after(work, SERVER, CLIENT, "base", tagged(i, &[]))
                    .expect("registered nodes");
            } else {
                remaining[i] -= 1;
                if remaining[i] == 0 {
                    latencies[batch.start + i] = (net.now_us() - t0) as f64 / 1000.0;
                } else {
                    net.send(CLIENT, SERVER, "base", tagged(i, &[]))
                        .expect("registered nodes");
                }
            }
        }
    }
    latencies
}

/// Draws `n` client nonces. Used to check the zero-collision expectation.
pub fn sample_client_nonces(n: usize, seed: u64) -> Vec<Nonce128> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let mut b = [0u8; NONCE_LEN];
            rng.fill(&mut b);
            b
        })
        .collect()
}
