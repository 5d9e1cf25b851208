//! PoR-Lite: VRF leader election seeded by KMS salt, weighted 2/3 voting,
//! and the finality analytics.
//!
//! Each height resolves to an outcome `X_t ∈ {+1, −1, 0}`: an honest block
//! confirmed, an unresolved adversarial fork, or an empty slot. The bounds
//! are
//!
//! ```text
//! Pr[fork survives t blocks]        ≤ exp(−2t(1−2α)²)
//! Pr[common-prefix violation at k]  ≤ exp(−2k(1−2α)²)
//! Pr[chain growth below (1−ε)(1−α)(1−β)t] ≤ exp(−λt),  λ = ε²(1−α)(1−β)/2
//! t_fin = ⌈bits·ln 2 / (2(1−2α)²)⌉
//! ```

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::{LinkModel, NetEvent, Network, NodeId, US_PER_MS};
use crate::qkms::{Kms, KmsConfig, KmsError};
use crate::rng::{rng_from_seed, substream};

/// Votes confirm a block once their weight reaches this fraction.
pub const CONFIRM_FRACTION: f64 = 2.0 / 3.0;
pub const SALT_BITS: u64 = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PorError {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("unknown validator {0}")]
    UnknownValidator(NodeId),
    #[error("salt rent failed: {0}")]
    Kms(#[from] KmsError),
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> PorError {
    PorError::Domain {
        name,
        value,
        domain,
    }
}

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

pub fn finality_depth(alpha: f64, security_bits: u32) -> Result<u64, PorError> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(domain("alpha", alpha, "[0, 1/2)"));
    }
    let gap = 1.0 - 2.0 * alpha;
    Ok((security_bits as f64 * std::f64::consts::LN_2 / (2.0 * gap * gap)).ceil() as u64)
}

pub fn fork_tail_bound(alpha: f64, t: u64) -> f64 {
    let gap = 1.0 - 2.0 * alpha;
    (-2.0 * t as f64 * gap * gap).exp()
}

pub fn cp_violation_bound(alpha: f64, k: u64) -> f64 {
    fork_tail_bound(alpha, k)
}

pub fn growth_rate_lambda(alpha: f64, beta: f64, epsilon: f64) -> f64 {
    epsilon * epsilon * (1.0 - alpha) * (1.0 - beta) / 2.0
}

pub fn chain_growth_bound(alpha: f64, beta: f64, epsilon: f64, t: u64) -> f64 {
    (-growth_rate_lambda(alpha, beta, epsilon) * t as f64).exp()
}

/// Guaranteed growth `(1−ε)(1−α)(1−β)` per height.
pub fn growth_floor_rate(alpha: f64, beta: f64, epsilon: f64) -> f64 {
    (1.0 - epsilon) * (1.0 - alpha) * (1.0 - beta)
}

/// Combined finality depth: the common-prefix depth reaching the security
/// target, or the depth by which the growth floor guarantees one honest
/// block, whichever is larger.
pub fn weighted_finality_depth(p: &ConsensusParams) -> Result<u64, PorError> {
    let cp = finality_depth(p.alpha, p.security_bits)?;
    let growth = (1.0 / growth_floor_rate(p.alpha, p.beta, p.epsilon_growth)).ceil() as u64;
    Ok(cp.max(growth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon_growth: f64,
    /// Target fraction of heights with at least one leader.
    pub target_block_rate: f64,
    pub security_bits: u32,
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.10,
            epsilon_growth: 0.20,
            target_block_rate: 0.90,
            security_bits: 40,
        }
    }
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<(), PorError> {
        if !(0.0..1.0 / 3.0).contains(&self.alpha) {
            return Err(domain("alpha", self.alpha, "[0, 1/3)"));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("epsilon_growth", self.epsilon_growth),
            ("target_block_rate", self.target_block_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(domain(name, v, "[0, 1)"));
            }
        }
        Ok(())
    }

    /// Threshold giving an empty-slot probability of `β` with `n` validators:
    /// `(1 − h_q)^n = β`.
    pub fn calibrated_threshold(&self, n: u32) -> f64 {
        if self.beta <= 0.0 {
            return 1.0;
        }
        1.0 - self.beta.powf(1.0 / n as f64)
    }
}

// ---------------------------------------------------------------------------
// VRF and election
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VrfOutput {
    pub output: [u8; 32],
    pub proof: [u8; 32],
}

impl VrfOutput {
    /// First 64 output bits, big-endian.
    pub fn as_u64(&self) -> u64 {
        u64::from_be_bytes(self.output[..8].try_into().expect("32-byte output"))
    }

    /// Output mapped to `[0, 1)` with 53-bit resolution.
    pub fn normalized(&self) -> f64 {
        (self.as_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Hash-based VRF: `output = SHA-256(0x01 ∥ secret ∥ seed)`,
/// `proof = SHA-256(0x02 ∥ secret ∥ seed ∥ output)`.
pub fn vrf_evaluate(secret: &[u8; 32], seed: &[u8; 32]) -> VrfOutput {
    let output: [u8; 32] = Sha256::new()
        .chain_update([1u8])
        .chain_update(secret)
        .chain_update(seed)
        .finalize()
        .into();
    let proof: [u8; 32] = Sha256::new()
        .chain_update([2u8])
        .chain_update(secret)
        .chain_update(seed)
        .chain_update(output)
        .finalize()
        .into();
    VrfOutput { output, proof }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatorNode {
    pub node_id: NodeId,
    pub vrf_secret: [u8; 32],
    pub weight: f64,
    pub byzantine: bool,
}

/// Validators plus the key handles the simulator uses to verify VRF outputs.
#[derive(Debug, Clone)]
pub struct ValidatorSet {
    nodes: Vec<ValidatorNode>,
}

impl ValidatorSet {
    /// `n` validators; the last `f` are Byzantine with total weight `α`
    /// (`f = round(α·n)`, at least one when `α > 0`).
    pub fn new(n: u32, alpha: f64, seed: u64) -> Self {
        assert!(n >= 1);
        let f = if alpha > 0.0 {
            ((alpha * n as f64).round() as u32).clamp(1, n - 1)
        } else {
            0
        };
        let honest = n - f;
        let mut rng = rng_from_seed(seed);
        let nodes = (0..n)
            .map(|i| {
                let byzantine = i >= honest;
                let weight = if byzantine {
                    alpha / f as f64
                } else {
                    (1.0 - alpha) / honest as f64
                };
                let mut vrf_secret = [0u8; 32];
                rng.fill(&mut vrf_secret);
                ValidatorNode {
                    node_id: i,
                    vrf_secret,
                    weight,
                    byzantine,
                }
            })
            .collect();
        Self { nodes }
    }

    pub fn nodes(&self) -> &[ValidatorNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> Result<&ValidatorNode, PorError> {
        self.nodes
            .get(id as usize)
            .ok_or(PorError::UnknownValidator(id))
    }

    pub fn byzantine_weight(&self) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.byzantine)
            .map(|n| n.weight)
            .sum()
    }

    pub fn evaluate(&self, id: NodeId, seed: &[u8; 32]) -> Result<VrfOutput, PorError> {
        Ok(vrf_evaluate(&self.get(id)?.vrf_secret, seed))
    }

    pub fn verify(&self, id: NodeId, seed: &[u8; 32], out: &VrfOutput) -> Result<bool, PorError> {
        Ok(self.evaluate(id, seed)? == *out)
    }
}

/// `SHA-256(prev_header_hash ∥ salt)`.
pub fn election_seed(prev_header_hash: &[u8; 32], salt: &[u8; 16]) -> [u8; 32] {
    Sha256::new()
        .chain_update(prev_header_hash)
        .chain_update(salt)
        .finalize()
        .into()
}

/// Rents a 128-bit salt and derives the election seed from it.
pub fn election_seed_from_kms(
    prev_header_hash: &[u8; 32],
    kms: &mut Kms,
    now_ms: u64,
) -> Result<[u8; 32], PorError> {
    let resp = kms.rent(SALT_BITS, now_ms, "porlite-salt")?;
    let id = crate::qkms::KeyId::from_hex(&resp.key_id).expect("KMS emits valid ids");
    let record = kms.key(&id).expect("rented key is stored");
    let salt: [u8; 16] = record.key_bits.as_slice().try_into().expect("128-bit salt");
    Ok(election_seed(prev_header_hash, &salt))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub node: NodeId,
    pub vrf: VrfOutput,
    pub y: f64,
}

/// Validators whose normalised output falls below `h_q`, lowest first.
pub fn elect_leader(set: &ValidatorSet, seed: &[u8; 32], h_q: f64) -> Vec<Leader> {
    let mut leaders: Vec<Leader> = set
        .nodes()
        .iter()
        .map(|n| {
            let vrf = vrf_evaluate(&n.vrf_secret, seed);
            Leader {
                node: n.node_id,
                y: vrf.normalized(),
                vrf,
            }
        })
        .filter(|l| l.y < h_q)
        .collect();
    leaders.sort_by(|a, b| {
        a.vrf
            .as_u64()
            .cmp(&b.vrf.as_u64())
            .then(a.node.cmp(&b.node))
    });
    leaders
}

pub const H_MIN: f64 = 1e-6;
pub const H_MAX: f64 = 1.0;
const RATE_FLOOR: f64 = 1e-3;

/// `clamp(h_q · q / max(observed, δ), h_min, h_max)`.
pub fn adjust_threshold(h_q: f64, observed_rate: f64, target_rate: f64) -> f64 {
    (h_q * target_rate / observed_rate.max(RATE_FLOOR)).clamp(H_MIN, H_MAX)
}

/// Closed-loop threshold control: every `window` heights the fraction with
/// at least one leader is fed to [`adjust_threshold`]. Returns the per-window
/// observed rates.
pub fn threshold_control_loop(
    set: &ValidatorSet,
    target_rate: f64,
    h0: f64,
    heights: u64,
    window: u64,
    seed: u64,
) -> (Vec<f64>, f64) {
    let mut rng = rng_from_seed(seed);
    let mut h = h0;
    let mut rates = Vec::new();
    let mut hits = 0u64;
    for t in 1..=heights {
        let mut s = [0u8; 32];
        rng.fill(&mut s);
        if !elect_leader(set, &s, h).is_empty() {
            hits += 1;
        }
        if t % window == 0 {
            let r = hits as f64 / window as f64;
            rates.push(r);
            h = adjust_threshold(h, r, target_rate);
            hits = 0;
        }
    }
    (rates, h)
}

/// `weight ≥ 2/3`.
pub fn is_confirmed(weight: f64) -> bool {
    weight >= CONFIRM_FRACTION
}

// ---------------------------------------------------------------------------
// Chain simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ByzantineStrategy {
    /// Propose nothing, vote for nothing.
    Withhold,
    /// Send conflicting blocks to the two halves of the honest set and vote
    /// for both.
    #[default]
    Equivocate,
    /// Release the block late so it straddles the honest voting deadline.
    PrivateFork,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Full message-level simulation over netsim.
    #[default]
    Network,
    /// Independent outcomes: 0 w.p. β, else −1 w.p. α, else +1.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub params: ConsensusParams,
    pub mode: SimMode,
    pub validators: u32,
    pub strategy: ByzantineStrategy,
    pub link: LinkModel,
    pub processing_ms: f64,
    /// Relay hops the proposal and vote windows are sized for.
    pub gossip_hops: u32,
    /// Fixed height duration in Bernoulli mode.
    pub block_interval_ms: f64,
    /// Election threshold; calibrated from `β` when absent.
    pub h_q: Option<f64>,
    /// Window (in heights) for threshold self-adjustment; 0 disables it.
    pub adjust_window: u64,
    pub kms: KmsConfig,
    pub max_depth: u64,
    pub growth_horizons: Vec<u64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            params: ConsensusParams::default(),
            mode: SimMode::Network,
            validators: 16,
            strategy: ByzantineStrategy::Equivocate,
            link: LinkModel::default(),
            processing_ms: 1.0,
            gossip_hops: 2,
            block_interval_ms: 65.0,
            h_q: None,
            adjust_window: 0,
            kms: KmsConfig::default(),
            max_depth: 100,
            growth_horizons: vec![1, 2, 5, 10, 20, 50, 100, 150, 200, 300, 400, 500],
        }
    }
}

impl ChainConfig {
    /// Per-phase window: `hops · (max one-way delay + processing)`.
    pub fn phase_window_us(&self) -> u64 {
        let one_way = self.link.d0_ms / 2.0 + self.link.jitter_max_ms / 2.0;
        ((one_way + self.processing_ms) * self.gossip_hops as f64 * US_PER_MS as f64).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub outcomes: Vec<i8>,
    /// Duration of each height.
    pub height_ms: Vec<f64>,
    /// Heights where honest nodes confirmed conflicting blocks.
    pub safety_violations: u64,
    /// Heights skipped because the salt rent failed.
    pub stalls: u64,
    pub leaders: u64,
    pub final_h_q: f64,
}

impl ChainTrace {
    pub fn mean_block_interval_ms(&self) -> f64 {
        self.height_ms.iter().sum::<f64>() / self.height_ms.len().max(1) as f64
    }

    pub fn count(&self, x: i8) -> usize {
        self.outcomes.iter().filter(|&&o| o == x).count()
    }
}

pub fn simulate_chain(cfg: &ChainConfig, horizon: u64, seed: u64) -> Result<ChainTrace, PorError> {
    cfg.params.validate()?;
    if horizon == 0 {
        return Err(domain("horizon", 0.0, ">= 1"));
    }
    match cfg.mode {
        SimMode::Bernoulli => Ok(simulate_bernoulli(cfg, horizon, seed)),
        SimMode::Network => Ok(simulate_network(cfg, horizon, seed)),
    }
}

fn simulate_bernoulli(cfg: &ChainConfig, horizon: u64, seed: u64) -> ChainTrace {
    let mut rng = rng_from_seed(substream(seed, "porlite-bernoulli"));
    let p = &cfg.params;
    let outcomes = (0..horizon)
        .map(|_| {
            if rng.random::<f64>() < p.beta {
                0
            } else if rng.random::<f64>() < p.alpha {
                -1
            } else {
                1
            }
        })
        .collect::<Vec<i8>>();
    let leaders = outcomes.iter().filter(|&&o| o != 0).count() as u64;
    ChainTrace {
        height_ms: vec![cfg.block_interval_ms; horizon as usize],
        outcomes,
        safety_violations: 0,
        stalls: 0,
        leaders,
        final_h_q: cfg.h_q.unwrap_or(f64::NAN),
    }
}

const PROPOSE: &str = "propose";
const VOTE: &str = "vote";

fn block_id(seed: &[u8; 32], leader: NodeId, variant: u8) -> u64 {
    let d = Sha256::new()
        .chain_update(seed)
        .chain_update(leader.to_le_bytes())
        .chain_update([variant])
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest"))
}

fn encode(block: u64, rank: u64) -> Vec<u8> {
    let mut v = block.to_le_bytes().to_vec();
    v.extend_from_slice(&rank.to_le_bytes());
    v
}

fn decode(p: &[u8]) -> (u64, u64) {
    (
        u64::from_le_bytes(p[..8].try_into().expect("16-byte payload")),
        u64::from_le_bytes(p[8..16].try_into().expect("16-byte payload")),
    )
}

#[derive(Default, Clone)]
struct NodeView {
    /// Lowest-ranked block seen so far (rank, block); first arrival wins ties.
    best: Option<(u64, u64)>,
    tally: Vec<(u64, f64)>,
    confirmed: Option<u64>,
}

impl NodeView {
    fn reset(&mut self) {
        self.best = None;
        self.tally.clear();
        self.confirmed = None;
    }

    fn see(&mut self, block: u64, rank: u64) {
        if self.best.is_none_or(|(r, _)| rank < r) {
            self.best = Some((rank, block));
        }
    }

    fn add_vote(&mut self, block: u64, w: f64) {
        let slot = match self.tally.iter_mut().find(|(b, _)| *b == block) {
            Some(s) => s,
            None => {
                self.tally.push((block, 0.0));
                self.tally.last_mut().expect("just pushed")
            }
        };
        slot.1 += w;
        if self.confirmed.is_none() && is_confirmed(slot.1) {
            self.confirmed = Some(block);
        }
    }
}

fn simulate_network(cfg: &ChainConfig, horizon: u64, seed: u64) -> ChainTrace {
    let n = cfg.validators;
    let set = ValidatorSet::new(n, cfg.params.alpha, substream(seed, "porlite-vrf"));
    let link = LinkModel {
        seed: substream(seed, "porlite-net"),
        ..cfg.link
    };
    let mut net = Network::with_nodes(link, n);
    net.set_processing_ms(cfg.processing_ms);
    let proc = net.processing_us();
    let mut kms = Kms::new(cfg.kms.clone(), substream(seed, "porlite-kms"));
    let window = cfg.phase_window_us();
    let honest: Vec<NodeId> = set
        .nodes()
        .iter()
        .filter(|v| !v.byzantine)
        .map(|v| v.node_id)
        .collect();
    let weights: Vec<f64> = set.nodes().iter().map(|v| v.weight).collect();

    let mut h_q = cfg
        .h_q
        .unwrap_or_else(|| cfg.params.calibrated_threshold(n));
    let mut views = vec![NodeView::default(); n as usize];
    let mut prev = [0u8; 32];
    let mut trace = ChainTrace {
        outcomes: Vec::with_capacity(horizon as usize),
        height_ms: Vec::with_capacity(horizon as usize),
        safety_violations: 0,
        stalls: 0,
        leaders: 0,
        final_h_q: h_q,
    };
    let mut window_hits = 0u64;

    for height in 0..horizon {
        let t0 = net.now_us();
        let vote_at = t0 + proc + window;
        let deadline = vote_at + proc + window;
        views.iter_mut().for_each(NodeView::reset);

        let seed_t = match election_seed_from_kms(&prev, &mut kms, t0 / US_PER_MS) {
            Ok(s) => s,
            Err(_) => {
                trace.stalls += 1;
                trace.outcomes.push(0);
                trace.height_ms.push((deadline - t0) as f64 / 1000.0);
                net.reset_clock(deadline + proc);
                prev = Sha256::new()
                    .chain_update(prev)
                    .chain_update(height.to_le_bytes())
                    .finalize()
                    .into();
                continue;
            }
        };
        let leaders = elect_leader(&set, &seed_t, h_q);
        trace.leaders += leaders.len() as u64;
        if !leaders.is_empty() {
            window_hits += 1;
        }

        // proposals
        let mut byz_blocks: Vec<(NodeId, u64, u64)> = Vec::new();
        let mut proposed = false;
        for l in &leaders {
            let rank = l.vrf.as_u64();
            if !set.nodes()[l.node as usize].byzantine {
                let b = block_id(&seed_t, l.node, 0);
                views[l.node as usize].see(b, rank);
                for dst in 0..n {
                    if dst != l.node {
                        net.send_after(proc, l.node, dst, PROPOSE, encode(b, rank))
                            .expect("node");
                    }
                }
                proposed = true;
                continue;
            }
            match cfg.strategy {
                ByzantineStrategy::Withhold => {}
                ByzantineStrategy::Equivocate => {
                    let (a, b) = (block_id(&seed_t, l.node, 0), block_id(&seed_t, l.node, 1));
                    byz_blocks.push((l.node, a, b));
                    for (i, &dst) in honest.iter().enumerate() {
                        let blk = if i % 2 == 0 { a } else { b };
                        net.send_after(proc, l.node, dst, PROPOSE, encode(blk, rank))
                            .expect("node");
                    }
                    proposed = true;
                }
                ByzantineStrategy::PrivateFork => {
                    let a = block_id(&seed_t, l.node, 0);
                    byz_blocks.push((l.node, a, a));
                    // arrival lands within ±ε/4 of the vote deadline
                    let release = (window + proc).saturating_sub(
                        (cfg.link.d0_ms / 2.0 + cfg.link.jitter_max_ms / 4.0) as u64 * US_PER_MS,
                    );
                    for &dst in &honest {
                        net.send_after(release, l.node, dst, PROPOSE, encode(a, rank))
                            .expect("node");
                    }
                    proposed = true;
                }
            }
        }

        // proposal phase
        while let Some(ev) = net.next_event(vote_at) {
            if let NetEvent::Deliver(m) = ev {
                if m.kind == PROPOSE {
                    let (b, r) = decode(&m.payload);
                    views[m.dst as usize].see(b, r);
                }
            }
        }
        net.advance_to(vote_at);

        // voting
        for &v in &honest {
            if let Some((_, b)) = views[v as usize].best {
                views[v as usize].add_vote(b, weights[v as usize]);
                for dst in 0..n {
                    if dst != v {
                        net.send_after(proc, v, dst, VOTE, encode(b, 0))
                            .expect("node");
                    }
                }
            }
        }
        if cfg.strategy == ByzantineStrategy::Equivocate {
            for &(byz, a, b) in &byz_blocks {
                for blk in [a, b] {
                    for &dst in &honest {
                        net.send_after(proc, byz, dst, VOTE, encode(blk, 0))
                            .expect("node");
                    }
                }
            }
        }

        let mut end = deadline;
        let all_confirmed = |views: &[NodeView]| {
            honest
                .iter()
                .all(|&v| views[v as usize].confirmed.is_some())
        };
        if !all_confirmed(&views) {
            while let Some(ev) = net.next_event(deadline) {
                if let NetEvent::Deliver(m) = ev {
                    match m.kind {
                        VOTE => {
                            let (b, _) = decode(&m.payload);
                            views[m.dst as usize].add_vote(b, weights[m.src as usize]);
                        }
                        // a late proposal can no longer change this node's vote
                        _ => {}
                    }
                }
                if all_confirmed(&views) {
                    end = net.now_us();
                    break;
                }
            }
        } else {
            end = vote_at;
        }

        let confirmed: Vec<u64> = honest
            .iter()
            .filter_map(|&v| views[v as usize].confirmed)
            .collect();
        let outcome = match confirmed.first() {
            Some(&first) if confirmed.iter().all(|&b| b == first) => {
                prev = Sha256::new()
                    .chain_update(prev)
                    .chain_update(first.to_le_bytes())
                    .finalize()
                    .into();
                1
            }
            Some(_) => {
                trace.safety_violations += 1;
                -1
            }
            None if proposed => -1,
            None => 0,
        };
        if outcome != 1 {
            prev = Sha256::new()
                .chain_update(prev)
                .chain_update(height.to_le_bytes())
                .finalize()
                .into();
        }
        trace.outcomes.push(outcome);
        trace.height_ms.push((end - t0) as f64 / 1000.0);
        net.reset_clock(end + proc);

        if cfg.adjust_window > 0 && (height + 1) % cfg.adjust_window == 0 {
            let r = window_hits as f64 / cfg.adjust_window as f64;
            h_q = adjust_threshold(h_q, r, cfg.params.target_block_rate);
            window_hits = 0;
        }
    }
    trace.final_h_q = h_q;
    trace
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Event counts and the number of positions at which each event could occur,
/// so ensembles merge by addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub fork_tail: Vec<(u64, u64)>,
    pub cp_violation: Vec<(u64, u64)>,
    pub growth_horizons: Vec<u64>,
    pub growth_violation: Vec<(u64, u64)>,
    /// `finality_hist[d]` counts heights whose next `+1` is `d` heights away
    /// (1 when the height itself is confirmed).
    pub finality_hist: Vec<u64>,
}

/// One row of a bound comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub depth: u64,
    pub empirical: f64,
    pub bound: f64,
}

impl ChainMetrics {
    pub fn from_trace(
        trace: &ChainTrace,
        p: &ConsensusParams,
        max_depth: u64,
        growth_horizons: &[u64],
    ) -> Self {
        let x = &trace.outcomes;
        let len = x.len();
        let md = max_depth as usize;

        // next_plus[h] = smallest j >= h with x[j] = +1, or len
        let mut next_plus = vec![len; len + 1];
        for h in (0..len).rev() {
            next_plus[h] = if x[h] == 1 { h } else { next_plus[h + 1] };
        }

        let mut fork = vec![0u64; md + 1];
        let mut finality_hist = vec![0u64; md + 2];
        for h in 0..len {
            if next_plus[h] < len {
                let d = (next_plus[h] - h + 1).min(md + 1);
                finality_hist[d] += 1;
            }
            if x[h] == -1 {
                // no +1 in h+1 ..= h+d−1  ⇔  next_plus[h+1] ≥ h + d
                let reach = next_plus[h + 1] - h;
                for d in 1..=reach.min(len - h).min(md) {
                    fork[d] += 1;
                }
            }
        }

        let mut cp = vec![0u64; md + 1];
        let mut run = 0usize;
        for &o in x {
            run = if o == -1 { run + 1 } else { 0 };
            for k in 1..=run.min(md) {
                cp[k] += 1;
            }
        }

        let mut prefix = vec![0u64; len + 1];
        for (h, &o) in x.iter().enumerate() {
            prefix[h + 1] = prefix[h] + (o == 1) as u64;
        }
        let floor_rate = growth_floor_rate(p.alpha, p.beta, p.epsilon_growth);
        let growth_violation = growth_horizons
            .iter()
            .map(|&t| {
                let t = t as usize;
                if t == 0 || t > len {
                    return (0, 0);
                }
                let floor = floor_rate * t as f64;
                let v = (0..=len - t)
                    .filter(|&s| ((prefix[s + t] - prefix[s]) as f64) < floor)
                    .count();
                (v as u64, (len - t + 1) as u64)
            })
            .collect();

        let windows = |d: usize| len.saturating_sub(d - 1) as u64;
        Self {
            alpha: p.alpha,
            beta: p.beta,
            epsilon: p.epsilon_growth,
            fork_tail: (1..=md).map(|d| (fork[d], windows(d))).collect(),
            cp_violation: (1..=md).map(|k| (cp[k], windows(k))).collect(),
            growth_horizons: growth_horizons.to_vec(),
            growth_violation,
            finality_hist,
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        let add = |a: &[(u64, u64)], b: &[(u64, u64)]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x.0 + y.0, x.1 + y.1))
                .collect()
        };
        assert_eq!(self.growth_horizons, other.growth_horizons);
        Self {
            fork_tail: add(&self.fork_tail, &other.fork_tail),
            cp_violation: add(&self.cp_violation, &other.cp_violation),
            growth_violation: add(&self.growth_violation, &other.growth_violation),
            finality_hist: self
                .finality_hist
                .iter()
                .zip(&other.finality_hist)
                .map(|(a, b)| a + b)
                .collect(),
            ..self.clone()
        }
    }

    fn rows(
        counts: &[(u64, u64)],
        depths: impl Iterator<Item = u64>,
        bound: impl Fn(u64) -> f64,
    ) -> Vec<BoundRow> {
        counts
            .iter()
            .zip(depths)
            .map(|(&(c, n), depth)| BoundRow {
                depth,
                empirical: if n == 0 { 0.0 } else { c as f64 / n as f64 },
                bound: bound(depth),
            })
            .collect()
    }

    pub fn fork_tail_rows(&self) -> Vec<BoundRow> {
        Self::rows(&self.fork_tail, 1.., |d| fork_tail_bound(self.alpha, d))
    }

    pub fn cp_violation_rows(&self) -> Vec<BoundRow> {
        Self::rows(&self.cp_violation, 1.., |k| {
            cp_violation_bound(self.alpha, k)
        })
    }

    pub fn growth_violation_rows(&self) -> Vec<BoundRow> {
        Self::rows(
            &self.growth_violation,
            self.growth_horizons.iter().copied(),
            |t| chain_growth_bound(self.alpha, self.beta, self.epsilon, t),
        )
    }

    /// True when every empirical frequency is at or below its bound.
    pub fn bounds_hold(&self) -> bool {
        [
            self.fork_tail_rows(),
            self.cp_violation_rows(),
            self.growth_violation_rows(),
        ]
        .iter()
        .flatten()
        .all(|r| r.empirical <= r.bound)
    }
}

/// `depth,empirical,bound`
pub fn write_bound_csv<W: Write>(mut w: W, rows: &[BoundRow]) -> std::io::Result<()> {
    writeln!(w, "depth,empirical,bound")?;
    for r in rows {
        writeln!(w, "{},{:.6e},{:.6e}", r.depth, r.empirical, r.bound)?;
    }
    Ok(())
}

/// `depth,count`; the last row aggregates everything beyond `max_depth`.
pub fn write_finality_csv<W: Write>(mut w: W, hist: &[u64]) -> std::io::Result<()> {
    writeln!(w, "depth,count")?;
    for (d, c) in hist.iter().enumerate().skip(1) {
        writeln!(w, "{d},{c}")?;
    }
    Ok(())
}
