//! Scenario configuration.
//!
//! One TOML file with a section per module. Every field has a default, so an
//! empty file is a valid configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use qdex_core::entropy::TraceParams;
use qdex_core::market::SyntheticGrid;
use qdex_core::netsim::LinkModel;
use qdex_core::porlite::{ByzantineStrategy, ChainConfig, ConsensusParams, SimMode};
use qdex_core::qkms::KmsConfig;
use qdex_core::qsah::{BaselineHandshakeModel, BenchConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Length of the QBER trace in seconds.
    pub duration_s: f64,
    pub out: PathBuf,
    pub trace: TraceSection,
    pub kms: KmsSection,
    pub keypool: KeypoolSection,
    pub consensus: ConsensusSection,
    pub qsah: QsahSection,
    pub market: MarketSection,
    pub links: LinksSection,
    pub full_stack: FullStackSection,
    /// Run record written into manifests; ignored on load.
    #[serde(skip_serializing)]
    pub run: Option<toml::Value>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 60.0,
            out: PathBuf::from("out"),
            trace: TraceSection::default(),
            kms: KmsSection::default(),
            keypool: KeypoolSection::default(),
            consensus: ConsensusSection::default(),
            qsah: QsahSection::default(),
            market: MarketSection::default(),
            links: LinksSection::default(),
            full_stack: FullStackSection::default(),
            run: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub base_q: f64,
    pub noise_sigma: f64,
    pub pulses_per_minute: f64,
    pub pulse_amplitude: (f64, f64),
    pub pulse_fwhm_samples: (f64, f64),
}

impl Default for TraceSection {
    fn default() -> Self {
        let t = TraceParams::with_duration(60.0);
        Self {
            base_q: t.base_q,
            noise_sigma: t.noise_sigma,
            pulses_per_minute: t.pulse_count as f64,
            pulse_amplitude: t.pulse_amplitude,
            pulse_fwhm_samples: t.pulse_fwhm_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmsSection {
    pub r_max_bps: f64,
    pub gamma0: f64,
    pub window_ms: u64,
    pub fixed_rate_bps: f64,
    pub replicas: u8,
    pub capacity_bits: u64,
    pub baseline_qber: f64,
}

impl Default for KmsSection {
    fn default() -> Self {
        let k = KmsConfig::default();
        Self {
            r_max_bps: 5e6,
            gamma0: 0.5,
            window_ms: 100,
            fixed_rate_bps: 5e6,
            replicas: k.replicas,
            capacity_bits: k.capacity_bits,
            baseline_qber: k.baseline_qber,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeypoolSection {
    pub capacity: u64,
    pub rhos: Vec<f64>,
    /// Jumps simulated per load factor.
    pub events: u64,
    pub curve_target_pi0: f64,
    pub curve_rhos: Vec<f64>,
}

impl Default for KeypoolSection {
    fn default() -> Self {
        Self {
            capacity: 200,
            rhos: vec![0.9, 0.99, 0.999, 0.9999],
            events: 2_000_000,
            curve_target_pi0: 1e-6,
            curve_rhos: (0..=40).map(|i| 0.5 + 0.49 * i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSection {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon_growth: f64,
    pub target_block_rate: f64,
    pub security_bits: u32,
    pub validators: u32,
    pub strategy: ByzantineStrategy,
    pub mode: SimMode,
    pub gossip_hops: u32,
    pub block_interval_ms: f64,
    pub adjust_window: u64,
    pub max_depth: u64,
    pub growth_horizons: Vec<u64>,
    /// Ensemble size.
    pub seeds: u32,
    /// Heights per ensemble member.
    pub heights: u64,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        let p = ConsensusParams::default();
        let c = ChainConfig::default();
        Self {
            alpha: p.alpha,
            beta: p.beta,
            epsilon_growth: p.epsilon_growth,
            target_block_rate: p.target_block_rate,
            security_bits: p.security_bits,
            validators: c.validators,
            strategy: c.strategy,
            mode: c.mode,
            gossip_hops: c.gossip_hops,
            block_interval_ms: c.block_interval_ms,
            adjust_window: c.adjust_window,
            max_depth: c.max_depth,
            growth_horizons: c.growth_horizons,
            seeds: 30,
            heights: 3334,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QsahSection {
    pub n_handshakes: usize,
    pub batch_size: usize,
    pub mac_compute_ms: f64,
    pub baseline: BaselineHandshakeModel,
    /// Level of the DKW bands is `1 − dkw_alpha`.
    pub dkw_alpha: f64,
}

impl Default for QsahSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            n_handshakes: b.n_handshakes,
            batch_size: b.batch_size,
            mac_compute_ms: b.mac_compute_ms,
            baseline: b.baseline,
            dkw_alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketSection {
    pub grid: SyntheticGrid,
    pub datasets: u32,
    pub tol: f64,
    pub q_diag: f64,
    /// Key material one participant spends on its handshake.
    pub key_cost_bits: f64,
    pub handshake_deadline_ms: f64,
    /// The QKD key budget is the Rate-Adapt delivered rate over this window.
    pub key_window_s: f64,
    /// Largest relative welfare gap between the stacks the check accepts.
    pub welfare_tolerance: f64,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self {
            grid: SyntheticGrid::default(),
            datasets: 1,
            tol: qdex_core::market::DEFAULT_TOL,
            q_diag: 1.0,
            key_cost_bits: 256.0,
            handshake_deadline_ms: 1000.0,
            key_window_s: 1.0,
            welfare_tolerance: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksSection {
    pub d0_ms: f64,
    pub jitter_max_ms: f64,
    pub processing_ms: f64,
}

impl Default for LinksSection {
    fn default() -> Self {
        let l = LinkModel::default();
        Self {
            d0_ms: l.d0_ms,
            jitter_max_ms: l.jitter_max_ms,
            processing_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullStackSection {
    /// Participants; each runs one handshake and bids as one prosumer.
    pub nodes: usize,
    pub handshake_interval_ms: u64,
    pub heights: u64,
    pub lines: usize,
    pub buses: usize,
    /// Multiplies the Rate-Adapt delivered rate fed to the key pool.
    pub generation_scale: f64,
}

impl Default for FullStackSection {
    fn default() -> Self {
        Self {
            nodes: 64,
            handshake_interval_ms: 10,
            heights: 500,
            lines: 20,
            buses: 16,
            generation_scale: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(s: &str) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        // a manifest's [run] table describes the earlier run, not this one
        cfg.run = None;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut bad = Vec::new();
        let mut need = |ok: bool, what: &str| {
            if !ok {
                bad.push(what.to_string());
            }
        };
        need(self.duration_s > 0.0, "duration_s must be positive");
        need(
            (0.0..0.5).contains(&self.trace.base_q),
            "trace.base_q must lie in [0, 0.5)",
        );
        need(
            self.trace.noise_sigma >= 0.0,
            "trace.noise_sigma must be >= 0",
        );
        need(self.kms.r_max_bps > 0.0, "kms.r_max_bps must be positive");
        need(
            self.kms.gamma0 > 0.0 && self.kms.gamma0 < 2.0,
            "kms.gamma0 must lie in (0, 2)",
        );
        need(self.kms.window_ms > 0, "kms.window_ms must be positive");
        need(self.kms.replicas > 0, "kms.replicas must be positive");
        need(
            self.keypool.capacity > 0,
            "keypool.capacity must be positive",
        );
        need(
            self.keypool
                .rhos
                .iter()
                .chain(&self.keypool.curve_rhos)
                .all(|&r| r > 0.0 && r < 1.0),
            "keypool load factors must lie in (0, 1)",
        );
        need(self.keypool.events > 0, "keypool.events must be positive");
        need(
            self.keypool.curve_target_pi0 > 0.0 && self.keypool.curve_target_pi0 < 1.0,
            "keypool.curve_target_pi0 must lie in (0, 1)",
        );
        need(
            self.chain_config(0).params.validate().is_ok(),
            "consensus parameters out of range",
        );
        need(
            self.consensus.validators > 0,
            "consensus.validators must be positive",
        );
        need(self.consensus.seeds > 0, "consensus.seeds must be positive");
        need(
            self.consensus.heights > 0,
            "consensus.heights must be positive",
        );
        need(
            self.qsah.n_handshakes > 0 && self.qsah.batch_size > 0,
            "qsah sizes must be positive",
        );
        need(
            self.qsah.dkw_alpha > 0.0 && self.qsah.dkw_alpha < 1.0,
            "qsah.dkw_alpha must lie in (0, 1)",
        );
        need(
            self.market.grid.lines > 0 && self.market.grid.buses > 0,
            "market grid must have lines and buses",
        );
        need(self.market.datasets > 0, "market.datasets must be positive");
        need(self.market.tol > 0.0, "market.tol must be positive");
        need(self.market.q_diag > 0.0, "market.q_diag must be positive");
        need(self.links.d0_ms >= 0.0, "links.d0_ms must be >= 0");
        need(
            self.links.jitter_max_ms >= 0.0,
            "links.jitter_max_ms must be >= 0",
        );
        need(
            self.full_stack.lines > 0 && self.full_stack.buses > 0,
            "full_stack grid must have lines and buses",
        );
        need(
            self.full_stack.generation_scale >= 0.0,
            "full_stack.generation_scale must be >= 0",
        );
        if bad.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(bad.join("; ")))
        }
    }

    pub fn trace_params(&self) -> TraceParams {
        TraceParams {
            duration_s: self.duration_s,
            base_q: self.trace.base_q,
            noise_sigma: self.trace.noise_sigma,
            pulse_count: (self.trace.pulses_per_minute * self.duration_s / 60.0).round() as u32,
            pulse_amplitude: self.trace.pulse_amplitude,
            pulse_fwhm_samples: self.trace.pulse_fwhm_samples,
        }
    }

    pub fn link_model(&self, seed: u64) -> LinkModel {
        LinkModel {
            d0_ms: self.links.d0_ms,
            jitter_max_ms: self.links.jitter_max_ms,
            seed,
        }
    }

    /// Key pool fed at `gen_rate_bps`.
    pub fn kms_config(&self, gen_rate_bps: f64) -> KmsConfig {
        KmsConfig {
            replicas: self.kms.replicas,
            capacity_bits: self.kms.capacity_bits,
            gen_rate_bps,
            baseline_qber: self.kms.baseline_qber,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            n_handshakes: self.qsah.n_handshakes,
            batch_size: self.qsah.batch_size,
            link: self.link_model(0),
            baseline: self.qsah.baseline,
            mac_compute_ms: self.qsah.mac_compute_ms,
        }
    }

    pub fn chain_config(&self, link_seed: u64) -> ChainConfig {
        let c = &self.consensus;
        ChainConfig {
            params: ConsensusParams {
                alpha: c.alpha,
                beta: c.beta,
                epsilon_growth: c.epsilon_growth,
                target_block_rate: c.target_block_rate,
                security_bits: c.security_bits,
            },
            mode: c.mode,
            validators: c.validators,
            strategy: c.strategy,
            link: self.link_model(link_seed),
            processing_ms: self.links.processing_ms,
            gossip_hops: c.gossip_hops,
            block_interval_ms: c.block_interval_ms,
            h_q: None,
            adjust_window: c.adjust_window,
            kms: self.kms_config(self.kms.r_max_bps),
            max_depth: c.max_depth,
            growth_horizons: c.growth_horizons.clone(),
        }
    }
}
