//! The experiment runners behind the CLI verbs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use qdex_core::entropy::{generate_qber_trace, QberTrace};
use qdex_core::keypool::{
    exact_min_capacity, min_capacity, simulate_pool, stationary_distribution, BirthDeathParams,
    SimBudget,
};
use qdex_core::market::{
    sample_node_latencies, security_coupled_clearing, synthetic_instance, write_welfare_csv,
    Scenario as MarketScenario, SecurityStack, SyntheticGrid, WelfareRow,
};
use qdex_core::porlite::{
    finality_depth, simulate_chain, write_bound_csv, write_finality_csv, ChainMetrics, SALT_BITS,
};
use qdex_core::qkms::{
    run_rate_controller, ControllerConfig, ControllerRun, KeyId, Kms, RateAdaptState,
};
use qdex_core::qsah::{
    latency_benchmark, HandshakeSession, LatencyReport, Scenario as QsahScenario, Server,
    SharedKey, KEY_BITS,
};
use qdex_core::rng::{substream, substream_rng};
use qdex_core::stats::{dkw_halfwidth, quantiles_dominate, Ecdf};
use rayon::prelude::*;
use serde::Serialize;

use crate::{Artifacts, Check, CliError, ScenarioConfig};

fn csv(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("report serialises");
    s.push('\n');
    s.into_bytes()
}

/// `a / b` with `x/0 = +inf` for `x > 0` and `0/0 = 1`.
fn ratio(a: f64, b: f64) -> f64 {
    match (a, b) {
        (a, b) if b > 0.0 => a / b,
        (a, _) if a > 0.0 => f64::INFINITY,
        _ => 1.0,
    }
}

fn qber_trace(cfg: &ScenarioConfig) -> Result<QberTrace, CliError> {
    generate_qber_trace(&cfg.trace_params(), substream(cfg.seed, "trace"))
        .map_err(|e| CliError::run("entropy", e))
}

struct ControllerPair {
    rate_adapt: ControllerRun,
    fixed: ControllerRun,
}

fn controllers(cfg: &ScenarioConfig, trace: &QberTrace) -> ControllerPair {
    let st = RateAdaptState::new(cfg.kms.r_max_bps, cfg.kms.gamma0);
    ControllerPair {
        rate_adapt: run_rate_controller(
            trace,
            &st,
            &ControllerConfig::rate_adapt(cfg.kms.window_ms),
        ),
        fixed: run_rate_controller(trace, &st, &ControllerConfig::fixed(cfg.kms.fixed_rate_bps)),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// rate-adapt
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct StrategySummary {
    name: &'static str,
    cap_exceed_time: f64,
    dropped_bits: u64,
    mean_output_bps: f64,
    /// Fraction of intervals delivering at least 0.76·R_max.
    above_076_rmax: f64,
    min_setpoint_bps: f64,
}

#[derive(Serialize)]
struct RateAdaptSummary {
    r_max_bps: f64,
    samples: usize,
    strategies: Vec<StrategySummary>,
}

fn summarise(run: &ControllerRun, r_max: f64) -> StrategySummary {
    let rates = run.output_rates_bps();
    StrategySummary {
        name: run.strategy.name(),
        cap_exceed_time: run.cap_exceed_fraction(),
        dropped_bits: run.dropped_bits(),
        mean_output_bps: mean(&rates),
        above_076_rmax: rates.iter().filter(|&&r| r >= 0.76 * r_max).count() as f64
            / rates.len().max(1) as f64,
        min_setpoint_bps: run.min_setpoint_bps(),
    }
}

pub fn rate_adapt(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let trace = qber_trace(cfg)?;
    let runs = controllers(cfg, &trace);
    let (ra, fx) = (&runs.rate_adapt, &runs.fixed);
    let r_max = cfg.kms.r_max_bps;

    let mut ts = String::from(
        "t_ms,qber,capacity_bps,rate_adapt_setpoint_bps,rate_adapt_output_bps,fixed_output_bps\n",
    );
    for (a, b) in ra.samples.iter().zip(&fx.samples) {
        writeln!(
            ts,
            "{},{:.6},{},{:.3},{},{}",
            a.t_ms,
            a.qber,
            a.capacity_bits * 1000,
            a.setpoint_bps,
            a.output_bits * 1000,
            b.output_bits * 1000
        )
        .expect("string write");
    }

    let mut cdf = String::from("strategy,rate_bps,cdf\n");
    for run in [ra, fx] {
        for p in Ecdf::new(&run.output_rates_bps()).with_dkw_band(0.05) {
            writeln!(cdf, "{},{},{:.6}", run.strategy.name(), p.x, p.f).expect("string write");
        }
    }

    let summary = RateAdaptSummary {
        r_max_bps: r_max,
        samples: trace.len(),
        strategies: vec![summarise(ra, r_max), summarise(fx, r_max)],
    };
    let (sa, sf) = (&summary.strategies[0], &summary.strategies[1]);
    let cap_ratio = ratio(sf.cap_exceed_time, sa.cap_exceed_time);
    let drop_ratio = ratio(sf.dropped_bits as f64, sa.dropped_bits as f64);
    let checks = vec![
        Check::new(
            "rate_adapt cap-exceed <= 1e-4",
            sa.cap_exceed_time <= 1e-4,
            format!("{:e}", sa.cap_exceed_time),
        ),
        Check::new(
            "fixed cap-exceed >= 1e-2",
            sf.cap_exceed_time >= 1e-2,
            format!("{:e}", sf.cap_exceed_time),
        ),
        Check::new(
            "cap-exceed ratio fixed/rate_adapt >= 1e3",
            cap_ratio >= 1e3,
            format!("{cap_ratio:e}"),
        ),
        Check::new(
            "dropped-bit ratio fixed/rate_adapt >= 1e3",
            drop_ratio >= 1e3,
            format!(
                "{drop_ratio:e} ({} vs {})",
                sf.dropped_bits, sa.dropped_bits
            ),
        ),
        Check::new(
            "rate_adapt delivers >= 0.76 R_max for >= 90% of samples",
            sa.above_076_rmax >= 0.9,
            format!("{:.4}", sa.above_076_rmax),
        ),
        Check::new(
            "rate_adapt setpoint >= 0.1 R_max throughout",
            sa.min_setpoint_bps >= 0.1 * r_max,
            format!("min {:.1} bit/s", sa.min_setpoint_bps),
        ),
    ];
    Ok(Artifacts {
        files: vec![
            ("timeseries.csv".into(), ts.into_bytes()),
            ("cdf.csv".into(), cdf.into_bytes()),
            ("summary.json".into(), json(&summary)),
        ],
        checks,
    })
}

// ---------------------------------------------------------------------------
// qsah-bench
// ---------------------------------------------------------------------------

fn bench(cfg: &ScenarioConfig) -> LatencyReport {
    latency_benchmark(&cfg.bench_config(), substream(cfg.seed, "net"))
}

pub fn qsah_bench(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let report = bench(cfg);
    let alpha = cfg.qsah.dkw_alpha;
    let q = report.ecdf(QsahScenario::Qsah);
    let b = report.ecdf(QsahScenario::BaselineRtt);
    let n = report.qsah.len().max(1);
    let eps = dkw_halfwidth(n, alpha);
    let eps_hand = ((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt();
    let checks = vec![
        Check::new(
            "all Q-SAH handshakes establish",
            report.qsah_failures == 0 && report.qsah.len() == cfg.qsah.n_handshakes,
            format!(
                "{} established, {} failed",
                report.qsah.len(),
                report.qsah_failures
            ),
        ),
        Check::new(
            "median Q-SAH < median baseline+RTT",
            !q.is_empty() && q.median() < b.median(),
            format!("{:.3} ms vs {:.3} ms", q.median(), b.median()),
        ),
        Check::new(
            "Q-SAH ECDF dominates baseline+RTT at every quantile",
            !q.is_empty() && quantiles_dominate(&q, &b, 1000),
            "1000-point quantile grid",
        ),
        Check::new(
            "DKW half-width matches sqrt(ln(2/alpha)/(2n))",
            (eps - eps_hand).abs() <= 1e-12,
            format!("{eps:.6} at n = {n}"),
        ),
    ];
    Ok(Artifacts {
        files: vec![
            ("latencies.csv".into(), csv(|w| report.write_csv(w))),
            ("ecdf.csv".into(), csv(|w| report.write_ecdf_csv(w, alpha))),
        ],
        checks,
    })
}

// ---------------------------------------------------------------------------
// porlite
// ---------------------------------------------------------------------------

/// Chain metrics of ensemble member `i`.
pub fn porlite_member(cfg: &ScenarioConfig, i: u32) -> Result<ChainMetrics, CliError> {
    let chain = cfg.chain_config(substream(cfg.seed, &format!("net-{i}")));
    let trace = simulate_chain(
        &chain,
        cfg.consensus.heights,
        substream(cfg.seed, &format!("vrf-{i}")),
    )
    .map_err(|e| CliError::run("porlite", e))?;
    Ok(ChainMetrics::from_trace(
        &trace,
        &chain.params,
        chain.max_depth,
        &chain.growth_horizons,
    ))
}

pub fn porlite(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let members: Vec<ChainMetrics> = (0..cfg.consensus.seeds)
        .into_par_iter()
        .map(|i| porlite_member(cfg, i))
        .collect::<Result<_, _>>()?;
    let merged = members[1..]
        .iter()
        .fold(members[0].clone(), |acc, m| acc.merge(m));

    let failing: Vec<usize> = members
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.bounds_hold())
        .map(|(i, _)| i)
        .collect();
    let alpha = cfg.consensus.alpha;
    let t_fin = finality_depth(alpha, cfg.consensus.security_bits)
        .map_err(|e| CliError::run("porlite", e))?;
    let tail = merged.fork_tail_rows();
    let last_nonzero = tail
        .iter()
        .filter(|r| r.empirical > 0.0)
        .map(|r| r.depth)
        .max()
        .unwrap_or(0);
    let heights = cfg.consensus.heights * cfg.consensus.seeds as u64;
    let mut checks = vec![
        Check::new(
            "empirical frequencies <= bounds for every ensemble member",
            failing.is_empty(),
            format!("{} members, failing {:?}", members.len(), failing),
        ),
        Check::new(
            "pooled empirical frequencies <= bounds",
            merged.bounds_hold(),
            format!("{heights} heights"),
        ),
    ];
    if alpha == 0.25 && cfg.consensus.security_bits == 40 {
        checks.push(Check::new(
            "finality depth marker = 56",
            t_fin == 56,
            t_fin.to_string(),
        ));
    }
    if heights >= 100_000 {
        checks.push(Check::new(
            "fork tail reaches the Monte Carlo floor beyond depth 50",
            last_nonzero <= 50,
            format!("last nonzero depth {last_nonzero}"),
        ));
    }
    Ok(Artifacts {
        files: vec![
            (
                "finality_hist.csv".into(),
                csv(|w| write_finality_csv(w, &merged.finality_hist)),
            ),
            ("fork_tail.csv".into(), csv(|w| write_bound_csv(w, &tail))),
            (
                "cp_violation.csv".into(),
                csv(|w| write_bound_csv(w, &merged.cp_violation_rows())),
            ),
            (
                "growth_violation.csv".into(),
                csv(|w| write_bound_csv(w, &merged.growth_violation_rows())),
            ),
        ],
        checks,
    })
}

// ---------------------------------------------------------------------------
// keypool
// ---------------------------------------------------------------------------

/// Published theoretical `π_0` at `M = 200` with the relative tolerance it is
/// quoted to.
const REFERENCE_PI0: [(f64, f64, f64); 4] = [
    (0.9, 7.06e-11, 1e-2),
    (0.99, 1.545e-3, 5e-4),
    (0.999, 4.494e-3, 5e-4),
    (0.9999, 4.926e-3, 5e-4),
];

pub fn keypool(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let k = &cfg.keypool;
    let err = |e| CliError::run("keypool", e);
    let rows: Vec<(f64, f64, qdex_core::keypool::PoolSimResult)> = k
        .rhos
        .par_iter()
        .enumerate()
        .map(|(i, &rho)| {
            let p = BirthDeathParams::from_rho(rho, k.capacity).map_err(err)?;
            let theory = stationary_distribution(&p).pi0();
            let sim = simulate_pool(
                &p,
                SimBudget::Events(k.events),
                substream(cfg.seed, &format!("keypool-{i}")),
            )
            .map_err(err)?;
            Ok((rho, theory, sim))
        })
        .collect::<Result<_, CliError>>()?;

    let mut table = String::from("rho,capacity,theoretical,empirical,ci_lo,ci_hi\n");
    for (rho, theory, sim) in &rows {
        writeln!(
            table,
            "{rho},{},{theory:.6e},{:.6e},{:.6e},{:.6e}",
            k.capacity, sim.empty_fraction, sim.wilson_ci.lo, sim.wilson_ci.hi
        )
        .expect("string write");
    }

    let curve: Vec<(f64, u64, u64)> = k
        .curve_rhos
        .iter()
        .map(|&rho| {
            Ok((
                rho,
                min_capacity(rho, k.curve_target_pi0).map_err(err)?,
                exact_min_capacity(rho, k.curve_target_pi0).map_err(err)?,
            ))
        })
        .collect::<Result<_, CliError>>()?;
    let mut curve_csv = String::from("rho,min_capacity,exact_min_capacity\n");
    for (rho, m, e) in &curve {
        writeln!(curve_csv, "{rho},{m},{e}").expect("string write");
    }

    let mut checks = Vec::new();
    if k.capacity == 200 {
        for (rho, want, rel) in REFERENCE_PI0 {
            if let Some((_, got, _)) = rows.iter().find(|r| r.0 == rho) {
                checks.push(Check::new(
                    format!("theoretical pi0 at rho = {rho} matches {want:e}"),
                    (got - want).abs() <= rel * want,
                    format!("{got:.4e}"),
                ));
            }
        }
    }
    let caps: Vec<f64> = curve.iter().map(|c| c.1 as f64).collect();
    let increasing = caps.windows(2).all(|w| w[1] >= w[0]) && caps.first() < caps.last();
    // ceil() perturbs each point by less than one state
    let convex = caps.windows(3).all(|w| w[2] - 2.0 * w[1] + w[0] >= -2.0);
    checks.push(Check::new(
        "capacity curve is increasing in rho",
        increasing,
        format!("{} points", caps.len()),
    ));
    checks.push(Check::new(
        "capacity curve is convex up to rounding",
        convex,
        format!("{} points", caps.len()),
    ));
    Ok(Artifacts {
        files: vec![
            ("table2.csv".into(), table.into_bytes()),
            ("capacity_curve.csv".into(), curve_csv.into_bytes()),
        ],
        checks,
    })
}

// ---------------------------------------------------------------------------
// market
// ---------------------------------------------------------------------------

/// QKD stack budgeted from the Rate-Adapt delivered rate, and a baseline
/// stack with free keys.
fn security_stacks(cfg: &ScenarioConfig, delivered_bps: f64, suffix: &str) -> [SecurityStack; 2] {
    [
        SecurityStack {
            name: format!("qkd{suffix}"),
            key_budget_bits: delivered_bps * cfg.market.key_window_s,
            handshake_deadline_ms: cfg.market.handshake_deadline_ms,
            per_node_key_cost_bits: cfg.market.key_cost_bits,
        },
        SecurityStack {
            name: format!("baseline{suffix}"),
            key_budget_bits: f64::INFINITY,
            handshake_deadline_ms: cfg.market.handshake_deadline_ms,
            per_node_key_cost_bits: 0.0,
        },
    ]
}

pub fn market(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let trace = qber_trace(cfg)?;
    let delivered = mean(&controllers(cfg, &trace).rate_adapt.output_rates_bps());
    let report = bench(cfg);
    let grid = cfg.market.grid;
    let n = grid.prosumers;
    let many = cfg.market.datasets > 1;

    let datasets: Vec<Vec<WelfareRow>> = (0..cfg.market.datasets)
        .into_par_iter()
        .map(|k| {
            let mut inst = synthetic_instance(&grid, substream(cfg.seed, &format!("market-{k}")));
            inst.leader_cost.q_diag = cfg.market.q_diag;
            let pick = substream(cfg.seed, &format!("latency-{k}"));
            let lat = [
                sample_node_latencies(&report.qsah, n, pick),
                sample_node_latencies(&report.baseline_rtt, n, pick),
            ];
            let suffix = if many { format!("@{k}") } else { String::new() };
            security_stacks(cfg, delivered, &suffix)
                .iter()
                .zip(&lat)
                .flat_map(|(stack, l)| {
                    security_coupled_clearing(&inst, l, stack, cfg.market.tol).rows()
                })
                .collect()
        })
        .collect();
    let rows: Vec<WelfareRow> = datasets.iter().flatten().cloned().collect();

    let mut checks = Vec::new();
    let solved = rows.iter().all(|r| r.welfare.is_finite());
    checks.push(Check::new(
        "every scenario cell solved",
        solved,
        format!("{} cells", rows.len()),
    ));
    let tol = cfg.market.welfare_tolerance;
    let mut worst = 0.0f64;
    for ds in &datasets {
        let (qkd, base) = ds.split_at(MarketScenario::ALL.len());
        for (a, b) in qkd.iter().zip(base) {
            worst = worst.max((ratio(a.welfare, b.welfare) - 1.0).abs());
        }
    }
    checks.push(Check::new(
        format!("QKD vs baseline welfare within {tol} per cell"),
        solved && worst <= tol,
        format!("largest relative gap {worst:.3e}"),
    ));
    let mut dominated = true;
    for row in rows.chunks(MarketScenario::ALL.len()) {
        let social = row[0].welfare;
        debug_assert_eq!(row[0].scenario, MarketScenario::Social);
        dominated &= row[1..]
            .iter()
            .all(|r| social >= r.welfare - 1e-6 * (1.0 + r.welfare.abs()));
    }
    checks.push(Check::new(
        "SOCIAL dominates every scenario per row",
        solved && dominated,
        format!("{} rows", rows.len() / MarketScenario::ALL.len()),
    ));
    Ok(Artifacts {
        files: vec![(
            "welfare_grid.csv".into(),
            csv(|w| write_welfare_csv(w, &rows)),
        )],
        checks,
    })
}

// ---------------------------------------------------------------------------
// full-stack
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct EntropyReport {
    mean_delivered_bps: f64,
    generation_bps: f64,
    handshake_bits: u64,
    salt_bits: u64,
    bits_consumed: u64,
}

#[derive(Debug, Serialize)]
struct HandshakeReport {
    attempted: usize,
    established: usize,
    failed: usize,
}

#[derive(Debug, Serialize)]
struct ConsensusReport {
    heights: u64,
    confirmed: usize,
    forks: usize,
    empty: usize,
    stalls: u64,
    safety_violations: u64,
}

#[derive(Debug, Serialize)]
struct MarketReport {
    participants: usize,
    welfare: BTreeMap<&'static str, Option<f64>>,
}

#[derive(Debug, Serialize)]
struct ModuleError {
    module: &'static str,
    message: String,
}

#[derive(Debug, Serialize)]
struct PipelineReport {
    seed: u64,
    entropy: EntropyReport,
    handshakes: HandshakeReport,
    consensus: Option<ConsensusReport>,
    market: MarketReport,
    errors: Vec<ModuleError>,
}

/// One in-process Q-SAH exchange on a freshly rented key.
fn handshake(kms: &mut Kms, idx: usize, now_ms: u64, seed: u64) -> Result<(), String> {
    let rented = kms
        .rent(KEY_BITS, now_ms, &format!("node-{idx}"))
        .map_err(|e| e.to_string())?;
    let id = KeyId::from_hex(&rented.key_id).ok_or("malformed key id")?;
    let key = kms
        .key(&id)
        .and_then(SharedKey::from_record)
        .ok_or("rented key unavailable")?;
    let mut rng = substream_rng(seed, &format!("handshake-{idx}"));
    let mut client = HandshakeSession::new(Some(key.clone()), now_ms as f64);
    let hello = client.client_hello(&mut rng).map_err(|e| e.to_string())?;
    let out = Server::new()
        .server_response(&key, &hello.to_bytes(), now_ms, &mut rng)
        .map_err(|e| e.to_string())?;
    let sk = *client
        .client_finish(&out.response.to_bytes(), now_ms as f64)
        .map_err(|e| e.to_string())?;
    if sk == out.session_key {
        Ok(())
    } else {
        Err("session keys differ".into())
    }
}

pub fn full_stack(cfg: &ScenarioConfig) -> Result<Artifacts, CliError> {
    let fs = &cfg.full_stack;
    let mut errors = Vec::new();

    let trace = qber_trace(cfg)?;
    let delivered = mean(&controllers(cfg, &trace).rate_adapt.output_rates_bps());
    let generation = delivered * fs.generation_scale;

    // handshakes draw keys from a pool refilled at the delivered rate
    let mut kms = Kms::new(cfg.kms_config(generation), substream(cfg.seed, "kms"));
    let mut established = vec![false; fs.nodes];
    for (i, ok) in established.iter_mut().enumerate() {
        match handshake(&mut kms, i, i as u64 * fs.handshake_interval_ms, cfg.seed) {
            Ok(()) => *ok = true,
            Err(message) => errors.push(ModuleError {
                module: "qsah",
                message: format!("node {i}: {message}"),
            }),
        }
    }
    let n_ok = established.iter().filter(|&&x| x).count();

    // election salts come from a pool with the same generation rate
    let mut chain = cfg.chain_config(substream(cfg.seed, "net"));
    chain.kms = cfg.kms_config(generation);
    let consensus = match simulate_chain(&chain, fs.heights, substream(cfg.seed, "vrf")) {
        Ok(t) => Some(ConsensusReport {
            heights: fs.heights,
            confirmed: t.count(1),
            forks: t.count(-1),
            empty: t.count(0),
            stalls: t.stalls,
            safety_violations: t.safety_violations,
        }),
        Err(e) => {
            errors.push(ModuleError {
                module: "porlite",
                message: e.to_string(),
            });
            None
        }
    };
    let salt_bits = consensus
        .as_ref()
        .map_or(0, |c| (c.heights - c.stalls) * SALT_BITS);

    // nodes without a session key never reach the deadline
    let bench_cfg = qdex_core::qsah::BenchConfig {
        n_handshakes: fs.nodes.max(1),
        batch_size: fs.nodes.max(1),
        ..cfg.bench_config()
    };
    let bench = latency_benchmark(&bench_cfg, substream(cfg.seed, "net"));
    let latencies: Vec<f64> = established
        .iter()
        .enumerate()
        .map(|(i, &ok)| match (ok, bench.qsah.get(i)) {
            (true, Some(&l)) => l,
            _ => f64::INFINITY,
        })
        .collect();
    let grid = SyntheticGrid {
        lines: fs.lines,
        buses: fs.buses,
        prosumers: fs.nodes,
        ..SyntheticGrid::default()
    };
    let mut inst = synthetic_instance(&grid, substream(cfg.seed, "market"));
    inst.leader_cost.q_diag = cfg.market.q_diag;
    let [qkd, _] = security_stacks(cfg, generation, "");
    let clearing = security_coupled_clearing(&inst, &latencies, &qkd, cfg.market.tol);
    let mut welfare = BTreeMap::new();
    for (s, o) in MarketScenario::ALL.iter().zip(&clearing.outcomes) {
        match o {
            Ok(o) => {
                welfare.insert(s.name(), Some(o.welfare));
            }
            Err(e) => {
                welfare.insert(s.name(), None);
                errors.push(ModuleError {
                    module: "market",
                    message: format!("{}: {e}", s.name()),
                });
            }
        }
    }

    let handshake_bits = n_ok as u64 * KEY_BITS;
    let report = PipelineReport {
        seed: cfg.seed,
        entropy: EntropyReport {
            mean_delivered_bps: delivered,
            generation_bps: generation,
            handshake_bits,
            salt_bits,
            bits_consumed: handshake_bits + salt_bits,
        },
        handshakes: HandshakeReport {
            attempted: fs.nodes,
            established: n_ok,
            failed: fs.nodes - n_ok,
        },
        market: MarketReport {
            participants: clearing.admitted.len(),
            welfare,
        },
        consensus,
        errors,
    };

    let mut checks = vec![Check::new(
        "every module ran",
        report.consensus.is_some() && report.market.welfare.values().all(Option::is_some),
        format!("{} module errors", report.errors.len()),
    )];
    if let Some(c) = &report.consensus {
        checks.push(Check::new(
            "no conflicting confirmations",
            c.safety_violations == 0,
            c.safety_violations.to_string(),
        ));
        if cfg.consensus.alpha == 0.0 {
            checks.push(Check::new(
                "zero adversary gives zero forks",
                c.forks == 0,
                c.forks.to_string(),
            ));
        }
    }
    Ok(Artifacts {
        files: vec![("pipeline_report.json".into(), json(&report))],
        checks,
    })
}
