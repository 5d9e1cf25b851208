//! End-to-end acceptance run. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero on any failure outside [`DOCUMENTED_DEVIATIONS`].

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use qdex_cli::{run, Artifacts, Command, ScenarioConfig, MANIFEST};
use qdex_core::entropy::{chi_square_miss_probability, extractable_length, EntropyParams};
use qdex_core::keypool::{stationary_distribution, stationary_oracle, BirthDeathParams};
use qdex_core::market::{
    aggregate_response, random_small_instance, solve_social, solve_stackelberg, LeaderCost,
    MarketInstance, Prosumer, DEFAULT_TOL,
};
use qdex_core::porlite::{finality_depth, fork_tail_bound, SimMode};
use qdex_core::qkms::KeyId;
use qdex_core::qsah::{advantage_bound, HandshakeSession, Server, SharedKey, MESSAGE_LEN};
use qdex_core::rng::{rng_from_seed, substream};

/// Criteria whose published target the implemented formula cannot meet.
/// Each still has to reproduce the value the formula gives.
const DOCUMENTED_DEVIATIONS: [&str; 1] = ["entropy-arithmetic"];

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

impl Outcome {
    fn ok(&self) -> bool {
        self.passed && self.budget.is_none_or(|b| self.elapsed <= b)
    }
}

fn timed(
    name: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = f();
    let o = Outcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
        budget,
    };
    let limit = o
        .budget
        .map_or(String::new(), |b| format!(" / {:.0} s", b.as_secs_f64()));
    println!(
        "{} {}: {} [{:.2} s{limit}]",
        if o.ok() { "PASS" } else { "FAIL" },
        o.name,
        o.detail,
        o.elapsed.as_secs_f64()
    );
    o
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn unit(seed: u64, name: &str) -> f64 {
    (substream(seed, name) >> 11) as f64 / (1u64 << 53) as f64
}

fn failed_checks(a: &Artifacts) -> Vec<String> {
    a.checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.detail))
        .collect()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a.abs() < 1e-290 && b.abs() < 1e-290 {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

// ---------------------------------------------------------------------------
// key pool
// ---------------------------------------------------------------------------

fn reference_pi0() -> (bool, String) {
    let rows = [
        (0.9, 7.06e-11, 1e-2),
        (0.99, 1.545e-3, 5e-4),
        (0.999, 4.494e-3, 5e-4),
        (0.9999, 4.926e-3, 5e-4),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (rho, want, rel) in rows {
        let pi0 = stationary_distribution(&BirthDeathParams::from_rho(rho, 200).unwrap()).pi0();
        ok &= (pi0 - want).abs() <= rel * want;
        parts.push(format!("{rho}: {pi0:.4e}"));
    }
    (ok, format!("M = 200, pi0 {}", parts.join(", ")))
}

fn closed_form_vs_oracle() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut bad = 0;
    for i in 0..500 {
        let rho = 0.01 + 0.9899 * unit(17, &format!("rho-{i}"));
        let m = 1 + (unit(17, &format!("m-{i}")) * 2000.0) as u64;
        let p = BirthDeathParams::from_rho(rho, m).unwrap();
        let (cf, or) = (stationary_distribution(&p), stationary_oracle(&p));
        for (a, b) in cf.pi.iter().zip(&or.pi) {
            if !rel_close(*a, *b, 1e-10) {
                bad += 1;
            }
            if a.abs() > 1e-290 {
                worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
            }
        }
    }
    (
        bad == 0,
        format!("500 instances, worst relative gap {worst:.2e}, {bad} states off"),
    )
}

// ---------------------------------------------------------------------------
// consensus
// ---------------------------------------------------------------------------

fn finality_arithmetic() -> (bool, String) {
    let t = finality_depth(0.25, 40).unwrap();
    let wall = t as f64 * 0.065;
    let tail = fork_tail_bound(0.25, t);
    (
        t == 56 && (3.5..=3.7).contains(&wall) && tail <= 2f64.powi(-40),
        format!("t_fin = {t}, {wall:.2} s, tail {tail:.3e}"),
    )
}

fn bound_domination(network: &Artifacts) -> (bool, String) {
    let mut cfg = ScenarioConfig::default();
    cfg.consensus.mode = SimMode::Bernoulli;
    cfg.consensus.heights = 100_000;
    let bern = qdex_cli::execute(Command::Porlite, &cfg, 1).unwrap();
    let fails: Vec<String> = failed_checks(network)
        .into_iter()
        .map(|f| format!("network: {f}"))
        .chain(
            failed_checks(&bern)
                .into_iter()
                .map(|f| format!("bernoulli: {f}")),
        )
        .collect();
    (
        fails.is_empty(),
        if fails.is_empty() {
            "30 seeds, 100020 network heights and 30 x 100000 Bernoulli heights at alpha 0.25"
                .into()
        } else {
            fails.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// handshake
// ---------------------------------------------------------------------------

fn shared(seed: u64) -> SharedKey {
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&substream(seed, &format!("key-{i}")).to_le_bytes());
    }
    SharedKey {
        key_id: KeyId(u128::from(substream(seed, "id"))),
        key,
        expires_at_ms: u64::MAX,
    }
}

/// Honest run agrees; every single-bit flip of either message is rejected.
fn handshake_suites(seed: u64, tamper: bool) -> (bool, bool) {
    let k = shared(seed);
    let mut rng = rng_from_seed(seed);
    let mut client = HandshakeSession::new(Some(k.clone()), 0.0);
    let hello = client.client_hello(&mut rng).unwrap().to_bytes();
    let out = Server::new()
        .server_response(&k, &hello, 0, &mut rng)
        .unwrap();
    let reply = out.response.to_bytes();
    let mut done = client.clone();
    let complete = done.client_finish(&reply, 1.0).ok() == Some(&out.session_key);
    if !tamper {
        return (complete, true);
    }
    let sound = (0..MESSAGE_LEN * 8).all(|bit| {
        let mut m1 = hello;
        m1[bit / 8] ^= 1 << (bit % 8);
        let mut m2 = reply;
        m2[bit / 8] ^= 1 << (bit % 8);
        Server::new().server_response(&k, &m1, 0, &mut rng).is_err()
            && client.clone().client_finish(&m2, 1.0).is_err()
    });
    (complete, sound)
}

fn qsah_latency() -> (bool, String) {
    let mut fails = Vec::new();
    for seed in 1..=20 {
        let cfg = ScenarioConfig {
            seed,
            ..ScenarioConfig::default()
        };
        let a = qdex_cli::execute(Command::QsahBench, &cfg, 1).unwrap();
        fails.extend(
            failed_checks(&a)
                .into_iter()
                .map(|f| format!("seed {seed}: {f}")),
        );
    }
    let honest = (0..2000).all(|s| handshake_suites(s, false).0);
    let sound = (0..20).all(|s| handshake_suites(1000 + s, true).1);
    (
        fails.is_empty() && honest && sound,
        format!(
            "20 seeds x 3000 handshakes {}; 2000 honest runs {}; tamper suite {}",
            if fails.is_empty() {
                "dominate".into()
            } else {
                fails.join("; ")
            },
            if honest { "agree" } else { "DISAGREE" },
            if sound {
                "all rejected"
            } else {
                "ACCEPTED A FLIP"
            },
        ),
    )
}

// ---------------------------------------------------------------------------
// entropy
// ---------------------------------------------------------------------------

fn entropy_arithmetic() -> (bool, String, bool) {
    let p = EntropyParams::new(1_000_000, 0.02, 2f64.powi(-64)).unwrap();
    let len = extractable_length(&p);
    let miss = chi_square_miss_probability(0.01, 0.002, 1_000_000).unwrap();
    let adv = advantage_bound(2f64.powi(-128), 2f64.powi(-128), 1e-6);
    let len_ok = len.abs_diff(858_300) <= 2;
    let rest_ok = miss <= 1e-6 && (0.99e-6..=1.01e-6).contains(&adv);
    (
        len_ok && rest_ok,
        format!(
            "extractable length {len} (target 858300 +/- 2), miss {miss:.3e}, advantage {adv:.6e}"
        ),
        // the printed formula floors n(1 - h2(q)) - 256 = 858303.5
        len == 858_303 && rest_ok,
    )
}

// ---------------------------------------------------------------------------
// market
// ---------------------------------------------------------------------------

fn pros(alpha: f64, pi: f64, p_max: f64, bus: usize) -> Prosumer {
    Prosumer {
        id: bus,
        alpha,
        pi,
        p_max,
        bus,
    }
}

fn two_prosumer() -> MarketInstance {
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

/// Smallest feasible price on the single line: a 1e-4 scan, then bisection.
fn leader_scan(inst: &MarketInstance) -> (f64, f64) {
    let feasible =
        |u: f64| inst.flows(&aggregate_response(inst, &[u]))[0] <= inst.line_limits[0] + 1e-12;
    let mut hi = 0.0;
    while !feasible(hi) {
        hi += 1e-4;
    }
    let mut lo = (hi - 1e-4f64).max(0.0);
    if hi > 0.0 {
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    (hi, inst.welfare(&aggregate_response(inst, &[hi])))
}

/// Grid over every prosumer but the last at 1e-3; the last takes its best
/// response inside the remaining line capacity.
fn social_grid(inst: &MarketInstance) -> (Vec<f64>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut p = vec![0.0; inst.prosumers.len()];
    fn walk(j: usize, p: &mut Vec<f64>, inst: &MarketInstance, best: &mut (Vec<f64>, f64)) {
        let (h, pr, last) = (&inst.ptdf[0], &inst.prosumers, inst.prosumers.len() - 1);
        if j == last {
            let room = inst.line_limits[0] - (0..last).map(|i| h[pr[i].bus] * p[i]).sum::<f64>();
            let hl = h[pr[last].bus];
            let (lo, hi) = if hl > 0.0 {
                (-pr[last].p_max, (room / hl).min(pr[last].p_max))
            } else {
                ((room / hl).max(-pr[last].p_max), pr[last].p_max)
            };
            if lo > hi {
                return;
            }
            p[last] = (pr[last].alpha * pr[last].pi).clamp(lo, hi);
            let w = inst.welfare(p);
            if w > best.1 {
                *best = (p.clone(), w);
            }
            return;
        }
        let steps = (pr[j].p_max * 1000.0).round() as i64;
        for k in -steps..=steps {
            p[j] = k as f64 * 1e-3;
            walk(j + 1, p, inst, best);
        }
    }
    walk(0, &mut p, inst, &mut best);
    best
}

fn toy_and_dominance() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, inst) in [
        ("two-prosumer", two_prosumer()),
        ("three-node", three_node()),
    ] {
        let stack = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        let (u, w) = leader_scan(&inst);
        let du = (stack.u[0] - u).abs();
        let dw = (stack.welfare - w).abs() / w.abs();
        let social = solve_social(&inst, DEFAULT_TOL).unwrap();
        let (p, ws) = social_grid(&inst);
        let dp = social
            .p
            .iter()
            .zip(&p)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let dws = (social.welfare - ws).abs() / ws.abs();
        ok &= du <= 1e-3 && dw <= 1e-4 && dp <= 1e-3 && dws <= 1e-4;
        parts.push(format!(
            "{name}: leader {du:.1e}, welfare {dw:.1e}, dispatch {dp:.1e}, social welfare {dws:.1e}"
        ));
    }
    let mut violations = 0;
    for seed in 0..1000u64 {
        let inst = random_small_instance(3 + (seed % 6) as usize, 1 + (seed % 3) as usize, seed);
        let s = solve_social(&inst, DEFAULT_TOL).unwrap().welfare;
        let k = solve_stackelberg(&inst, DEFAULT_TOL).unwrap().welfare;
        if k > s + 1e-6 * (1.0 + s.abs()) {
            violations += 1;
        }
    }
    ok &= violations == 0;
    parts.push(format!(
        "1000 random instances, {violations} with W_STACK > W_SOCIAL"
    ));
    (ok, parts.join("; "))
}

// ---------------------------------------------------------------------------
// determinism
// ---------------------------------------------------------------------------

fn rerun_identical(runs: &[(Command, PathBuf, Artifacts)], scratch: &Path) -> (bool, String) {
    let mut diffs = Vec::new();
    for (cmd, dir, first) in runs {
        let cfg = ScenarioConfig::load(&dir.join(MANIFEST)).unwrap();
        let again_dir = scratch.join(format!("{}-rerun", cmd.name()));
        let again = run(*cmd, &cfg, &again_dir, 2).unwrap();
        for (name, bytes) in &first.files {
            if again.file(name) != Some(bytes.as_slice()) {
                diffs.push(format!("{}/{name}", cmd.name()));
            }
        }
        let (m1, m2) = (
            std::fs::read_to_string(dir.join(MANIFEST)).unwrap(),
            std::fs::read_to_string(again_dir.join(MANIFEST)).unwrap(),
        );
        let outputs = |m: &str| m[m.find("[run.outputs]").unwrap()..].to_owned();
        if outputs(&m1) != outputs(&m2) {
            diffs.push(format!("{}/{MANIFEST}", cmd.name()));
        }
    }
    (
        diffs.is_empty(),
        if diffs.is_empty() {
            format!("{} commands rerun from their manifests", runs.len())
        } else {
            format!("differs: {}", diffs.join(", "))
        },
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let first_run = |cmd: Command| {
        let dir = scratch.path().join(cmd.name());
        let a = run(cmd, &ScenarioConfig::default(), &dir, 1).unwrap();
        (cmd, dir, a)
    };
    let mut runs = Vec::new();
    let mut outcomes = Vec::new();

    outcomes.push(timed("keypool-reference-pi0", secs(1), reference_pi0));
    outcomes.push(timed(
        "keypool-closed-form-vs-oracle",
        secs(10),
        closed_form_vs_oracle,
    ));
    outcomes.push(timed("finality-arithmetic", secs(1), finality_arithmetic));
    outcomes.push(timed("consensus-bound-domination", secs(300), || {
        runs.push(first_run(Command::Porlite));
        bound_domination(&runs.last().unwrap().2)
    }));
    outcomes.push(timed("rate-adapt-vs-fixed", secs(30), || {
        runs.push(first_run(Command::RateAdapt));
        let fails = failed_checks(&runs.last().unwrap().2);
        (
            fails.is_empty(),
            if fails.is_empty() {
                "60 s trace, ratios and floor hold".into()
            } else {
                fails.join("; ")
            },
        )
    }));
    outcomes.push(timed("qsah-latency-and-suites", secs(120), qsah_latency));
    let mut entropy_faithful = false;
    outcomes.push(timed("entropy-arithmetic", secs(1), || {
        let (ok, detail, faithful) = entropy_arithmetic();
        entropy_faithful = faithful;
        (ok, detail)
    }));
    outcomes.push(timed(
        "stackelberg-vs-brute-force",
        secs(120),
        toy_and_dominance,
    ));
    outcomes.push(timed("market-economic-neutrality", secs(600), || {
        runs.push(first_run(Command::Market));
        let fails = failed_checks(&runs.last().unwrap().2);
        (
            fails.is_empty(),
            if fails.is_empty() {
                "3000-node grid, stacks within 2%, SOCIAL dominates".into()
            } else {
                fails.join("; ")
            },
        )
    }));
    for cmd in [Command::QsahBench, Command::Keypool, Command::FullStack] {
        runs.push(first_run(cmd));
    }
    outcomes.push(timed("deterministic-rerun", None, || {
        rerun_identical(&runs, scratch.path())
    }));

    let passed = outcomes.iter().filter(|o| o.ok()).count();
    println!("{passed} of {} criteria pass", outcomes.len());
    let unexpected: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.ok())
        .filter(|o| !(DOCUMENTED_DEVIATIONS.contains(&o.name) && entropy_faithful))
        .map(|o| o.name)
        .collect();
    for o in outcomes
        .iter()
        .filter(|o| !o.ok() && !unexpected.contains(&o.name))
    {
        println!(
            "note: {} misses its published target; the implemented formula is reproduced exactly",
            o.name
        );
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
