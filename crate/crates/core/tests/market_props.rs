use proptest::prelude::*;
use qdex_core::market::{
    aggregate_response, follower_response, random_small_instance, security_coupled_clearing,
    security_filter, solve_base, solve_social, solve_stackelberg, solve_stackelberg_from,
    MarketInstance, Prosumer, SecurityStack, DEFAULT_TOL,
};
use qdex_core::rng::rng_from_seed;
use rand::Rng;

fn close_above(a: f64, b: f64) -> bool {
    a >= b - 1e-6 * (1.0 + a.abs().max(b.abs()))
}

/// Random instance whose lines act on disjoint sets of buses, so the leader
/// problem separates into one monotone constraint per line.
fn decoupled_instance(n: usize, lines: usize, seed: u64) -> MarketInstance {
    let mut inst = random_small_instance(n, lines, seed);
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    for (b, row) in inst.ptdf.iter_mut().enumerate() {
        for (k, h) in row.iter_mut().enumerate() {
            *h = if k % lines == b {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            };
        }
    }
    let f0 = inst.flows(&aggregate_response(&inst, &vec![0.0; lines]));
    inst.line_limits = f0
        .iter()
        .map(|&f| (rng.random_range(0.4..1.1) * f.abs()).max(0.5))
        .collect();
    inst
}

/// Smallest price on one line of a decoupled instance that keeps the flow
/// within its limit, by bisection on the monotone flow.
fn line_threshold(inst: &MarketInstance, b: usize) -> f64 {
    let flow = |x: f64| {
        let mut u = vec![0.0; inst.lines()];
        u[b] = x;
        inst.flows(&aggregate_response(inst, &u))[b]
    };
    let lim = inst.line_limits[b];
    if flow(0.0) <= lim {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while flow(hi) > lim {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if flow(mid) > lim {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[test]
fn welfare_dominance_chain() {
    let mut rng = rng_from_seed(2024);
    for seed in 0..1000u64 {
        let n = rng.random_range(2..=50);
        let lines = rng.random_range(1..=6);
        let inst = random_small_instance(n, lines, seed);
        let social = solve_social(&inst, DEFAULT_TOL).unwrap().welfare;
        let stack = solve_stackelberg(&inst, DEFAULT_TOL).unwrap().welfare;
        let wbase = solve_base(&inst, true, DEFAULT_TOL).unwrap().welfare;
        let base = solve_base(&inst, false, DEFAULT_TOL).unwrap().welfare;
        assert!(
            close_above(social, stack),
            "seed {seed}: {social} < {stack}"
        );
        assert!(
            close_above(social, wbase),
            "seed {seed}: {social} < {wbase}"
        );
        assert!(close_above(wbase, base), "seed {seed}: {wbase} < {base}");
        assert!(wbase >= 0.0, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoupled_leader_matches_bisection(n in 4usize..30, lines in 1usize..4, seed in any::<u64>()) {
        let inst = decoupled_instance(n, lines, seed);
        let out = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        let flows = inst.flows(&out.p);
        for b in 0..lines {
            let want = line_threshold(&inst, b);
            prop_assert!((out.u[b] - want).abs() <= 1e-4 * (1.0 + want), "line {}: {} vs {}", b, out.u[b], want);
            let slack = inst.line_limits[b] - flows[b];
            prop_assert!(out.u[b] * slack.abs() <= DEFAULT_TOL * (1.0 + out.u[b]) * (1.0 + inst.line_limits[b]) * 10.0);
        }
    }

    #[test]
    fn decoupled_leader_is_start_independent(n in 4usize..30, lines in 1usize..4, seed in any::<u64>()) {
        let inst = decoupled_instance(n, lines, seed);
        let reference = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        let mut rng = rng_from_seed(seed);
        for _ in 0..10 {
            let u0: Vec<f64> = (0..lines).map(|_| rng.random_range(0.0..20.0)).collect();
            let out = solve_stackelberg_from(&inst, DEFAULT_TOL, Some(&u0)).unwrap();
            for (a, b) in out.u.iter().zip(&reference.u) {
                prop_assert!((a - b).abs() <= 10.0 * DEFAULT_TOL * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn follower_response_non_increasing(
        alpha in 0.1f64..5.0, pi in -10.0f64..20.0, p_max in 0.1f64..30.0,
        h in 0.01f64..1.0, u in 0.0f64..20.0, du in 0.0f64..5.0,
    ) {
        let p = Prosumer { id: 0, alpha, pi, p_max, bus: 0 };
        let a = follower_response(&p, u * h);
        let b = follower_response(&p, (u + du) * h);
        prop_assert!(b <= a);
        prop_assert!(a.abs() <= p_max);
    }

    #[test]
    fn admission_ignores_valuations(n in 2usize..20, scale in 0.1f64..10.0, seed in any::<u64>()) {
        let inst = random_small_instance(n, 2, seed);
        let mut rng = rng_from_seed(seed);
        let lat: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..200.0)).collect();
        let stack = SecurityStack {
            name: "s".into(),
            key_budget_bits: 256.0 * (n as f64 / 2.0).floor(),
            handshake_deadline_ms: 120.0,
            per_node_key_cost_bits: 256.0,
        };
        let mut scaled = inst.clone();
        scaled.prosumers.iter_mut().for_each(|p| p.pi *= scale);
        let a = security_coupled_clearing(&inst, &lat, &stack, DEFAULT_TOL).admitted;
        let b = security_coupled_clearing(&scaled, &lat, &stack, DEFAULT_TOL).admitted;
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a, security_filter(&lat, &stack));
    }

    #[test]
    fn stack_outcome_is_feasible(n in 2usize..40, lines in 1usize..5, seed in any::<u64>()) {
        let inst = random_small_instance(n, lines, seed);
        let out = solve_stackelberg(&inst, DEFAULT_TOL).unwrap();
        prop_assert!(out.u.iter().all(|&x| x >= 0.0));
        prop_assert!(out.kkt_residual <= DEFAULT_TOL);
        for (p, pr) in out.p.iter().zip(&inst.prosumers) {
            prop_assert!(p.abs() <= pr.p_max);
        }
        let lim_scale = 1.0 + inst.line_limits.iter().cloned().fold(0.0, f64::max);
        for (f, m) in inst.flows(&out.p).iter().zip(&inst.line_limits) {
            prop_assert!(f - m <= DEFAULT_TOL * lim_scale);
        }
    }
}
