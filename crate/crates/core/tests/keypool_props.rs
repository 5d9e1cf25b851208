use proptest::prelude::*;
use qdex_core::keypool::{
    exact_min_capacity, min_capacity, stationary_distribution, stationary_oracle, BirthDeathParams,
};

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    // both sides underflow together deep in the geometric tail
    if a.abs() < 1e-290 && b.abs() < 1e-290 {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn closed_form_matches_balance_oracle(rho in 0.01f64..0.9999, m in 1u64..=2000) {
        let p = BirthDeathParams::from_rho(rho, m).unwrap();
        let cf = stationary_distribution(&p);
        let or = stationary_oracle(&p);
        prop_assert_eq!(cf.pi.len(), or.pi.len());
        for (s, (a, b)) in cf.pi.iter().zip(&or.pi).enumerate() {
            prop_assert!(rel_close(*a, *b, 1e-10), "state {}: {} vs {}", s, a, b);
        }
    }

    #[test]
    fn pi0_falls_with_capacity(rho in 0.05f64..0.999, m in 1u64..500) {
        let a = stationary_distribution(&BirthDeathParams::from_rho(rho, m).unwrap()).pi0();
        let b = stationary_distribution(&BirthDeathParams::from_rho(rho, m + 1).unwrap()).pi0();
        // strict only while π_0 is still representable
        if a > 1e-290 {
            prop_assert!(b < a);
        } else {
            prop_assert!(b <= a);
        }
    }

    #[test]
    fn pi0_rises_with_load(rho in 0.05f64..0.99, bump in 1e-3f64..0.009, m in 1u64..300) {
        let a = stationary_distribution(&BirthDeathParams::from_rho(rho, m).unwrap()).pi0();
        let b = stationary_distribution(&BirthDeathParams::from_rho(rho + bump, m).unwrap()).pi0();
        if b > 1e-290 {
            prop_assert!(b > a);
        } else {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn closed_form_capacity_never_undershoots(rho in 0.5f64..0.99, exp in 3i32..12) {
        let target = 10f64.powi(-exp);
        let exact = exact_min_capacity(rho, target).unwrap();
        let bound = min_capacity(rho, target).unwrap();
        prop_assert!(exact <= bound.max(1), "exact {} bound {}", exact, bound);
    }
}
