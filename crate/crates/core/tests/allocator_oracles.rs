use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reserve_core::allocator::*;
use reserve_core::environment::{EnvConfig, ReserveAction, ReserveState};
use reserve_core::feeder::builtin_modified_ieee34;
use reserve_core::powerflow::Network;

fn case1() -> ReserveState {
    ReserveState::new(vec![200.0, 200.0, 150.0, 200.0], vec![10.0, 12.0, 11.0, 14.0], 600.0).unwrap()
}

fn case2() -> ReserveState {
    ReserveState::new(vec![100.0, 80.0, 100.0, 100.0], vec![12.0, 10.0, 10.0, 12.0], 350.0).unwrap()
}

/// Cheapest feasible allocation on a 10 kW lattice, by enumeration.
fn grid_minimum(state: &ReserveState) -> f64 {
    let n = state.len();
    let steps: Vec<usize> = state.r_max.iter().map(|m| (m / 10.0).floor() as usize).collect();
    let target = (state.r_tot / 10.0).round() as usize;
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; n - 1];
    loop {
        let used: usize = idx.iter().sum();
        if used <= target && target - used <= steps[n - 1] {
            let mut r: Vec<f64> = idx.iter().map(|&k| 10.0 * k as f64).collect();
            r.push(10.0 * (target - used) as f64);
            best = best.min(total_reserve_cost(state, &ReserveAction { r }));
        }
        let mut k = 0;
        loop {
            if k == n - 1 {
                return best;
            }
            idx[k] += 1;
            if idx[k] <= steps[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn greedy_beats_grid_on_reference_cases() {
    for state in [case1(), case2()] {
        let greedy = total_reserve_cost(&state, &greedy_cost_oracle(&state));
        assert!(greedy <= grid_minimum(&state) + 1e-9);
    }
    assert!((total_reserve_cost(&case1(), &greedy_cost_oracle(&case1())) - 67.50).abs() < 1e-9);
    assert!((total_reserve_cost(&case2(), &greedy_cost_oracle(&case2())) - 38.40).abs() < 1e-9);
}

#[test]
fn greedy_beats_grid_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let r_max: Vec<f64> = (0..3).map(|_| 10.0 * rng.random_range(1..=20) as f64).collect();
        let prices: Vec<f64> = (0..3).map(|_| rng.random_range(8..=16) as f64).collect();
        let cap: f64 = r_max.iter().sum();
        let r_tot = 10.0 * rng.random_range(1..=(cap / 10.0) as usize) as f64;
        let state = ReserveState::new(r_max, prices, r_tot).unwrap();
        let g = greedy_cost_oracle(&state);
        assert!(g.is_feasible(&state));
        assert!(total_reserve_cost(&state, &g) <= grid_minimum(&state) + 1e-9, "{state:?}");
    }
}

#[test]
fn table_trc_values() {
    let cases = [
        (case1(), vec![165.03, 180.87, 150.0, 104.10], 69.28),
        (case1(), vec![160.0, 160.0, 120.0, 160.0], 70.80),
        (case2(), vec![100.0, 80.0, 100.0, 70.0], 38.40),
        (case2(), vec![92.10, 73.70, 92.10, 92.10], 38.68),
    ];
    for (state, r, expected) in cases {
        let trc = total_reserve_cost(&state, &ReserveAction { r });
        assert!((trc - expected).abs() <= 0.01, "{trc} vs {expected}");
    }
}

#[test]
fn evaluation_is_deterministic() {
    let net = Network::new(&builtin_modified_ieee34()).unwrap();
    let cfg = EnvConfig::default();
    let a = evaluate(&capacity_based(&case1()), &case1(), &net, &cfg);
    let b = evaluate(&capacity_based(&case1()), &case1(), &net, &cfg);
    assert_eq!(a, b);
    assert!(a.converged);
    assert!((a.trc_dollars_per_hour - 70.80).abs() < 1e-9);
    assert!((a.reserves.iter().sum::<f64>() - 600.0).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn capacity_based_is_feasible(
        caps in prop::collection::vec(1.0f64..500.0, 1..8),
        frac in 0.001f64..=1.0,
    ) {
        let total: f64 = caps.iter().sum();
        let state = ReserveState::new(caps.clone(), vec![10.0; caps.len()], total * frac).unwrap();
        let a = capacity_based(&state);
        prop_assert!((a.total() - state.r_tot).abs() <= 1e-6);
        for (r, m) in a.r.iter().zip(&caps) {
            prop_assert!(*r >= 0.0 && *r <= m + 1e-9);
        }
    }
}
