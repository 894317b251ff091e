mod common {
    pub mod qp_oracle;
}

use common::qp_oracle::{random_problem, DenseProblem};
use contact_core::qp::{infeasibility_probe, solve, QpSettings, QpStatus, QuadraticProgram};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_qp(d: &DenseProblem) -> QuadraticProgram {
    let n = d.n();
    let mut qp = QuadraticProgram::with_vars(n);
    for i in 0..n {
        for j in 0..n {
            qp.cost.push(i, j, d.p[i][j]);
        }
    }
    qp.linear = d.c.clone();
    for (row, b) in d.a.iter().zip(&d.b) {
        let r: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        qp.add_eq(&r, *b);
    }
    for (row, h) in d.g.iter().zip(&d.h) {
        let r: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        qp.add_ineq(&r, *h);
    }
    qp
}

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let d = random_problem(&mut rng);
        let expected = d.oracle().expect("constructed problems are feasible");
        let sol = solve(&to_qp(&d), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "case {case}");
        let err = sol.x.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-5, "case {case}: error {err:e}");
    }
}

#[test]
fn warm_start_reaches_the_same_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let d = random_problem(&mut rng);
        let qp = to_qp(&d);
        let cold = solve(&qp, &QpSettings::default()).unwrap();
        let warm = contact_core::qp::solve_warm(&qp, &QpSettings::default(), Some(&cold.x)).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        for (a, b) in warm.x.iter().zip(&cold.x) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn detects_contradictory_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let d = random_problem(&mut rng);
        let mut qp = to_qp(&d);
        let row: Vec<(usize, f64)> = (0..d.n()).map(|i| (i, 1.0 + i as f64)).collect();
        let neg: Vec<(usize, f64)> = row.iter().map(|&(i, v)| (i, -v)).collect();
        qp.add_ineq(&row, 0.3);
        qp.add_ineq(&neg, -0.4);
        assert!(infeasibility_probe(&qp));
        assert_eq!(solve(&qp, &QpSettings::default()).unwrap().status, QpStatus::PrimalInfeasible);
    }
}

#[test]
fn tied_copies_with_repeated_bounds() {
    // 200 copies of two variables tied together, each copy repeating the same
    // box and diagonal bounds: min (u - 2)^2 + (v - 2)^2 s.t. u + v <= 1.
    let copies = 200;
    let mut qp = QuadraticProgram::with_vars(2 * copies);
    qp.cost.push(0, 0, 2.0);
    qp.cost.push(1, 1, 2.0);
    qp.linear[0] = -4.0;
    qp.linear[1] = -4.0;
    for k in 1..copies {
        qp.add_eq(&[(2 * k, 1.0), (0, -1.0)], 0.0);
        qp.add_eq(&[(2 * k + 1, 1.0), (1, -1.0)], 0.0);
    }
    for k in 0..copies {
        let (u, v) = (2 * k, 2 * k + 1);
        qp.add_ineq(&[(u, 1.0), (v, 1.0)], 1.0 + 0.001 * (copies - k) as f64);
        qp.add_ineq(&[(u, 1.0)], 3.0);
        qp.add_ineq(&[(u, -1.0)], 3.0);
    }
    let sol = solve(&qp, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    for k in 0..copies {
        assert!((sol.x[2 * k] - 0.5005).abs() < 1e-6 && (sol.x[2 * k + 1] - 0.5005).abs() < 1e-6, "{:?}", &sol.x[..2]);
    }
    // Only the tightest copy of the diagonal bound carries a multiplier.
    let active: Vec<usize> = (0..sol.ineq_multipliers.len()).filter(|&r| sol.ineq_multipliers[r] > 1e-9).collect();
    assert_eq!(active, vec![3 * (copies - 1)]);
    assert!(sol.primal_residual < 1e-6);
}

#[test]
fn conflicting_repeated_equalities_are_infeasible() {
    let mut qp = QuadraticProgram::with_vars(2);
    qp.cost.push(0, 0, 1.0);
    qp.cost.push(1, 1, 1.0);
    qp.add_eq(&[(0, 1.0), (1, 1.0)], 1.0);
    qp.add_eq(&[(0, 1.0), (1, 1.0)], 1.1);
    assert_eq!(solve(&qp, &QpSettings::default()).unwrap().status, QpStatus::PrimalInfeasible);
    assert!(infeasibility_probe(&qp));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kkt_conditions_hold(seed in any::<u64>()) {
        let d = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let qp = to_qp(&d);
        let sol = solve(&qp, &QpSettings::default()).unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.primal_residual <= 1e-5);
        prop_assert!(sol.dual_residual <= 1e-5);
        let gx = qp.ineq.mul_vec(&sol.x);
        for ((y, g), h) in sol.ineq_multipliers.iter().zip(&gx).zip(&qp.ineq_rhs) {
            prop_assert!(*y >= -1e-7);
            prop_assert!((y * (h - g)).abs() <= 1e-6);
        }
    }

    #[test]
    fn invariant_to_cost_scaling(seed in any::<u64>(), k in 0.01f64..100.0) {
        let d = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let qp = to_qp(&d);
        let mut scaled = qp.clone();
        for e in &mut scaled.cost.entries {
            e.2 *= k;
        }
        for c in &mut scaled.linear {
            *c *= k;
        }
        let a = solve(&qp, &QpSettings::default()).unwrap();
        let b = solve(&scaled, &QpSettings::default()).unwrap();
        for (u, v) in a.x.iter().zip(&b.x) {
            prop_assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn invariant_to_row_scaling(seed in any::<u64>(), k in 0.01f64..100.0) {
        let d = random_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let qp = to_qp(&d);
        let mut scaled = qp.clone();
        for e in &mut scaled.ineq.entries {
            e.2 *= k;
        }
        for h in &mut scaled.ineq_rhs {
            *h *= k;
        }
        let a = solve(&qp, &QpSettings::default()).unwrap();
        let b = solve(&scaled, &QpSettings::default()).unwrap();
        for (u, v) in a.x.iter().zip(&b.x) {
            prop_assert!((u - v).abs() <= 1e-5);
        }
    }
}

