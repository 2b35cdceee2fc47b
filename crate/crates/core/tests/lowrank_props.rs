mod common;

use common::*;
use extsub::lowrank::{effective_rank, singular_values, svd_truncate, tail_energy_error, LowRankError};
use extsub::Matrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn singular_values_match_jacobi(d in 1usize..20, k in 1usize..20, seed in any::<u64>()) {
        let m = normal_matrix(&mut rng(seed), d, k, 1.0);
        let got = singular_values(&m);
        let want = jacobi_singular_values(&m);
        prop_assert_eq!(got.len(), d.min(k));
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-10 * want[0].max(1.0));
        }
    }

    #[test]
    fn full_rank_reassembles(d in 1usize..16, k in 1usize..16, seed in any::<u64>()) {
        let m = normal_matrix(&mut rng(seed), d, k, 1.0);
        let t = svd_truncate(&m, d.min(k)).unwrap();
        prop_assert!(max_abs_diff(&t.reconstruct(), &m) < 1e-10);
        prop_assert!(t.rel_frobenius_error < 1e-12);
    }

    #[test]
    fn factors_balanced(d in 2usize..16, k in 2usize..16, seed in any::<u64>()) {
        let m = normal_matrix(&mut rng(seed), d, k, 1.0);
        let r = 1 + (seed as usize) % d.min(k);
        let t = svd_truncate(&m, r).unwrap();
        for j in 0..r {
            let bcol: Vec<f64> = (0..d).map(|i| t.b.get(i, j)).collect();
            let arow = t.a.row(j);
            prop_assert!((vec_norm(&bcol) - vec_norm(arow)).abs() < 1e-9);
            prop_assert!((vec_norm(&bcol).powi(2) - t.singular_values[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn low_rank_input_recovered(d in 4usize..20, k in 4usize..20, r in 1usize..4, seed in any::<u64>()) {
        let mut g = rng(seed);
        let m = normal_matrix(&mut g, d, r, 1.0).matmul(&normal_matrix(&mut g, r, k, 1.0));
        let t = svd_truncate(&m, r).unwrap();
        prop_assert!(max_abs_diff(&t.reconstruct(), &m) < 1e-9);
        prop_assert_eq!(effective_rank(&m, 1e-6), r);
    }
}

#[test]
fn eckart_young_against_random_projections() {
    let mut g = rng(3);
    for _ in 0..10 {
        let m = normal_matrix(&mut g, 24, 18, 1.0);
        for r in [1, 5, 12] {
            let t = svd_truncate(&m, r).unwrap();
            let best = m.sub_scaled(1.0, &t.reconstruct()).frobenius_norm();
            for _ in 0..10 {
                let q = random_orthonormal(&mut g, 24, r);
                let alt = q.matmul(&q.transpose().matmul(&m));
                assert!(best <= m.sub_scaled(1.0, &alt).frobenius_norm() + 1e-12);
            }
        }
    }
}

#[test]
fn tail_formula_edge_cases() {
    assert_eq!(tail_energy_error(&[0.0, 0.0], 1), 0.0);
    assert!(tail_energy_error(&[3.0, 4.0], 2).is_sign_positive());
    assert!((tail_energy_error(&[3.0, 4.0], 1) - 0.8).abs() < 1e-15);
}

#[test]
fn rank_bounds() {
    let m = Matrix::<f64>::zeros(4, 3);
    assert!(matches!(svd_truncate(&m, 0), Err(LowRankError::ZeroRank)));
    assert!(matches!(svd_truncate(&m, 4), Err(LowRankError::RankTooLarge { requested: 4, max: 3 })));
    let t = svd_truncate(&m, 2).unwrap();
    assert_eq!(t.rel_frobenius_error, 0.0);
    assert_eq!(effective_rank(&m, 1e-6), 0);
}

#[test]
fn deterministic() {
    let m = normal_matrix(&mut rng(9), 30, 20, 1.0);
    let (a, b) = (svd_truncate(&m, 7).unwrap(), svd_truncate(&m, 7).unwrap());
    assert!(a.b.bit_eq(&b.b) && a.a.bit_eq(&b.a));
}
