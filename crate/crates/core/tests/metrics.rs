use nriqa_core::metrics::{mid_ranks, plcc, srocc};
use nriqa_core::Error;
use proptest::prelude::*;

/// Spearman correlation by the textbook definition: Pearson of mid-ranks,
/// with ranks found by counting (O(n²)).
fn brute_force_srocc(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let below = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn distinct(v: &[f64]) -> bool {
    v.iter().any(|x| *x != v[0])
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        let value = prop_oneof![-10.0f64..10.0, (-3i32..3).prop_map(f64::from)];
        (prop::collection::vec(value.clone(), n), prop::collection::vec(value, n))
    })
}

#[test]
fn tie_example() {
    let r = srocc(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r - 4.5 / 22.5f64.sqrt()).abs() < 1e-12);
    assert!((r - 0.94868).abs() < 1e-5);
}

#[test]
fn simple_cases() {
    assert!((plcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!((plcc(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!((srocc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn undefined_inputs() {
    assert!(matches!(plcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(srocc(&[1.0, 2.0], &[5.0, 5.0]), Err(Error::UndefinedCorrelation(_))));
    assert!(plcc(&[1.0], &[1.0]).is_err());
    assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
    assert!(srocc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn bounded_and_symmetric((x, y) in pairs()) {
        prop_assume!(distinct(&x) && distinct(&y));
        let (p, s) = (plcc(&x, &y).unwrap(), srocc(&x, &y).unwrap());
        prop_assert!(p.abs() <= 1.0 + 1e-12 && s.abs() <= 1.0 + 1e-12);
        prop_assert!((p - plcc(&y, &x).unwrap()).abs() < 1e-12);
        prop_assert!((s - srocc(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn srocc_matches_counting_ranks((x, y) in pairs()) {
        prop_assume!(distinct(&x) && distinct(&y));
        prop_assert!((srocc(&x, &y).unwrap() - brute_force_srocc(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn srocc_ignores_increasing_transforms((x, y) in pairs(), k in 0.1f64..3.0) {
        prop_assume!(distinct(&x) && distinct(&y));
        let g: Vec<f64> = x.iter().map(|v| (k * v).tanh() * 5.0 + v.powi(3)).collect();
        prop_assume!(distinct(&g));
        prop_assert!((srocc(&x, &y).unwrap() - srocc(&g, &y).unwrap()).abs() < 1e-12);
        let h: Vec<f64> = y.iter().map(|v| v.exp()).collect();
        prop_assert!((srocc(&x, &y).unwrap() - srocc(&x, &h).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn plcc_ignores_positive_affine_maps((x, y) in pairs(), a in 0.01f64..100.0, b in -50.0f64..50.0) {
        prop_assume!(distinct(&x) && distinct(&y));
        let t: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&x, &y).unwrap() - plcc(&t, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn mid_ranks_sum_to_triangle(x in prop::collection::vec((-3i32..3).prop_map(f64::from), 1..30)) {
        let n = x.len() as f64;
        prop_assert!((mid_ranks(&x).iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }
}
