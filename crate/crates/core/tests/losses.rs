use nriqa_core::heads::losses::{
    composite_loss, quality_loss, ranking_loss, select_extremes, self_consistency_loss, tape_composite,
    tape_quality_loss, tape_ranking_loss, tape_self_consistency, LossWeights, QualityBatch,
};
use nriqa_core::{Tape, Tensor};
use proptest::prelude::*;

/// Ranking loss recomputed from raw `(q, s)`: sort positions by descending
/// score (stable, so ties keep index order) and evaluate both hinges.
fn brute_force_ranking(q: &[f64], s: &[f64]) -> f64 {
    let n = s.len();
    if n < 4 {
        return 0.0;
    }
    let mut ranked: Vec<(f64, f64, usize)> = s.iter().zip(q).enumerate().map(|(i, (&s, &q))| (s, q, i)).collect();
    for i in 1..n {
        let mut j = i;
        while j > 0 && (ranked[j - 1].0 < ranked[j].0) {
            ranked.swap(j - 1, j);
            j -= 1;
        }
    }
    let (best, second, worst, second_worst) = (ranked[0], ranked[1], ranked[n - 1], ranked[n - 2]);
    let d = |a: f64, b: f64| (a - b).abs();
    let first = d(best.1, second.1) - d(best.1, worst.1) + (second.0 - worst.0);
    let last = d(second_worst.1, worst.1) - d(best.1, worst.1) + (best.0 - second_worst.0);
    first.max(0.0) + last.max(0.0)
}

fn batch_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=16).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(prop_oneof![0.0f64..1.0, (0u8..4).prop_map(|k| k as f64 / 4.0)], n),
        )
    })
}

#[test]
fn hand_values() {
    let b = QualityBatch::new(vec![0.8, 0.75, 0.5, 0.2], vec![0.9, 0.7, 0.4, 0.1]).unwrap();
    let e = select_extremes(&b).unwrap();
    assert_eq!((e.qa_max, e.qa2_max, e.qa_min, e.qa2_min), (0.8, 0.75, 0.2, 0.5));
    assert!((e.margin1 - 0.6).abs() < 1e-15 && (e.margin2 - 0.5).abs() < 1e-15);
    assert!((ranking_loss(&b) - 0.25).abs() < 1e-12);
    let b = QualityBatch::new(vec![0.5, 0.7], vec![0.4, 0.9]).unwrap();
    assert!((quality_loss(&b) - 0.15).abs() < 1e-12);
    let w = LossWeights::default();
    assert!((composite_loss(0.15, 0.25, 0.75, &w).unwrap() - 0.9125).abs() < 1e-12);
}

#[test]
fn self_consistency_hand_value() {
    let z = Tensor::zeros(&[1, 2]);
    let c = Tensor::new(&[1, 2], vec![0.3, 0.0]).unwrap();
    let a = Tensor::new(&[1, 2], vec![0.0, 0.4]).unwrap();
    let v = self_consistency_loss(&c, &a, &z, &z, 0.2, 0.1, 0.5).unwrap();
    assert!((v - 0.75).abs() < 1e-12);
    assert_eq!(self_consistency_loss(&c, &a, &c, &a, 0.3, 0.3, 0.5).unwrap(), 0.0);
}

#[test]
fn ties_select_lowest_index_first() {
    let b = QualityBatch::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![0.5; 5]).unwrap();
    let e = select_extremes(&b).unwrap();
    assert_eq!((e.qa_max, e.qa2_max, e.qa_min, e.qa2_min), (1.0, 2.0, 5.0, 4.0));
    assert_eq!((e.margin1, e.margin2), (0.0, 0.0));
}

#[test]
fn small_batches_skip_ranking() {
    for n in 1..4 {
        let b = QualityBatch::new(vec![0.1; n], (0..n).map(|i| i as f64).collect()).unwrap();
        assert!(select_extremes(&b).is_none());
        assert_eq!(ranking_loss(&b), 0.0);
    }
}

#[test]
fn invalid_batches_are_rejected() {
    assert!(QualityBatch::new(vec![], vec![]).is_err());
    assert!(QualityBatch::new(vec![0.1], vec![0.1, 0.2]).is_err());
    assert!(QualityBatch::new(vec![0.1], vec![f64::NAN]).is_err());
    assert!(composite_loss(f64::NAN, 0.0, 0.0, &LossWeights::default()).is_err());
    assert!(composite_loss(0.1, f64::INFINITY, 0.0, &LossWeights::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ranking_matches_brute_force((q, s) in batch_strategy()) {
        let b = QualityBatch::new(q.clone(), s.clone()).unwrap();
        prop_assert!((ranking_loss(&b) - brute_force_ranking(&q, &s)).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_have_zero_losses((_, s) in batch_strategy()) {
        let b = QualityBatch::new(s.clone(), s).unwrap();
        prop_assert_eq!(quality_loss(&b), 0.0);
        prop_assert!(ranking_loss(&b).abs() < 1e-12);
    }

    #[test]
    fn quality_loss_is_permutation_invariant((q, s) in batch_strategy(), rot in 0usize..16) {
        let n = q.len();
        let k = rot % n;
        let (mut q2, mut s2) = (q.clone(), s.clone());
        q2.rotate_left(k);
        s2.rotate_left(k);
        let a = quality_loss(&QualityBatch::new(q, s).unwrap());
        let b = quality_loss(&QualityBatch::new(q2, s2).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn selection_ignores_increasing_transforms((q, s) in batch_strategy()) {
        prop_assume!(q.len() >= 4);
        let a = select_extremes(&QualityBatch::new(q.clone(), s.clone()).unwrap()).unwrap();
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp()).collect();
        let b = select_extremes(&QualityBatch::new(q, t).unwrap()).unwrap();
        prop_assert_eq!((a.qa_max, a.qa2_max, a.qa_min, a.qa2_min), (b.qa_max, b.qa2_max, b.qa_min, b.qa2_min));
    }

    #[test]
    fn self_consistency_is_symmetric(vals in prop::collection::vec(-1.0f64..1.0, 24), r in (0.0f64..1.0, 0.0f64..1.0)) {
        let t = |i: usize| Tensor::new(&[2, 3], vals[i * 6..i * 6 + 6].to_vec()).unwrap();
        let (c, a, cf, af) = (t(0), t(1), t(2), t(3));
        let x = self_consistency_loss(&c, &a, &cf, &af, r.0, r.1, 0.5).unwrap();
        let y = self_consistency_loss(&cf, &af, &c, &a, r.1, r.0, 0.5).unwrap();
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!(x >= 0.0);
    }

    #[test]
    fn tape_losses_match_plain((q, s) in batch_strategy(), vals in prop::collection::vec(-1.0f64..1.0, 16)) {
        let b = QualityBatch::new(q.clone(), s.clone()).unwrap();
        let mut tape = Tape::new();
        let qv = tape.leaf(Tensor::from_slice(&q));
        let lq = tape_quality_loss(&mut tape, qv, &s).unwrap();
        let lrr = tape_ranking_loss(&mut tape, qv, &s).unwrap();
        prop_assert!((tape.value(lq).item() - quality_loss(&b)).abs() < 1e-12);
        prop_assert!((tape.value(lrr).item() - ranking_loss(&b)).abs() < 1e-12);

        let t = |i: usize| Tensor::new(&[2, 2], vals[i * 4..i * 4 + 4].to_vec()).unwrap();
        let plain = self_consistency_loss(&t(0), &t(1), &t(2), &t(3), 0.3, 0.1, 0.5).unwrap();
        let vars: Vec<_> = (0..4).map(|i| tape.constant(t(i))).collect();
        let (r1, r2) = (tape.constant(Tensor::scalar(0.3)), tape.constant(Tensor::scalar(0.1)));
        let lsc = tape_self_consistency(&mut tape, vars[0], vars[1], vars[2], vars[3], r1, r2, 0.5).unwrap();
        prop_assert!((tape.value(lsc).item() - plain).abs() < 1e-12);

        let w = LossWeights::default();
        let total = tape_composite(&mut tape, lq, lrr, Some(lsc), &w).unwrap();
        let expect = composite_loss(quality_loss(&b), ranking_loss(&b), plain, &w).unwrap();
        prop_assert!((tape.value(total).item() - expect).abs() < 1e-12);
    }
}
