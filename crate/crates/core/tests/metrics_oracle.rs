use proptest::prelude::*;
use dentgan::codec::{default_palette, IndexMask, NUM_CLASSES};
use dentgan::metrics::{class_metrics, confusion, confusion_all, evaluate_dataset, ConfusionCounts, EvalPair};
use dentgan::rng::Rng;
use dentgan_testkit::metrics::{counts, metrics};
use dentgan_testkit::random_mask;

#[test]
fn random_pairs_match_pixel_oracle_exactly() {
    let mut rng = Rng::new(100);
    for _ in 0..100 {
        let pred = random_mask(&mut rng, 16, 16);
        let gt = random_mask(&mut rng, 16, 16);
        let all = confusion_all(&pred, &gt).unwrap();
        for c in 0..NUM_CLASSES as u8 {
            let want = counts(&pred, &gt, c);
            let got = confusion(&pred, &gt, c).unwrap();
            assert_eq!((got.tp, got.fp, got.tn, got.fn_), (want.tp, want.fp, want.tn, want.fn_));
            assert_eq!(all[c as usize], got);
            let m = class_metrics(&got);
            assert_eq!([m.precision, m.tpr, m.tnr, m.dice], metrics(want));
        }
    }
}

#[test]
fn hand_example() {
    let c = ConfusionCounts { class_id: 1, tp: 6, fp: 2, tn: 88, fn_: 4 };
    let m = class_metrics(&c);
    assert!((m.precision.unwrap() - 0.75).abs() < 1e-12);
    assert!((m.tpr.unwrap() - 0.6).abs() < 1e-12);
    assert!((m.dice.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((m.dice.unwrap() - 0.6667).abs() < 1e-4);
}

#[test]
fn perfect_prediction_scores_one_on_present_classes() {
    let mut rng = Rng::new(5);
    let gt = random_mask(&mut rng, 12, 12);
    let report = evaluate_dataset(&[EvalPair { id: "a".into(), pred: gt.clone(), gt }], &default_palette()).unwrap();
    for row in report.rows.iter().filter(|r| r.images > 0) {
        assert_eq!(row.metrics.dice, Some(1.0), "{}", row.label);
        assert_eq!(row.metrics.precision, Some(1.0));
    }
}

#[test]
fn absent_class_is_undefined_not_zero() {
    let gt = IndexMask::filled(4, 4, 2);
    let pred = IndexMask::filled(4, 4, 2);
    let report = evaluate_dataset(&[EvalPair { id: "a".into(), pred, gt }], &default_palette()).unwrap();
    let caries = &report.rows[0];
    assert_eq!(caries.metrics.dice, None);
    assert_eq!(caries.metrics.tnr, Some(1.0));
}

#[test]
fn class_skipped_where_absent() {
    let gt_a = IndexMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
    let gt_b = IndexMask::filled(2, 2, 0);
    let pairs = vec![
        EvalPair { id: "a".into(), pred: gt_a.clone(), gt: gt_a },
        EvalPair { id: "b".into(), pred: IndexMask::new(2, 2, vec![1, 0, 0, 0]).unwrap(), gt: gt_b },
    ];
    let report = evaluate_dataset(&pairs, &default_palette()).unwrap();
    let row = &report.rows[0];
    assert_eq!((row.images, row.skipped), (1, 1));
    assert_eq!(row.metrics.dice, Some(1.0));
    // tnr averages over both images: 1.0 and 3/4
    assert!((row.metrics.tnr.unwrap() - 0.875).abs() < 1e-12);
}

proptest! {
    #[test]
    fn counts_conserve_pixels_and_swap_symmetrically(seed in any::<u64>(), class in 0u8..8) {
        let mut rng = Rng::new(seed);
        let a = random_mask(&mut rng, 7, 5);
        let b = random_mask(&mut rng, 7, 5);
        let ab = confusion(&a, &b, class).unwrap();
        let ba = confusion(&b, &a, class).unwrap();
        prop_assert_eq!(ab.total(), 35);
        prop_assert_eq!((ab.tp, ab.fp, ab.tn, ab.fn_), (ba.tp, ba.fn_, ba.tn, ba.fp));
        let (mab, mba) = (class_metrics(&ab), class_metrics(&ba));
        prop_assert_eq!(mab.dice, mba.dice);
        prop_assert_eq!(mab.precision, mba.tpr);
        if let (Some(p), Some(r), Some(d)) = (mab.precision, mab.tpr, mab.dice) {
            if p + r > 0.0 {
                prop_assert!((2.0 * p * r / (p + r) - d).abs() < 1e-12);
            }
        }
    }
}
