use dada_core::maps::LabelMap;
use dada_core::metrics::{confusion, iou_report, mean_defined, negative_transfer_rate, ConfusionMatrix};
use dada_core::EvalReport;
use proptest::prelude::*;

const C: usize = 7;

fn labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..C as u8, n)
}

fn map(d: &[u8]) -> LabelMap {
    LabelMap::new(1, d.len(), d.to_vec()).unwrap()
}

/// Intersection over union counted directly from the label lists.
fn naive_iou(pred: &[u8], gt: &[u8], c: u8) -> Option<f64> {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
    (union > 0).then(|| inter as f64 / union as f64)
}

#[test]
fn perfect_prediction_scores_one() {
    let gt: Vec<u8> = (0..70).map(|i| (i % C) as u8).collect();
    let r = EvalReport::from_predictions(C, [(&map(&gt), &map(&gt))], None, None).unwrap();
    assert_eq!(r.miou, 1.0);
    assert!(r.per_class_iou.iter().all(|v| *v == Some(1.0)));
}

#[test]
fn absent_classes_are_excluded_from_the_mean() {
    let gt = map(&[0, 0, 1, 1]);
    let r = iou_report(&confusion(&gt, &gt, C).unwrap(), None).unwrap();
    assert_eq!(r.per_class_iou[2], None);
    assert_eq!(r.miou, 1.0);
    assert!(mean_defined(&[None, None]).is_nan());
}

#[test]
fn out_of_range_labels_are_rejected() {
    assert!(confusion(&map(&[0, 7]), &map(&[0, 1]), C).is_err());
    assert!(confusion(&map(&[0, 1]), &map(&[0, 9]), C).is_err());
    assert!(confusion(&map(&[0, 1, 2]), &map(&[0, 1]), C).is_err());
}

proptest! {
    #[test]
    fn iou_matches_direct_count(pred in labels(60), gt in labels(60)) {
        let r = iou_report(&confusion(&map(&pred), &map(&gt), C).unwrap(), None).unwrap();
        for c in 0..C as u8 {
            let expected = naive_iou(&pred, &gt, c);
            match (r.per_class_iou[c as usize], expected) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn confusion_is_additive_over_disjoint_halves(pred in labels(80), gt in labels(80), cut in 1usize..79) {
        let whole = confusion(&map(&pred), &map(&gt), C).unwrap();
        let mut halves = confusion(&map(&pred[..cut]), &map(&gt[..cut]), C).unwrap();
        halves.merge(&confusion(&map(&pred[cut..]), &map(&gt[cut..]), C).unwrap()).unwrap();
        prop_assert_eq!(&whole, &halves);
        prop_assert_eq!(whole.total(), 80);
        let mut acc = ConfusionMatrix::new(C);
        acc.accumulate(&map(&pred[..cut]), &map(&gt[..cut])).unwrap();
        acc.accumulate(&map(&pred[cut..]), &map(&gt[cut..])).unwrap();
        prop_assert_eq!(acc, whole);
    }

    #[test]
    fn relabeling_permutes_per_class_scores(
        pred in labels(50),
        gt in labels(50),
        perm in Just((0..C as u8).collect::<Vec<u8>>()).prop_shuffle(),
    ) {
        let base = iou_report(&confusion(&map(&pred), &map(&gt), C).unwrap(), None).unwrap();
        let rp: Vec<u8> = pred.iter().map(|&c| perm[c as usize]).collect();
        let rg: Vec<u8> = gt.iter().map(|&c| perm[c as usize]).collect();
        let moved = iou_report(&confusion(&map(&rp), &map(&rg), C).unwrap(), None).unwrap();
        for c in 0..C {
            prop_assert_eq!(base.per_class_iou[c], moved.per_class_iou[perm[c] as usize]);
        }
        prop_assert!((base.miou - moved.miou).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_scores_class_share_over_class_count(gt in labels(200), k in 0u8..C as u8) {
        let mut seen = [false; C];
        gt.iter().for_each(|&c| seen[c as usize] = true);
        prop_assume!(seen.iter().all(|&s| s));
        let pred = vec![k; gt.len()];
        let r = iou_report(&confusion(&map(&pred), &map(&gt), C).unwrap(), None).unwrap();
        let share = gt.iter().filter(|&&c| c == k).count() as f64 / gt.len() as f64;
        prop_assert!((r.miou - share / C as f64).abs() < 1e-12);
    }

    #[test]
    fn subset_mean_uses_only_listed_classes(pred in labels(60), gt in labels(60), mask in 1u8..127) {
        let subset: Vec<usize> = (0..C).filter(|c| mask >> c & 1 == 1).collect();
        let cm = confusion(&map(&pred), &map(&gt), C).unwrap();
        let r = iou_report(&cm, Some(&subset)).unwrap();
        let picked: Vec<Option<f64>> = subset.iter().map(|&c| r.per_class_iou[c]).collect();
        let expected = mean_defined(&picked);
        let got = r.miou_subset.unwrap();
        prop_assert!((got.is_nan() && expected.is_nan()) || (got - expected).abs() < 1e-12);
    }

    #[test]
    fn negative_transfer_is_monotone(
        base in prop::collection::vec(0.0f64..1.0, 1..40),
        drops in prop::collection::vec(0.0f64..0.5, 40),
        idx in 0usize..40,
    ) {
        let adapted: Vec<f64> = base.iter().zip(&drops).map(|(b, d)| b + d - 0.25).collect();
        let r = negative_transfer_rate(&adapted, &base).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        let mut worse = adapted.clone();
        let i = idx % worse.len();
        worse[i] -= 0.3;
        prop_assert!(negative_transfer_rate(&worse, &base).unwrap() >= r);
        let mut better = adapted.clone();
        better[i] += 0.3;
        prop_assert!(negative_transfer_rate(&better, &base).unwrap() <= r);
        prop_assert_eq!(negative_transfer_rate(&base, &base).unwrap(), 0.0);
    }
}
