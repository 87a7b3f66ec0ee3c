use approx::assert_relative_eq;
use dada_core::fusion::{dada_fusion, self_information, surprisal};
use dada_core::losses::{
    berhu, berhu_derivative, depth_loss, domain_bce, seg_loss, source_objective, DomainLabel,
};
use dada_core::maps::{DepthPrediction, LabelMap, SoftSegMap, SurprisalMap};
use dada_core::Tensor;
use proptest::prelude::*;

/// Softmax of arbitrary logits, laid out channel-major.
fn soft_from_logits(c: usize, hw: usize, logits: &[f64]) -> SoftSegMap<f64> {
    let mut out = vec![0.0; c * hw];
    for px in 0..hw {
        let m = (0..c).map(|k| logits[k * hw + px]).fold(f64::MIN, f64::max);
        let z: f64 = (0..c).map(|k| (logits[k * hw + px] - m).exp()).sum();
        for k in 0..c {
            out[k * hw + px] = (logits[k * hw + px] - m).exp() / z;
        }
    }
    SoftSegMap(Tensor::new(&[c, 1, hw], out).unwrap())
}

fn depth(v: Vec<f64>) -> DepthPrediction<f64> {
    let n = v.len();
    DepthPrediction(Tensor::new(&[1, 1, n], v).unwrap())
}

fn target(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(&[1, 1, n], v).unwrap()
}

#[test]
fn berhu_hand_values() {
    assert_eq!(berhu(0.0, 1.0), 0.0);
    assert_eq!(berhu(0.5, 1.0), 0.5);
    assert_eq!(berhu(-1.0, 1.0), 1.0);
    assert_eq!(berhu(2.0, 1.0), 2.5);
    assert_eq!(berhu(-3.0, 0.5), (9.0 + 0.25) / 1.0);
}

#[test]
fn depth_loss_zero_on_exact_prediction_and_rejects_mismatch() {
    let z = vec![0.1, 0.5, 0.9, 0.3];
    assert_eq!(depth_loss(&depth(z.clone()), &target(z)).unwrap(), 0.0);
    assert!(depth_loss(&depth(vec![0.1; 4]), &target(vec![0.1; 5])).is_err());
}

#[test]
fn depth_loss_matches_direct_evaluation() {
    // residuals 0.1, -0.5, 1.0, 0; c = 0.2
    let l = depth_loss(&depth(vec![0.6, 0.0, 1.5, 0.2]), &target(vec![0.5, 0.5, 0.5, 0.2])).unwrap();
    let c = 0.2;
    let expected = (0.1 + (0.25 + c * c) / (2.0 * c) + (1.0 + c * c) / (2.0 * c) + 0.0) / 4.0;
    assert_relative_eq!(l, expected, max_relative = 1e-12);
}

#[test]
fn negative_depth_weight_is_rejected() {
    let p = soft_from_logits(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let y = LabelMap::new(1, 2, vec![0, 1]).unwrap();
    assert!(source_objective(&p, &y, &depth(vec![0.1, 0.2]), &target(vec![0.2, 0.2]), -0.1).is_err());
}

#[test]
fn surprisal_peaks_at_inverse_e() {
    let inv = 1.0 / 2f64.ln();
    let peak = surprisal(std::f64::consts::E.recip(), inv);
    assert_relative_eq!(peak, 1.0 / (std::f64::consts::E * 2f64.ln()), max_relative = 1e-12);
    assert_eq!(surprisal(0.0, inv), 0.0);
    assert_eq!(surprisal(1.0, inv), 0.0);
    assert_eq!(surprisal(0.5, inv), 0.5);
}

#[test]
fn domain_bce_is_capped_by_probability_floor() {
    let t = Tensor::new(&[1, 1, 1], vec![-60.0]).unwrap();
    let cap = -(1e-12f64).ln();
    assert!((domain_bce(&t, DomainLabel::Source) - cap).abs() < 1e-9);
    assert!(domain_bce(&t, DomainLabel::Target) < 1e-20);
}

#[test]
fn fusion_rejects_mismatched_depth() {
    let i = SurprisalMap(Tensor::full(&[3, 2, 2], 0.1));
    assert!(dada_fusion(&i, &DepthPrediction(Tensor::full(&[1, 2, 3], 0.5))).is_err());
    assert!(dada_fusion(&i, &DepthPrediction(Tensor::full(&[2, 2, 2], 0.5))).is_err());
}

proptest! {
    #[test]
    fn berhu_is_continuous_at_threshold(c in 1e-3f64..10.0) {
        prop_assert!((berhu(c, c) - c).abs() <= 1e-12 * c);
        let above = berhu(c * (1.0 + 1e-9), c);
        prop_assert!((above - c).abs() <= 1e-6 * c);
        prop_assert_eq!(berhu_derivative(c, c), 1.0);
        prop_assert!((berhu_derivative(c * (1.0 + 1e-12), c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn berhu_is_convex_and_symmetric(a in -20.0f64..20.0, b in -20.0f64..20.0, t in 0.0f64..1.0, c in 0.01f64..5.0) {
        let mid = berhu(t * a + (1.0 - t) * b, c);
        prop_assert!(mid <= t * berhu(a, c) + (1.0 - t) * berhu(b, c) + 1e-9);
        prop_assert_eq!(berhu(a, c), berhu(-a, c));
        prop_assert!(berhu(a, c) >= a.abs() - 1e-12);
    }

    #[test]
    fn berhu_derivative_matches_finite_difference(e in -10.0f64..10.0, c in 0.05f64..5.0) {
        prop_assume!((e.abs() - c).abs() > 1e-3 && e.abs() > 1e-3);
        let h = 1e-6;
        let fd = (berhu(e + h, c) - berhu(e - h, c)) / (2.0 * h);
        prop_assert!((fd - berhu_derivative(e, c)).abs() < 1e-5);
    }

    #[test]
    fn depth_loss_ignores_pixel_order(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..64),
        rot in 0usize..64,
    ) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let base = depth_loss(&depth(p.clone()), &target(t.clone())).unwrap();
        let k = rot % p.len();
        let (mut p2, mut t2) = (p.clone(), t.clone());
        p2.rotate_left(k);
        t2.rotate_left(k);
        p2.reverse();
        t2.reverse();
        let perm = depth_loss(&depth(p2), &target(t2)).unwrap();
        prop_assert!((base - perm).abs() <= 1e-12 * base.max(1.0));
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn source_objective_is_linear_in_depth_weight(
        logits in prop::collection::vec(-4.0f64..4.0, 12),
        labels in prop::collection::vec(0u8..3, 4),
        zp in prop::collection::vec(0.0f64..1.0, 4),
        zt in prop::collection::vec(0.0f64..1.0, 4),
        lambda in 0.0f64..10.0,
    ) {
        let p = soft_from_logits(3, 4, &logits);
        let y = LabelMap::new(1, 4, labels.clone()).unwrap();
        let (zp, zt) = (depth(zp), target(zt));
        let seg = seg_loss(&p, &y).unwrap();
        let dep = depth_loss(&zp, &zt).unwrap();
        let total = source_objective(&p, &y, &zp, &zt, lambda).unwrap();
        prop_assert!((total - (seg + lambda * dep)).abs() <= 1e-12 * total.max(1.0));
        prop_assert_eq!(source_objective(&p, &y, &zp, &zt, 0.0).unwrap(), seg);

        // independent cross-entropy oracle
        let oracle = -labels
            .iter()
            .enumerate()
            .map(|(px, &c)| p.0.data()[c as usize * 4 + px].ln())
            .sum::<f64>()
            / 4.0;
        prop_assert!((seg - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn domain_bce_matches_softplus(scores in prop::collection::vec(-25.0f64..25.0, 1..16)) {
        let t = Tensor::new(&[1, 1, scores.len()], scores.clone()).unwrap();
        let n = scores.len() as f64;
        let src: f64 = scores.iter().map(|&s| (-s).exp().ln_1p()).sum::<f64>() / n;
        let tgt: f64 = scores.iter().map(|&s| s.exp().ln_1p()).sum::<f64>() / n;
        prop_assert!((domain_bce(&t, DomainLabel::Source) - src).abs() <= 1e-9 * src.max(1.0));
        prop_assert!((domain_bce(&t, DomainLabel::Target) - tgt).abs() <= 1e-9 * tgt.max(1.0));
    }

    #[test]
    fn surprisal_is_bounded(logits in prop::collection::vec(-20.0f64..20.0, 7 * 9)) {
        let p = soft_from_logits(7, 9, &logits);
        let i = self_information(&p);
        let cap = 1.0 / (std::f64::consts::E * 2f64.ln());
        prop_assert!(i.0.data().iter().all(|&v| (0.0..=cap + 1e-12).contains(&v)));
        prop_assert!(cap < 0.531);
        // channel sum is the per-pixel entropy in bits
        for px in 0..9 {
            let h: f64 = (0..7).map(|k| i.0.data()[k * 9 + px]).sum();
            prop_assert!(h <= 7f64.log2() + 1e-9);
        }
    }

    #[test]
    fn fusion_is_bilinear_and_preserves_zero(
        a in prop::collection::vec(0.0f64..0.6, 3 * 6),
        b in prop::collection::vec(0.0f64..0.6, 3 * 6),
        z in prop::collection::vec(0.0f64..1.0, 6),
        z2 in prop::collection::vec(0.0f64..1.0, 6),
        s in -3.0f64..3.0,
    ) {
        let m = |v: &Vec<f64>| SurprisalMap(Tensor::new(&[3, 2, 3], v.clone()).unwrap());
        let d = |v: &Vec<f64>| DepthPrediction(Tensor::new(&[1, 2, 3], v.clone()).unwrap());
        let fa = dada_fusion(&m(&a), &d(&z)).unwrap();
        let fb = dada_fusion(&m(&b), &d(&z)).unwrap();
        let comb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
        let fc = dada_fusion(&m(&comb), &d(&z)).unwrap();
        for k in 0..18 {
            prop_assert!((fc.0.data()[k] - (s * fa.0.data()[k] + fb.0.data()[k])).abs() < 1e-12);
            prop_assert_eq!(fa.0.data()[k], a[k] * z[k % 6]);
        }
        let zsum: Vec<f64> = z.iter().zip(&z2).map(|(x, y)| x + s * y).collect();
        let f2 = dada_fusion(&m(&a), &d(&z2)).unwrap();
        let fs = dada_fusion(&m(&a), &d(&zsum)).unwrap();
        for k in 0..18 {
            prop_assert!((fs.0.data()[k] - (fa.0.data()[k] + s * f2.0.data()[k])).abs() < 1e-12);
        }
        let zero = dada_fusion(&m(&a), &d(&vec![0.0; 6])).unwrap();
        prop_assert!(zero.0.data().iter().all(|&v| v == 0.0));
        let zero = dada_fusion(&m(&vec![0.0; 18]), &d(&z)).unwrap();
        prop_assert!(zero.0.data().iter().all(|&v| v == 0.0));
    }
}
