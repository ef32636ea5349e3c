use proptest::prelude::*;

use pcbm::interaction::interact_closed_form;
use pcbm::metrics::{concept_metrics, iou, ConfusionMatrix};
use pcbm::numerics::Tensor;
use pcbm::observer::{soft_mask, Provenance, SegmentationMap};
use pcbm::schema::{smooth_labels, ConceptKind, ConceptSchema};

fn schema() -> ConceptSchema {
    ConceptSchema::geoscan()
}

fn raw_concepts() -> impl Strategy<Value = (usize, Vec<f64>)> {
    let s = schema();
    (
        0..s.anatomies.len(),
        prop::collection::vec(0.0..=1.0f64, s.d()),
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn smoothing_is_idempotent_and_zeroes_inapplicable_entries((anatomy, raw) in raw_concepts()) {
        let s = schema();
        let app = s.applicability(anatomy);
        let once = smooth_labels(&s, &raw, &app).unwrap();
        let twice = smooth_labels(&s, &once.values, &app).unwrap();
        prop_assert_eq!(&once, &twice);
        for (i, &v) in once.values.iter().enumerate() {
            if !app[i] {
                prop_assert_eq!(v, 0.0);
            } else if s.concepts[i].kind == ConceptKind::Binary {
                prop_assert!(v == 0.01 || v == 0.99);
            } else {
                prop_assert_eq!(v, raw[i]);
            }
        }
    }

    #[test]
    fn applicable_metrics_ignore_inapplicable_predictions(
        (anatomy, truth) in raw_concepts(),
        pred in prop::collection::vec(0.0..=1.0f64, 30),
        noise in prop::collection::vec(0.0..=1.0f64, 30),
    ) {
        let s = schema();
        let d = s.d();
        let app = s.applicability(anatomy);
        let pred = &pred[..d];
        let perturbed: Vec<f64> = (0..d).map(|i| if app[i] { pred[i] } else { noise[i] }).collect();
        let a = concept_metrics(pred, &truth, &app, &s);
        let b = concept_metrics(&perturbed, &truth, &app, &s);
        prop_assert_eq!(a.coa, b.coa);
        prop_assert_eq!(a.rmse_applicable, b.rmse_applicable);
        prop_assert!((0.0..=1.0).contains(&a.coa));
    }

    #[test]
    fn iou_is_invariant_to_pixel_order_and_equivariant_to_relabeling(
        pairs in prop::collection::vec((0u8..4, 0u8..4), 1..60),
        shift in 0usize..60,
        relabel in Just([2u8, 0, 3, 1]),
    ) {
        let (p, t): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let base = iou(&p, &t, 4);
        let k = shift % p.len();
        let rot = |v: &[u8]| [&v[k..], &v[..k]].concat();
        prop_assert_eq!(&base, &iou(&rot(&p), &rot(&t), 4));
        let map = |v: &[u8]| v.iter().map(|&l| relabel[l as usize]).collect::<Vec<u8>>();
        let moved = iou(&map(&p), &map(&t), 4);
        for c in 0..4 {
            prop_assert_eq!(base[c], moved[relabel[c] as usize]);
        }
        for v in base.iter().flatten() {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn soft_mask_is_linear_in_the_image(
        probs in prop::collection::vec(0.0..=1.0f64, 3 * 12),
        x in prop::collection::vec(0.0..=1.0f64, 12),
        y in prop::collection::vec(0.0..=1.0f64, 12),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
    ) {
        let map = SegmentationMap { probs: Tensor::new(vec![3, 3, 4], probs), provenance: Provenance::Predicted };
        let img = |v: Vec<f64>| Tensor::new(vec![1, 3, 4], v);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let sx = soft_mask(&map, &img(x)).unwrap();
        let sy = soft_mask(&map, &img(y)).unwrap();
        let sm = soft_mask(&map, &img(mix)).unwrap();
        prop_assert_eq!(sm.provenance, Provenance::Predicted);
        for ((m, p), q) in sm.data.data().iter().zip(sx.data.data()).zip(sy.data.data()) {
            prop_assert!((m - (a * p + b * q)).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_soft_masks_partition_the_image(
        labels in prop::collection::vec(0u8..3, 12),
        x in prop::collection::vec(0.0..=1.0f64, 12),
    ) {
        let map = SegmentationMap::from_labels(&labels, 3, 3, 4);
        let st = soft_mask(&map, &Tensor::new(vec![1, 3, 4], x.clone())).unwrap();
        let d = st.data.data();
        for p in 0..12 {
            let total: f64 = (0..3).map(|s| d[s * 12 + p]).sum();
            prop_assert_eq!(total, x[p]);
        }
    }

    #[test]
    fn confusion_summaries_stay_in_range(counts in prop::collection::vec(0u64..20, 9)) {
        let rows: Vec<Vec<u64>> = counts.chunks(3).map(<[u64]>::to_vec).collect();
        let m = ConfusionMatrix::from_rows(&rows);
        let mcc = m.mcc();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
        let t: Vec<Vec<u64>> = (0..3).map(|i| (0..3).map(|j| rows[j][i]).collect()).collect();
        prop_assert!((mcc - ConfusionMatrix::from_rows(&t).mcc()).abs() <= 1e-12);
        if counts.iter().sum::<u64>() > 0 {
            prop_assert!((0.0..=1.0).contains(&m.overall_accuracy()));
        }
    }

    #[test]
    fn two_concept_interaction_is_their_product(c in (0.0..=1.0f64, 0.0..=1.0f64), w in (0.01..5.0f64, 0.01..5.0f64)) {
        let v = interact_closed_form(&[c.0, c.1], &[w.0, w.1]);
        prop_assert!((v - c.0 * c.1).abs() <= 1e-12);
    }
}
