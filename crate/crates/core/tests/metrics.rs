use mrad_core::eval::{
    auroc, average_precision, evaluate, pixel_auroc, pro, EvalItem, PRO_FPR_CAP, PRO_THRESHOLDS,
};
use mrad_core::{AnomalyMap, Bitmap};
use proptest::prelude::*;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..200).prop_map(|v| {
        let mut s: Vec<f64> = v.iter().map(|p| f64::from(p.0) / 20.0).collect();
        let mut l: Vec<bool> = v.iter().map(|p| p.1).collect();
        // both classes present
        l[0] = true;
        l[1] = false;
        s[0] += 0.01;
        (s, l)
    })
}

proptest! {
    #[test]
    fn auroc_and_ap_ignore_increasing_transforms((s, l) in scored()) {
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert!((auroc(&s, &l).unwrap() - auroc(&t, &l).unwrap()).abs() < 1e-12);
        prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_of_negated_scores_is_complement(v in prop::collection::vec(any::<bool>(), 2..200)) {
        // tie-free: distinct scores
        let s: Vec<f64> = (0..v.len()).map(|i| ((i * 7919) % 1009) as f64).collect();
        let mut l = v;
        l[0] = true;
        l[1] = false;
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_auroc_is_pooled_auroc(vals in prop::collection::vec((0u8..10, any::<bool>()), 12)) {
        let maps: Vec<AnomalyMap> = vals
            .chunks(6)
            .map(|c| AnomalyMap::new(2, 3, c.iter().map(|p| f32::from(p.0) / 10.0).collect()).unwrap())
            .collect();
        let mut bits: Vec<bool> = vals.iter().map(|p| p.1).collect();
        bits[0] = true;
        bits[1] = false;
        let masks: Vec<Bitmap> = bits.chunks(6).map(|c| Bitmap::new(2, 3, c.to_vec()).unwrap()).collect();
        let pooled: Vec<f64> = maps.iter().flat_map(|m| m.scores().iter().map(|&x| f64::from(x))).collect();
        prop_assert_eq!(pixel_auroc(&maps, &masks).unwrap(), auroc(&pooled, &bits).unwrap());
    }

    #[test]
    fn pro_never_drops_when_region_scores_rise(
        vals in prop::collection::vec(0u8..10, 36),
        bits in prop::collection::vec(prop::bool::weighted(0.3), 36),
        bumps in prop::collection::vec(0u8..5, 36),
    ) {
        let mut bits = bits;
        bits[0] = true;
        bits[35] = false;
        let mask = Bitmap::new(6, 6, bits.clone()).unwrap();
        let base: Vec<f32> = vals.iter().map(|&v| f32::from(v) / 10.0).collect();
        let raised: Vec<f32> = base
            .iter()
            .zip(&bits)
            .zip(&bumps)
            .map(|((&v, &b), &u)| if b { v + f32::from(u) / 10.0 } else { v })
            .collect();
        let p = |v: Vec<f32>| pro(&[AnomalyMap::new(6, 6, v).unwrap()], std::slice::from_ref(&mask), PRO_FPR_CAP, PRO_THRESHOLDS).unwrap();
        let (before, after) = (p(base), p(raised));
        prop_assert!((0.0..=1.0).contains(&before));
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
    }
}

#[test]
fn perfect_predictor_scores_one_everywhere() {
    let mask = Bitmap::from_fn(4, 4, |y, x| y < 2 && x < 2);
    let perfect = AnomalyMap::new(
        4,
        4,
        mask.bits()
            .iter()
            .map(|&b| f32::from(u8::from(b)))
            .collect(),
    )
    .unwrap();
    let items = vec![
        EvalItem {
            id: "a".into(),
            category: "c".into(),
            anomalous: true,
            score: 1.0,
            map: perfect.clone(),
            mask: Some(mask),
        },
        EvalItem {
            id: "n".into(),
            category: "c".into(),
            anomalous: false,
            score: 0.0,
            map: AnomalyMap::filled(4, 4, 0.0),
            mask: Some(Bitmap::zeros(4, 4)),
        },
    ];
    let report = evaluate(&items).unwrap();
    let m = &report.per_category["c"];
    assert_eq!(
        (m.image_auroc, m.image_ap, m.pixel_auroc),
        (Some(1.0), Some(1.0), Some(1.0))
    );
    assert!((m.pro.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report.schema_version, 1);
}

#[test]
fn single_class_categories_report_absent_metrics() {
    let items = vec![EvalItem {
        id: "n".into(),
        category: "c".into(),
        anomalous: false,
        score: 0.3,
        map: AnomalyMap::filled(2, 2, 0.1),
        mask: Some(Bitmap::zeros(2, 2)),
    }];
    let m = &evaluate(&items).unwrap().per_category["c"];
    assert_eq!(
        (m.image_auroc, m.image_ap, m.pixel_auroc, m.pro),
        (None, None, None, None)
    );
}
