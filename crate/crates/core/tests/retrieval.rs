mod common;

use common::{random_bank, random_record, random_weights, rng, unit_rows};
use mrad_core::retrieval::{
    dataset_statistics, masked_softmax_retrieve, retrieve_ft, retrieve_tf, DropoutMask,
};
use mrad_core::{Label, MemoryBank, MetricWeights, PatchGrid, RetrievalParams};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_probability_vectors(seed in any::<u64>(), tau in 0.01f64..5.0, rho in 0.0f64..0.9) {
        let mut r = rng(seed);
        let (d, n, m) = (r.random_range(1..10), r.random_range(2..30), r.random_range(1..6));
        let keys = to_f64(&unit_rows(&mut r, n, d));
        let queries = to_f64(&unit_rows(&mut r, m, d));
        let labels: Vec<Label> = (0..n).map(|_| Label::from_anomalous(r.random_bool(0.5))).collect();
        let mask = DropoutMask::top_similarities(queries.view(), keys.view(), rho).unwrap();
        for y in masked_softmax_retrieve(queries.view(), keys.view(), &labels, tau, Some(&mask)).unwrap() {
            prop_assert!(y[0] >= 0.0 && y[1] >= 0.0);
            prop_assert!((y[0] + y[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permuting_memory_rows_leaves_output_unchanged(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (d, n) = (r.random_range(2..10), r.random_range(2..30));
        let keys = to_f64(&unit_rows(&mut r, n, d));
        let queries = to_f64(&unit_rows(&mut r, 4, d));
        let labels: Vec<Label> = (0..n).map(|_| Label::from_anomalous(r.random_bool(0.5))).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pk = keys.select(Axis(0), &perm);
        let pl: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
        let a = masked_softmax_retrieve(queries.view(), keys.view(), &labels, 0.7, None).unwrap();
        let b = masked_softmax_retrieve(queries.view(), pk.view(), &pl, 0.7, None).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x[1] - y[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_weights_reproduce_train_free_bitwise(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = r.random_range(2..12);
        let grid = PatchGrid::new(3, 3, 9, 9).unwrap();
        let (nc, np) = (r.random_range(2..20), r.random_range(2..20));
        let bank = random_bank(&mut r, d, nc, np);
        let rec = random_record(&mut r, "q", &grid, d, true, true);
        let params = RetrievalParams::default();
        let tf = retrieve_tf(&rec, &bank, &params).unwrap();
        let ft = retrieve_ft(&rec, &bank, &MetricWeights::identity(d), &params, false).unwrap();
        prop_assert_eq!(tf, ft);
    }
}

#[test]
fn zero_rho_training_equals_inference() {
    let mut r = rng(3);
    let grid = PatchGrid::new(2, 3, 4, 6).unwrap();
    let bank = random_bank(&mut r, 5, 12, 9);
    let rec = random_record(&mut r, "q", &grid, 5, false, true);
    let params = RetrievalParams {
        rho_cls: 0.0,
        rho_seg: 0.0,
        ..RetrievalParams::default()
    };
    let w = random_weights(&mut r, 5, 0.2);
    let train = retrieve_ft(&rec, &bank, &w, &params, true).unwrap();
    let infer = retrieve_ft(&rec, &bank, &w, &params, false).unwrap();
    assert_eq!(train, infer);
    let tf_train = retrieve_ft(&rec, &bank, &MetricWeights::identity(5), &params, true).unwrap();
    assert_eq!(tf_train, retrieve_tf(&rec, &bank, &params).unwrap());
}

#[test]
fn dropout_masks_top_similarities() {
    let mut r = rng(8);
    let keys = to_f64(&unit_rows(&mut r, 10, 4));
    let queries = to_f64(&unit_rows(&mut r, 3, 4));
    let mask = DropoutMask::top_similarities(queries.view(), keys.view(), 0.2).unwrap();
    for (i, q) in queries.rows().into_iter().enumerate() {
        let mut order: Vec<(f64, usize)> = keys
            .rows()
            .into_iter()
            .map(|k| k.dot(&q))
            .zip(0..)
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut top = [order[0].1, order[1].1];
        top.sort();
        assert_eq!(mask.masked(i), &top[..]);
    }
    assert!(DropoutMask::top_similarities(queries.view(), keys.view(), 1.0).is_err());
}

#[test]
fn small_temperature_converges_to_nearest_key() {
    let mut r = rng(12);
    let d = 6;
    let mut checked = 0;
    for _ in 0..20 {
        let keys = to_f64(&unit_rows(&mut r, 8, d));
        // query close to key 3, with a raw-similarity margin of at least 0.1
        let mut q = keys.row(3).to_owned();
        q.iter_mut()
            .for_each(|x| *x += 0.05 * r.random_range(-1.0..1.0));
        let q = &q / q.dot(&q).sqrt();
        let sims: Vec<f64> = keys.rows().into_iter().map(|k| k.dot(&q)).collect();
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] < 0.1 {
            continue;
        }
        let labels: Vec<Label> = (0..8).map(|i| Label::from_anomalous(i == 3)).collect();
        let qa = q.insert_axis(Axis(0));
        let y = masked_softmax_retrieve(qa.view(), keys.view(), &labels, 1e-3, None).unwrap();
        assert!((y[0][1] - 1.0).abs() < 1e-12, "{:?}", y[0]);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn temperature_scales_logits() {
    let mut r = rng(2);
    let keys = to_f64(&unit_rows(&mut r, 6, 3));
    let q = to_f64(&unit_rows(&mut r, 1, 3));
    let labels: Vec<Label> = (0..6).map(|i| Label::from_anomalous(i < 2)).collect();
    // doubling the keys' logits equals halving tau
    let a = masked_softmax_retrieve(q.view(), (&keys * 2.0).view(), &labels, 1.0, None).unwrap();
    let b = masked_softmax_retrieve(q.view(), keys.view(), &labels, 0.5, None).unwrap();
    assert!((a[0][1] - b[0][1]).abs() < 1e-12);
}

#[test]
fn statistics_absent_without_anomalous_queries() {
    let mut r = rng(5);
    let grid = PatchGrid::new(2, 2, 4, 4).unwrap();
    let bank: MemoryBank = random_bank(&mut r, 4, 6, 6);
    let queries: Vec<_> = (0..3)
        .map(|i| random_record(&mut r, &i.to_string(), &grid, 4, false, true))
        .collect();
    let s = dataset_statistics(&queries, &grid, &bank, &RetrievalParams::default(), None).unwrap();
    assert_eq!(s.aq_ak, None);
    assert_eq!(s.margin_a, None);
    let nq_ak = s.nq_ak.unwrap();
    assert!((s.nq_nk.unwrap() - (1.0 - nq_ak)).abs() < 1e-12);
    let json = serde_json::to_value(s).unwrap();
    assert!(json.get("AqAk").is_none());
    assert!(json.get("NqAk").is_some());
}
