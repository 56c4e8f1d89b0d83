mod common;

use common::{random_examples, random_model, rng, tiny_config};
use hies_core::pruning::{
    apply_mask, baseline_mask, head_l2_norms, k_for_ratio, mask_from_scores, random_mask, risk, select_topk, Criterion,
    PruneMask,
};
use hies_core::scoring::{score_model, HeadValues, Metric, NormScope};
use hies_core::transformer::Architecture;
use hies_core::{HeadLayout, LossKind};
use proptest::prelude::*;
use rand::Rng;

/// Smallest risk over every mask that retains exactly `k` heads.
fn brute_force_min_risk(scores: &[f64], k: usize) -> f64 {
    let n = scores.len();
    (0u32..1 << n)
        .filter(|bits| bits.count_ones() as usize == k)
        .map(|bits| (0..n).filter(|i| bits >> i & 1 == 0).map(|i| scores[i]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn topk_attains_the_exhaustive_minimum_risk() {
    let mut r = rng(1);
    for _ in 0..200 {
        let n = r.gen_range(1..=12);
        let ints = r.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if ints { r.gen_range(0..4) as f64 } else { r.gen_range(-1.0..1.0) })
            .collect();
        let layout = HeadLayout::new(1, n);
        let hv = HeadValues::new(layout, scores.clone()).unwrap();
        for k in 0..=n {
            let mask = select_topk(&hv, k).unwrap();
            assert_eq!(mask.k(), k);
            let got = risk(&hv, &mask).unwrap().0;
            let best = brute_force_min_risk(&scores, k);
            assert!((got - best).abs() < 1e-12, "n={n} k={k}: {got} vs {best}");
            for i in mask.pruned_ids() {
                for j in mask.retained_ids() {
                    let (si, sj) = (scores[i.head], scores[j.head]);
                    assert!(sj > si || (sj == si && j.head < i.head));
                }
            }
        }
    }
}

#[test]
fn risk_decreases_as_more_heads_are_kept() {
    let mut r = rng(2);
    for _ in 0..100 {
        let n = r.gen_range(1..=20);
        let hv = HeadValues::new(HeadLayout::new(1, n), (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let risks: Vec<f64> = (0..=n).map(|k| risk(&hv, &select_topk(&hv, k).unwrap()).unwrap().0).collect();
        assert!(risks.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(risks[n], 0.0);
    }
}

#[test]
fn ratio_rounding_uses_ties_to_even() {
    assert_eq!(k_for_ratio(0.5, 8).unwrap(), 4);
    assert_eq!(k_for_ratio(0.5, 5).unwrap(), 2);
    assert_eq!(k_for_ratio(0.5, 7).unwrap(), 4);
    assert_eq!(k_for_ratio(0.0, 9).unwrap(), 9);
    assert_eq!(k_for_ratio(1.0, 9).unwrap(), 0);
    assert!(k_for_ratio(1.5, 9).is_err());
}

proptest! {
    #[test]
    fn selection_commutes_with_head_permutations(
        raw in prop::collection::btree_set(0u32..10_000, 1..16),
        seed in any::<u64>(),
        kf in 0.0f64..=1.0,
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let scores: Vec<f64> = raw.into_iter().map(|v| v as f64 / 10.0).collect();
        let n = scores.len();
        let k = (kf * n as f64).floor() as usize;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let layout = HeadLayout::new(1, n);
        let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
        let a = select_topk(&HeadValues::new(layout, scores).unwrap(), k).unwrap();
        let b = select_topk(&HeadValues::new(layout, permuted).unwrap(), k).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(b.retained()[i], a.retained()[p]);
        }
    }

    #[test]
    fn mask_json_round_trips(bits in prop::collection::vec(any::<bool>(), 1..24)) {
        let layout = HeadLayout::new(1, bits.len());
        let mask = PruneMask::from_retained(layout, bits).unwrap();
        prop_assert_eq!(PruneMask::from_json(&mask.to_json().unwrap(), layout).unwrap(), mask.clone());
        prop_assert_eq!(PruneMask::from_heatmap_csv(&mask.heatmap_csv()).unwrap(), mask);
    }
}

#[test]
fn l2_prunes_a_zeroed_head_first() {
    let mut r = rng(3);
    for _ in 0..10 {
        let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
        if cfg.total_heads() < 2 {
            continue;
        }
        let mut model = random_model(&mut r, cfg.clone());
        let flat = r.gen_range(0..cfg.total_heads());
        let id = cfg.layout().id(flat);
        let a = &mut model.params.layers[id.layer].attn;
        for i in 0..a.w_q.rows() {
            for c in id.head * cfg.d_k..(id.head + 1) * cfg.d_k {
                a.w_q.set(i, c, 0.0);
                a.w_k.set(i, c, 0.0);
            }
            for c in id.head * cfg.d_v..(id.head + 1) * cfg.d_v {
                a.w_v.set(i, c, 0.0);
            }
        }
        for row in id.head * cfg.d_v..(id.head + 1) * cfg.d_v {
            a.w_o.row_mut(row).iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(head_l2_norms(&model).values()[flat], 0.0);
        let calib = random_examples(&mut r, &cfg, 4, 2);
        let scores = score_model(&model, &calib, 0.5, NormScope::Global).unwrap();
        let mask = baseline_mask(Criterion::L2, &model, &scores, cfg.total_heads() - 1, 0).unwrap();
        assert_eq!(mask.pruned_ids(), vec![id]);
    }
}

#[test]
fn criteria_select_from_their_columns() {
    let mut r = rng(4);
    let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
    let model = random_model(&mut r, cfg.clone());
    let calib = random_examples(&mut r, &cfg, 8, 2);
    let scores = score_model(&model, &calib, 0.5, NormScope::Global).unwrap();
    for k in 0..=cfg.total_heads() {
        assert_eq!(
            mask_from_scores(Criterion::His, &scores, k, 0).unwrap(),
            select_topk(&scores.column(Metric::His), k).unwrap()
        );
        assert_eq!(
            mask_from_scores(Criterion::Hies, &scores, k, 0).unwrap(),
            select_topk(&scores.column(Metric::Hies), k).unwrap()
        );
        assert_eq!(
            mask_from_scores(Criterion::Ad, &scores, k, 0).unwrap(),
            select_topk(&scores.column(Metric::Ae), k).unwrap()
        );
        let rm = mask_from_scores(Criterion::Random, &scores, k, 9).unwrap();
        assert_eq!(rm.k(), k);
        assert_eq!(rm, random_mask(cfg.layout(), k, 9).unwrap());
    }
    assert!(mask_from_scores(Criterion::L2, &scores, 1, 0).is_err());
}

#[test]
fn masked_model_is_gating_and_restriction_is_and() {
    let mut r = rng(5);
    for _ in 0..10 {
        let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
        let model = random_model(&mut r, cfg.clone());
        let batch = random_examples(&mut r, &cfg, 5, 1);
        let total = cfg.total_heads();
        let m1 = PruneMask::from_retained(cfg.layout(), (0..total).map(|_| r.gen_bool(0.6)).collect()).unwrap();
        let m2 = PruneMask::from_retained(cfg.layout(), (0..total).map(|_| r.gen_bool(0.6)).collect()).unwrap();
        let masked = apply_mask(&model, &m1).unwrap();
        let a = masked.forward(&batch).unwrap().logits().clone();
        let b = model.forward(&batch, Some(&m1.gates())).unwrap().logits().clone();
        assert_eq!(a, b);
        let both = m1.and(&m2).unwrap();
        let c = masked.restrict(&m2).unwrap().forward(&batch).unwrap().logits().clone();
        let d = apply_mask(&model, &both).unwrap().forward(&batch).unwrap().logits().clone();
        assert_eq!(c, d);
        for i in 0..total {
            assert_eq!(both.retained()[i], m1.retained()[i] && m2.retained()[i]);
        }
    }
}

#[test]
fn budget_and_layout_errors() {
    let layout = HeadLayout::new(2, 2);
    let hv = HeadValues::new(layout, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!(select_topk(&hv, 5).is_err());
    let other = PruneMask::keep_all(HeadLayout::new(1, 4));
    assert!(risk(&hv, &other).is_err());
    assert_eq!(risk(&hv, &PruneMask::keep_all(layout)).unwrap().0.to_bits(), 0f64.to_bits());
}
