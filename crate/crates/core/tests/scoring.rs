mod common;

use common::{gate_fd, random_examples, random_model, rel_err, rng, tiny_config};
use hies_core::scoring::{
    ae_per_head, ae_sample, calibration_pass, his_per_head, hies_combine, minmax, minmax_normalize, score_model,
    HeadValues, Metric, NormScope, ScoreTable,
};
use hies_core::transformer::Architecture;
use hies_core::{HeadLayout, LossKind, Tensor};
use proptest::prelude::*;

#[test]
fn his_is_the_mean_absolute_gate_derivative() {
    let mut r = rng(1);
    for trial in 0..8 {
        let arch = if trial % 2 == 0 { Architecture::Standard } else { Architecture::LinearHead };
        let kind = if trial % 3 == 0 { LossKind::Binary } else { LossKind::Multiclass };
        let cfg = tiny_config(&mut r, arch, kind);
        let model = random_model(&mut r, cfg.clone());
        let calib = random_examples(&mut r, &cfg, 12, 2);
        let his = his_per_head(&model, &calib).unwrap();
        let ones = vec![1.0; cfg.total_heads()];
        for flat in 0..cfg.total_heads() {
            let fd: f64 = calib.iter().map(|ex| gate_fd(&model, ex, &ones, flat, 1e-5).abs()).sum::<f64>()
                / calib.len() as f64;
            let got = his.values()[flat];
            assert!(rel_err(got, fd) < 1e-4, "trial {trial} head {flat}: {got} vs {fd}");
        }
    }
}

#[test]
fn calibration_pass_is_consistent_with_per_head_means() {
    let mut r = rng(2);
    let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
    let model = random_model(&mut r, cfg.clone());
    let calib = random_examples(&mut r, &cfg, 10, 2);
    let stats = calibration_pass(&model, &calib, None).unwrap();
    let ae = ae_per_head(&model, &calib).unwrap();
    for flat in 0..cfg.total_heads() {
        let mean: f64 = stats.iter().map(|s| s.heads[flat].ae).sum::<f64>() / stats.len() as f64;
        assert!((mean - ae.values()[flat]).abs() < 1e-12);
        for s in &stats {
            assert!(s.heads[flat].act_sq_norm >= 0.0);
        }
    }
    let losses = model.example_losses(&calib, None).unwrap();
    for (s, l) in stats.iter().zip(losses) {
        assert!((s.loss - l).abs() < 1e-12);
    }
}

#[test]
fn uniform_attention_has_unit_entropy() {
    let mut r = rng(3);
    let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
    let mut model = random_model(&mut r, cfg.clone());
    for layer in &mut model.params.layers {
        layer.attn.w_q.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let calib = random_examples(&mut r, &cfg, 6, 2);
    for v in ae_per_head(&model, &calib).unwrap().values() {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn one_hot_rows_have_zero_entropy() {
    let t = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
    assert_eq!(ae_sample(&t), Some(0.0));
    assert_eq!(ae_sample(&Tensor::from_rows(&[vec![1.0]]).unwrap()), None);
}

#[test]
fn alpha_near_one_ranks_by_his() {
    let layout = HeadLayout::new(1, 4);
    let his = HeadValues::new(layout, vec![0.4, 0.1, 0.9, 0.3]).unwrap();
    let ae = HeadValues::new(layout, vec![0.2, 0.9, 0.5, 0.1]).unwrap();
    let t = ScoreTable::build(&his, &ae, 0.999, NormScope::Global, 4).unwrap();
    let hies = t.column(Metric::Hies);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| hies.values()[b].total_cmp(&hies.values()[a]));
    assert_eq!(order, vec![2, 0, 3, 1]);
}

#[test]
fn score_file_round_trips() {
    let mut r = rng(4);
    let cfg = tiny_config(&mut r, Architecture::Standard, LossKind::Multiclass);
    let model = random_model(&mut r, cfg.clone());
    let calib = random_examples(&mut r, &cfg, 8, 2);
    let table = score_model(&model, &calib, 0.3, NormScope::PerLayer).unwrap();
    let back = ScoreTable::from_jsonl(&table.to_jsonl().unwrap(), 0.3, NormScope::PerLayer).unwrap();
    assert_eq!(back.entries(), table.entries());
}

fn simplex_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, n), 1..n + 1).prop_map(|rows| {
            rows.into_iter()
                .map(|row| {
                    let s: f64 = row.iter().sum::<f64>() + 1e-12;
                    row.into_iter().map(|v| (v + 1e-12 / 12.0) / s).collect()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn attention_entropy_lies_in_unit_interval(rows in simplex_rows()) {
        let n = rows[0].len();
        let padded: Vec<Vec<f64>> = rows.into_iter().cycle().take(n).collect();
        let ae = ae_sample(&Tensor::from_rows(&padded).unwrap()).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ae), "ae = {}", ae);
    }

    #[test]
    fn minmax_spans_the_unit_interval(v in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let out = minmax(&v).unwrap();
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            prop_assert!(out.iter().any(|&x| x == 0.0) && out.iter().any(|&x| x == 1.0));
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        } else {
            prop_assert!(out.iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn per_layer_normalization_is_layerwise_global(
        layers in 1usize..4,
        heads in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let layout = HeadLayout::new(layers, heads);
        let v: Vec<f64> = (0..layout.total()).map(|_| r.gen_range(0.0..5.0)).collect();
        let hv = HeadValues::new(layout, v.clone()).unwrap();
        let per = minmax_normalize(&hv, NormScope::PerLayer).unwrap();
        for (l, chunk) in v.chunks(heads).enumerate() {
            let want = minmax(chunk).unwrap();
            prop_assert_eq!(&per.values()[l * heads..(l + 1) * heads], &want[..]);
        }
    }

    #[test]
    fn hies_stays_in_unit_interval(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..16),
        alpha in 0.0f64..1.0,
    ) {
        let (h, a): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let layout = HeadLayout::new(1, h.len());
        let out = hies_combine(
            &HeadValues::new(layout, h).unwrap(),
            &HeadValues::new(layout, a).unwrap(),
            alpha,
        ).unwrap();
        prop_assert!(out.values().iter().all(|x| (0.0..=1.0 + 1e-15).contains(x)));
    }
}

#[test]
fn alpha_outside_range_is_rejected() {
    let layout = HeadLayout::new(1, 2);
    let v = HeadValues::new(layout, vec![0.0, 1.0]).unwrap();
    assert!(hies_combine(&v, &v, 1.0).is_err());
    assert!(hies_combine(&v, &v, -0.1).is_err());
}
