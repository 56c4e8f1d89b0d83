mod common;

use std::collections::HashMap;

use common::{rng, small_needle};
use hies_core::harness::{
    accuracy, alpha_sweep, curves_csv, export_reports, gen_task, run_experiment, run_sweep, stability, wauc,
    SweepConfig, SweepResult, SweepRow, SyntheticTask, TaskKind,
};
use hies_core::pruning::{mask_from_scores, Criterion, PruneMask};
use hies_core::scoring::{score_model, Metric};
use hies_core::{Error, HeadLayout};
use rand::Rng;

#[test]
fn generated_labels_follow_the_rule_and_are_balanced() {
    for (kind, classes) in [(TaskKind::Majority, 3), (TaskKind::Needle, 4), (TaskKind::Parity, 2)] {
        let spec = SyntheticTask {
            kind,
            vocab_size: 16,
            min_len: 4,
            max_len: 12,
            num_classes: classes,
            distractors: 0,
            seed: 11,
        };
        let (train, eval) = gen_task(&spec, 2000, 100).unwrap();
        let mut counts = vec![0usize; classes];
        for ex in train.iter().chain(&eval) {
            assert_eq!(spec.label_of(&ex.tokens), Some(ex.label), "{kind:?}");
            assert!(ex.tokens.len() <= spec.max_seq_len());
            counts[ex.label] += 1;
        }
        let share = 1.0 / classes as f64;
        for c in counts {
            assert!((c as f64 / 2100.0 - share).abs() <= 0.05, "{kind:?}");
        }
        assert_eq!(gen_task(&spec, 2000, 100).unwrap(), (train, eval));
    }
}

#[test]
fn infeasible_tasks_are_config_errors() {
    let spec = SyntheticTask {
        kind: TaskKind::Parity,
        vocab_size: 16,
        min_len: 4,
        max_len: 12,
        num_classes: 3,
        distractors: 0,
        seed: 0,
    };
    assert!(matches!(gen_task(&spec, 10, 10), Err(Error::Config(_))));
    let tiny_vocab = SyntheticTask { kind: TaskKind::Majority, vocab_size: 5, ..spec };
    assert!(matches!(gen_task(&tiny_vocab, 10, 10), Err(Error::Config(_))));
}

#[test]
fn independent_predictions_agree_half_the_time() {
    let mut r = rng(1);
    let a: Vec<usize> = (0..2000).map(|_| r.gen_range(0..2)).collect();
    let b: Vec<usize> = (0..2000).map(|_| r.gen_range(0..2)).collect();
    let s = stability(&a, &b).unwrap();
    assert!((s - 0.5).abs() < 0.1, "{s}");
    assert_eq!(stability(&a, &a).unwrap(), 1.0);
}

#[test]
fn wauc_with_uniform_weights_is_the_mean() {
    assert!((wauc(&[0.2, 0.4, 0.9], None).unwrap() - 0.5).abs() < 1e-15);
    assert!((wauc(&[0.2, 0.4], Some(&[3.0, 1.0])).unwrap() - 0.25).abs() < 1e-15);
    assert!(wauc(&[], None).is_err());
    assert!(wauc(&[0.5], Some(&[0.0])).is_err());
}

#[test]
fn sweep_properties_on_a_trained_model() {
    let cfg = small_needle();
    let data = cfg.datasets(0).unwrap();
    let (model, report) = cfg.train_model(0, &data.train).unwrap();
    let scores = score_model(&model, &data.calib, 0.5, cfg.scope).unwrap();
    let sweep_cfg = SweepConfig { criteria: Criterion::ALL.to_vec(), ratios: cfg.ratios.clone(), seeds: vec![0, 1] };

    assert!(matches!(
        run_sweep(&model, None, &scores, &data.eval, &sweep_cfg),
        Err(Error::Config(_))
    ));

    let result = run_sweep(&model, Some(&report), &scores, &data.eval, &sweep_cfg).unwrap();
    assert_eq!(result.rows.len(), 2 * 5 * 4);
    let reference = model.predict(&data.eval, None, 64).unwrap();
    let ref_acc = accuracy(&reference, &data.eval).unwrap();
    let mut random_risk: HashMap<(u64, u64), f64> = HashMap::new();
    for row in &result.rows {
        assert!((0.0..=1.0).contains(&row.accuracy) && (0.0..=1.0).contains(&row.stability));
        if row.ratio == 0.0 {
            assert_eq!(row.accuracy, ref_acc);
            assert_eq!(row.stability, 1.0);
            assert_eq!(row.mask.k(), 8);
        }
        if row.criterion == Criterion::Random {
            random_risk.insert((row.seed, row.ratio.to_bits()), row.risk);
        }
    }
    for row in result.rows.iter().filter(|r| r.criterion == Criterion::Hies) {
        assert!(row.risk <= random_risk[&(row.seed, row.ratio.to_bits())] + 1e-12);
    }
    let mut order = result.rows.iter().map(|r| (r.seed, r.criterion, r.ratio.to_bits()));
    let first = order.next().unwrap();
    assert!(order.try_fold(first, |prev, cur| (prev < cur).then_some(cur)).is_some());

    let bad = SweepConfig { ratios: vec![0.5, 0.25], ..sweep_cfg.clone() };
    assert!(matches!(run_sweep(&model, Some(&report), &scores, &data.eval, &bad), Err(Error::Config(_))));
}

#[test]
fn alpha_sweep_edge_cases() {
    let cfg = small_needle();
    let data = cfg.datasets(1).unwrap();
    let (model, _) = cfg.train_model(1, &data.train).unwrap();
    let scores = score_model(&model, &data.calib, 0.5, cfg.scope).unwrap();

    let single = alpha_sweep(&model, &scores, &data.calib, &[0.3], &cfg.ratios, None).unwrap();
    assert_eq!((single.best, single.median, single.worst), (0.3, 0.3, 0.3));
    assert!(alpha_sweep(&model, &scores, &data.calib, &[], &cfg.ratios, None).is_err());
    assert!(alpha_sweep(&model, &scores, &data.calib, &[1.0], &cfg.ratios, None).is_err());

    let sweep = alpha_sweep(&model, &scores, &data.calib, &cfg.alpha_grid, &cfg.ratios, None).unwrap();
    let best = sweep.points.iter().map(|p| p.wauc).fold(f64::NEG_INFINITY, f64::max);
    let chosen = sweep.points.iter().find(|p| p.alpha == sweep.best).unwrap();
    assert_eq!(chosen.wauc, best);
    assert!(sweep.points.iter().filter(|p| p.wauc == best).all(|p| p.alpha >= sweep.best));

    // As alpha approaches 1 the HIES ranking becomes the HIS ranking.
    let near_one = scores.with_alpha(1.0 - 1e-12).unwrap();
    let his = scores.column(Metric::HisHat);
    let mut gaps: Vec<f64> = his.values().to_vec();
    gaps.sort_by(f64::total_cmp);
    if gaps.windows(2).all(|w| w[1] - w[0] > 1e-9) {
        for k in 0..=8 {
            assert_eq!(
                mask_from_scores(Criterion::Hies, &near_one, k, 0).unwrap(),
                mask_from_scores(Criterion::His, &near_one, k, 0).unwrap()
            );
        }
    }
}

#[test]
fn export_writes_curves_masks_and_summary() {
    let layout = HeadLayout::new(2, 2);
    let mask = PruneMask::from_retained(layout, vec![true, false, false, true]).unwrap();
    let result = SweepResult {
        rows: vec![SweepRow {
            criterion: Criterion::Hies,
            ratio: 0.5,
            seed: 3,
            accuracy: 0.75,
            stability: 0.5,
            risk: 0.25,
            mask: mask.clone(),
        }],
    };
    let dir = tempfile::tempdir().unwrap();
    let files = export_reports(&result, &[], &[], dir.path()).unwrap();
    assert_eq!(files.len(), 3);
    let curves = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves, curves_csv(&result));
    assert!(curves.starts_with("criterion,ratio,seed,accuracy,stability,risk,k\n"));
    let mask_path = files.iter().find(|p| p.to_string_lossy().contains("mask_")).unwrap();
    let back = PruneMask::from_heatmap_csv(&std::fs::read_to_string(mask_path).unwrap()).unwrap();
    assert_eq!(back, mask);
    assert!(dir.path().join("summary.json").is_file());
    assert!(export_reports(&SweepResult::default(), &[], &[], dir.path()).is_err());
}

#[test]
fn experiments_are_deterministic() {
    let mut cfg = small_needle();
    cfg.seeds = vec![2];
    cfg.n_train = 300;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(curves_csv(&a.sweep), curves_csv(&b.sweep));
    assert_eq!(a.runs[0].model, b.runs[0].model);
    assert_eq!(a.alpha_sweeps(), b.alpha_sweeps());
}
