use anyhow::Result;
use hies_core::analysis::{
    bound_reports_csv, entropy_tv_check, gap_constant, logit_hessian_norm, op_ineq_check, power_iteration_trace,
    quad_ratio, verify_loss_bound, BoundReport, CurvatureMode, GapConfig, NormMode, QuadRatio,
};
use hies_core::harness::toy_linear_head;
use hies_core::pruning::{k_for_ratio, select_topk, PruneMask};
use hies_core::scoring::{ae_per_head, his_per_head};
use hies_core::{Example, LossKind, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::{load_config, load_model, resolve_seed};
use crate::{Suite, VerifyArgs};

/// Simplex point with a random amount of concentration; sometimes a vertex.
fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if rng.gen_bool(0.05) {
        let mut p = vec![0.0; n];
        p[rng.gen_range(0..n)] = 1.0;
        return p;
    }
    let power = [1.0, 3.0, 8.0][rng.gen_range(0..3)];
    let x: Vec<f64> = (0..n)
        .map(|_| (-(1.0 - rng.gen::<f64>()).ln()).powf(power))
        .collect();
    let s: f64 = x.iter().sum();
    x.into_iter().map(|v| v / s).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sizes agree")
}

fn model_and_calib(args: &VerifyArgs, seed: u64) -> Result<(Model, Vec<Example>)> {
    match &args.model {
        Some(path) => {
            let cfg = load_config(args.config.as_deref())?;
            let (model, _) = load_model(path)?;
            let calib = cfg.datasets(model.config.seed)?.calib;
            Ok((model, calib))
        }
        None => {
            let (model, _, calib) = toy_linear_head(seed)?;
            Ok((model, calib))
        }
    }
}

fn all_masks(model: &Model, trials: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PruneMask>> {
    let layout = model.config.layout();
    let total = layout.total();
    if total <= 12 {
        (0..1u32 << total)
            .map(|bits| Ok(PruneMask::from_retained(layout, (0..total).map(|h| bits >> h & 1 == 1).collect())?))
            .collect()
    } else {
        (0..trials)
            .map(|_| Ok(PruneMask::from_retained(layout, (0..total).map(|_| rng.gen_bool(0.5)).collect())?))
            .collect()
    }
}

fn suite_reports(args: &VerifyArgs, seed: u64) -> Result<Vec<BoundReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match args.suite {
        Suite::EntropyTv => {
            for _ in 0..args.trials {
                let n = rng.gen_range(2..=64);
                let p = random_simplex(&mut rng, n);
                let q = random_simplex(&mut rng, n);
                out.push(entropy_tv_check(&p, &q)?);
            }
        }
        Suite::Curvature => {
            for _ in 0..args.trials {
                let c = rng.gen_range(2..=10);
                let p = random_simplex(&mut rng, c);
                out.push(BoundReport::new(
                    "curvature_multiclass",
                    logit_hessian_norm(&p, LossKind::Multiclass)?,
                    0.5,
                    format!("C={c}"),
                ));
                let s: f64 = rng.gen();
                out.push(BoundReport::new(
                    "curvature_binary",
                    logit_hessian_norm(&[1.0 - s, s], LossKind::Binary)?,
                    0.25,
                    "C=2",
                ));
            }
            let tight = logit_hessian_norm(&[0.5, 0.5], LossKind::Multiclass)?;
            out.push(BoundReport::new("curvature_tight", 0.5, tight, "p=(1/2,1/2)"));
        }
        Suite::PowerIter => {
            for _ in 0..args.trials {
                let (r, c) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
                let m = random_matrix(&mut rng, r, c);
                let trace = power_iteration_trace(&m, 200, rng.gen())?;
                let drop = trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
                let ctx = format!("{r}x{c}");
                out.push(BoundReport::new("power_iter_monotone", drop, 0.0, ctx.clone()));
                out.push(BoundReport::new(
                    "power_iter_frobenius",
                    *trace.last().expect("nonempty"),
                    m.sq_norm().sqrt(),
                    ctx,
                ));
            }
        }
        Suite::OpIneq => {
            for _ in 0..args.trials {
                let n = rng.gen_range(2..=64);
                let dv = rng.gen_range(1..=16);
                let a = random_simplex(&mut rng, n);
                let b = random_simplex(&mut rng, n);
                let v = random_matrix(&mut rng, n, dv).scaled(rng.gen_range(0.1..10.0));
                out.push(op_ineq_check(&a, &b, &v)?);
            }
        }
        Suite::LossBound => {
            let (model, calib) = model_and_calib(args, seed)?;
            let modes = match model.config.loss_kind {
                LossKind::Binary => [CurvatureMode::BinaryPlugin, CurvatureMode::Exact],
                LossKind::Multiclass => [CurvatureMode::MulticlassPlugin, CurvatureMode::Exact],
            };
            for mask in all_masks(&model, args.trials, &mut rng)? {
                for mode in modes {
                    let full = verify_loss_bound(&model, &mask, &calib, mode, NormMode::Full)?;
                    let block = verify_loss_bound(&model, &mask, &calib, mode, NormMode::Blockwise)?;
                    let tighter = BoundReport::new("blockwise_le_full", block.rhs, full.rhs, full.context.clone());
                    out.extend([full, block, tighter]);
                }
            }
        }
        Suite::Gap => {
            let (model, calib) = model_and_calib(args, seed)?;
            let ae = ae_per_head(&model, &calib)?;
            let k = k_for_ratio(args.ratio, ae.len())?;
            let prune_high = select_topk(&ae.map(|v| -v), k)?;
            let prune_low = select_topk(&ae, k)?;
            let cfg = GapConfig::default();
            let high = gap_constant(&model, &prune_high, &calib, None, &cfg)?;
            let low = gap_constant(&model, &prune_low, &calib, None, &cfg)?;
            out.push(BoundReport::new(
                "gap_monotone",
                high.bound,
                low.bound,
                format!("rho={};c_ae={}", prune_high.rho(), high.c_ae),
            ));
        }
        Suite::Quad => {
            let (model, calib) = model_and_calib(args, seed)?;
            let his = his_per_head(&model, &calib)?;
            let mask = select_topk(&his, k_for_ratio(args.ratio, his.len())?)?;
            match quad_ratio(&model, &calib, &mask, model.config.loss_kind)? {
                QuadRatio::Empty => out.push(BoundReport::new("quad_ratio_analytic", 0.0, 0.0, "empty")),
                QuadRatio::Ratio(q) => {
                    let ctx = format!("rho={};g={}", mask.rho(), q.g);
                    out.push(BoundReport::new("quad_ratio_plugin", q.empirical_ratio, q.plugin_ratio, ctx.clone()));
                    out.push(BoundReport::new("quad_ratio_analytic", q.empirical_ratio, q.analytic_bound, ctx));
                }
            }
        }
    }
    Ok(out)
}

pub fn run(args: &VerifyArgs) -> Result<bool> {
    let seed = resolve_seed(args.seed, 0)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
    }
    let reports = suite_reports(args, seed)?;
    let failed: Vec<&BoundReport> = reports.iter().filter(|r| !r.holds).collect();
    let min_slack = reports.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    println!(
        "{:?}: {}/{} hold, min slack {min_slack:.6e}",
        args.suite,
        reports.len() - failed.len(),
        reports.len()
    );
    for r in failed.iter().take(10) {
        println!("  violated {}: lhs {} > rhs {} ({})", r.bound_name, r.lhs, r.rhs, r.context);
    }
    if let Some(out) = &args.out {
        std::fs::write(out.join("bounds.csv"), bound_reports_csv(&reports))?;
    }
    Ok(failed.is_empty())
}
