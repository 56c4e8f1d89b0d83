use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hies_core::analysis::{ortho_diagnostic, ortho_jsonl};
use hies_core::harness::{
    alpha_sweep as run_alpha_sweep, evaluate_seed, export_reports, run_experiment, summarize, ExperimentConfig,
    SeedAlpha, SweepResult,
};
use hies_core::pruning::{baseline_mask, k_for_ratio, mask_from_scores, Criterion};
use hies_core::scoring::{score_model, ScoreTable};
use hies_core::transformer::{load_checkpoint, save_checkpoint, TrainReport};
use hies_core::{Error, Model};

use crate::{Common, DiagnoseArgs, PruneArgs, ScoreArgs, SweepArgs};

/// `flag`, else `HIES_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HIES_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("HIES_SEED={v:?} is not an unsigned integer")),
        Err(std::env::VarError::NotPresent) => Ok(fallback),
        Err(e) => bail!("HIES_SEED: {e}"),
    }
}

fn seed_overridden(flag: Option<u64>) -> bool {
    flag.is_some() || std::env::var_os("HIES_SEED").is_some()
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ExperimentConfig::desk_needle(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn write(path: PathBuf, body: &str) -> Result<()> {
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<(Model, Option<TrainReport>)> {
    require_file(path)?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn train(common: &Common) -> Result<bool> {
    let mut cfg = load_config(common.config.as_deref())?;
    let seed = resolve_seed(common.seed, cfg.seeds[0])?;
    prepare_out(&common.out)?;
    let data = cfg.datasets(seed)?;
    let (model, report) = cfg.train_model(seed, &data.train)?;
    let preds = model.predict(&data.eval, None, 64)?;
    let acc = hies_core::harness::accuracy(&preds, &data.eval)?;
    save_checkpoint(&model, Some(&report), &common.out.join("model.json"))?;
    write(
        common.out.join("train_report.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    cfg.seeds = vec![seed];
    write(common.out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    println!(
        "seed {seed}: loss {:.6} -> {:.6} over {} steps, eval accuracy {acc:.4}",
        report.initial_loss, report.final_loss, report.steps
    );
    Ok(true)
}

pub fn score(a: &ScoreArgs) -> Result<bool> {
    let cfg = load_config(a.common.config.as_deref())?;
    let (model, _) = load_model(&a.model)?;
    let seed = resolve_seed(a.common.seed, model.config.seed)?;
    prepare_out(&a.common.out)?;
    let data = cfg.datasets(seed)?;
    let table = score_model(&model, &data.calib, a.alpha, a.scope.into())?;
    let files = table.write_all(&a.common.out)?;
    println!("scored {} heads on {} calibration examples; wrote {} files", table.entries().len(), data.calib.len(), files.len());
    Ok(true)
}

pub fn prune(a: &PruneArgs) -> Result<bool> {
    require_file(&a.scores)?;
    let criterion: Criterion = a.criterion.into();
    let model = match (&a.model, criterion) {
        (Some(p), _) => Some(load_model(p)?.0),
        (None, Criterion::L2) => bail!("--criterion l2 needs --model"),
        (None, _) => None,
    };
    prepare_out(&a.out)?;
    let text = std::fs::read_to_string(&a.scores)?;
    let table = ScoreTable::from_jsonl(&text, a.alpha, a.scope.into())?;
    let k = k_for_ratio(a.ratio, table.layout().total())?;
    let seed = resolve_seed(a.seed, 0)?;
    let mask = match &model {
        Some(m) => baseline_mask(criterion, m, &table, k, seed)?,
        None => mask_from_scores(criterion, &table, k, seed)?,
    };
    write(a.out.join("mask.json"), &(mask.to_json()? + "\n"))?;
    println!(
        "{criterion}: retained {} of {} heads (rho = {})",
        mask.k(),
        table.layout().total(),
        mask.rho()
    );
    Ok(true)
}

pub fn diagnose(a: &DiagnoseArgs) -> Result<bool> {
    let cfg = load_config(a.common.config.as_deref())?;
    let (model, _) = load_model(&a.model)?;
    let seed = resolve_seed(a.common.seed, model.config.seed)?;
    prepare_out(&a.common.out)?;
    let data = cfg.datasets(seed)?;
    let diags = ortho_diagnostic(&model, &data.calib, !a.no_projection)?;
    write(a.common.out.join("ortho.jsonl"), &ortho_jsonl(&diags)?)?;
    for d in &diags {
        println!(
            "L{}H{}: E<u,-v> = {:.6e}, tr Cov = {:.6e}, <Eu,Ev> = {:.6e}",
            d.layer, d.head, d.expected_inner, d.cov_trace, d.mean_dot
        );
    }
    Ok(true)
}

fn trained(report: Option<TrainReport>) -> Result<TrainReport> {
    report.ok_or_else(|| {
        Error::Config("checkpoint carries no training report; sweeps need a trained model".into()).into()
    })
}

pub fn sweep(a: &SweepArgs) -> Result<bool> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    let loaded = a.model.as_deref().map(load_model).transpose()?;
    prepare_out(&a.common.out)?;
    let (sweep, alphas, tables): (SweepResult, Vec<SeedAlpha>, Vec<(u64, ScoreTable)>) = match loaded {
        Some((model, report)) => {
            let report = trained(report)?;
            let seed = resolve_seed(a.common.seed, model.config.seed)?;
            cfg.seeds = vec![seed];
            let data = cfg.datasets(seed)?;
            let (run, result) = evaluate_seed(&cfg, seed, model, report, &data)?;
            (result, run.alpha_sweep.into_iter().collect(), vec![(seed, run.scores)])
        }
        None => {
            if seed_overridden(a.common.seed) {
                cfg.seeds = vec![resolve_seed(a.common.seed, 0)?];
            }
            let result = run_experiment(&cfg)?;
            let alphas = result.alpha_sweeps();
            let tables = result.runs.iter().map(|r| (r.seed, r.scores.clone())).collect();
            (result.sweep, alphas, tables)
        }
    };
    let table_refs: Vec<(u64, &ScoreTable)> = tables.iter().map(|(s, t)| (*s, t)).collect();
    let files = export_reports(&sweep, &alphas, &table_refs, &a.common.out)?;
    write(a.common.out.join("config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    for c in summarize(&sweep) {
        println!(
            "{:<7} rho {:.4}: accuracy {:.4}, stability {:.4}",
            c.criterion.name(),
            c.ratio,
            c.mean_accuracy,
            c.mean_stability
        );
    }
    println!("wrote {} files to {}", files.len() + 1, a.common.out.display());
    Ok(true)
}

pub fn alpha_sweep(a: &SweepArgs) -> Result<bool> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if cfg.alpha_grid.is_empty() {
        return Err(Error::Config("alpha_grid is empty".into()).into());
    }
    let loaded = a.model.as_deref().map(load_model).transpose()?;
    prepare_out(&a.common.out)?;
    let mut out = Vec::new();
    let runs: Vec<(u64, Option<Model>)> = match loaded {
        Some((model, _)) => vec![(resolve_seed(a.common.seed, model.config.seed)?, Some(model))],
        None => {
            if seed_overridden(a.common.seed) {
                cfg.seeds = vec![resolve_seed(a.common.seed, 0)?];
            }
            cfg.seeds.iter().map(|&s| (s, None)).collect()
        }
    };
    for (seed, model) in runs {
        let data = cfg.datasets(seed)?;
        let model = match model {
            Some(m) => m,
            None => cfg.train_model(seed, &data.train)?.0,
        };
        let scores = score_model(&model, &data.calib, cfg.alpha, cfg.scope)?;
        let sweep = run_alpha_sweep(
            &model,
            &scores,
            &data.calib,
            &cfg.alpha_grid,
            &cfg.ratios,
            cfg.wauc_weights.as_deref(),
        )?;
        println!(
            "seed {seed}: best alpha {}, median {}, worst {}",
            sweep.best, sweep.median, sweep.worst
        );
        out.push(SeedAlpha { seed, sweep });
    }
    let mut csv = String::from("seed,alpha,wauc");
    for r in &cfg.ratios {
        csv.push_str(&format!(",acc_r{r}"));
    }
    csv.push('\n');
    for s in &out {
        for p in &s.sweep.points {
            csv.push_str(&format!("{},{},{}", s.seed, p.alpha, p.wauc));
            for acc in &p.accuracies {
                csv.push_str(&format!(",{acc}"));
            }
            csv.push('\n');
        }
    }
    write(a.common.out.join("alpha_sweep.csv"), &csv)?;
    write(a.common.out.join("alpha_sweep.json"), &(serde_json::to_string_pretty(&out)? + "\n"))?;
    Ok(true)
}
