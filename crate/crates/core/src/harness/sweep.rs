use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::{baseline_mask, k_for_ratio, risk, Criterion, PruneMask};
use crate::scoring::{Metric, ScoreTable};
use crate::transformer::{Example, Model, TrainReport};

const EVAL_BATCH: usize = 64;

/// Fraction of predictions equal to the labels.
pub fn accuracy(preds: &[usize], examples: &[Example]) -> Result<f64> {
    if examples.is_empty() || preds.len() != examples.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} examples",
            preds.len(),
            examples.len()
        )));
    }
    Ok(preds.iter().zip(examples).filter(|(p, e)| **p == e.label).count() as f64 / examples.len() as f64)
}

/// Fraction of examples on which the pruned model predicts the same class as
/// the unpruned reference.
pub fn stability(pruned: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("stability needs a nonempty evaluation set".into()));
    }
    if pruned.len() != reference.len() {
        return Err(Error::Input(format!(
            "{} pruned predictions for {} reference predictions",
            pruned.len(),
            reference.len()
        )));
    }
    Ok(pruned.iter().zip(reference).filter(|(a, b)| a == b).count() as f64 / reference.len() as f64)
}

/// One evaluated mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub criterion: Criterion,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub stability: f64,
    /// Summed HIES of the pruned heads.
    pub risk: f64,
    pub mask: PruneMask,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Ordered by seed, then criterion, then ratio.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn extend(&mut self, other: SweepResult) {
        self.rows.extend(other.rows);
    }

    /// Mean accuracy and stability over seeds for one cell.
    pub fn mean_at(&self, criterion: Criterion, ratio: f64) -> Option<(f64, f64)> {
        let cell: Vec<&SweepRow> = self
            .rows
            .iter()
            .filter(|r| r.criterion == criterion && r.ratio == ratio)
            .collect();
        if cell.is_empty() {
            return None;
        }
        let n = cell.len() as f64;
        Some((
            cell.iter().map(|r| r.accuracy).sum::<f64>() / n,
            cell.iter().map(|r| r.stability).sum::<f64>() / n,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub criteria: Vec<Criterion>,
    /// Pruning ratios in `(0, 1)`, strictly increasing. Ratio 0 is always
    /// evaluated as an anchor.
    pub ratios: Vec<f64>,
    /// Seeds for the random baseline; one row per seed for every criterion.
    pub seeds: Vec<u64>,
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.is_empty() {
        return Err(Error::Config("no pruning ratios".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::Config(format!("pruning ratio {r} outside (0, 1)")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("pruning ratios must be strictly increasing".into()));
    }
    Ok(())
}

/// Accuracy and stability of every `(criterion, ratio, seed)` mask on `eval`.
/// `trained` is the report of the training run that produced `model`; sweeps
/// over untrained models are rejected.
pub fn run_sweep(
    model: &Model,
    trained: Option<&TrainReport>,
    scores: &ScoreTable,
    eval: &[Example],
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    if trained.is_none() {
        return Err(Error::Config("sweeps need a trained model".into()));
    }
    check_ratios(&cfg.ratios)?;
    if cfg.criteria.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("sweeps need at least one criterion and one seed".into()));
    }
    if eval.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let reference = model.predict(eval, None, EVAL_BATCH)?;
    let hies = scores.column(Metric::Hies);
    let total = model.config.total_heads();

    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &criterion in &cfg.criteria {
            for ratio in std::iter::once(0.0).chain(cfg.ratios.iter().copied()) {
                cells.push((seed, criterion, ratio));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(seed, criterion, ratio)| {
            let k = k_for_ratio(ratio, total)?;
            let mask = baseline_mask(criterion, model, scores, k, seed)?;
            let preds = model.predict(eval, Some(&mask.gates()), EVAL_BATCH)?;
            Ok(SweepRow {
                criterion,
                ratio,
                seed,
                accuracy: accuracy(&preds, eval)?,
                stability: stability(&preds, &reference)?,
                risk: risk(&hies, &mask)?.0,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { rows })
}

/// `sum_i w_i acc_i` with `w` normalized to sum to one; `None` means uniform.
pub fn wauc(accuracies: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::Config("wAUC over an empty ratio set".into()));
    }
    let uniform = vec![1.0; accuracies.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != accuracies.len() || w.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Config("wAUC weights must be nonnegative, one per ratio".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("wAUC weights sum to zero".into()));
    }
    Ok(accuracies.iter().zip(w).map(|(a, x)| a * x).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    /// HIES accuracy at each ratio.
    pub accuracies: Vec<f64>,
    pub wauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub ratios: Vec<f64>,
    pub points: Vec<AlphaPoint>,
    /// Largest wAUC; ties go to the smaller alpha.
    pub best: f64,
    pub median: f64,
    pub worst: f64,
}

/// HIES accuracy curve and wAUC for each alpha in `grid`, evaluated on
/// `validation`.
pub fn alpha_sweep(
    model: &Model,
    scores: &ScoreTable,
    validation: &[Example],
    grid: &[f64],
    ratios: &[f64],
    weights: Option<&[f64]>,
) -> Result<AlphaSweep> {
    if grid.is_empty() {
        return Err(Error::Config("alpha grid is empty".into()));
    }
    if let Some(a) = grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1)")));
    }
    check_ratios(ratios)?;
    if validation.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let total = model.config.total_heads();
    let points = grid
        .par_iter()
        .map(|&alpha| {
            let table = scores.with_alpha(alpha)?;
            let accuracies = ratios
                .iter()
                .map(|&r| {
                    let mask = baseline_mask(Criterion::Hies, model, &table, k_for_ratio(r, total)?, 0)?;
                    accuracy(&model.predict(validation, Some(&mask.gates()), EVAL_BATCH)?, validation)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AlphaPoint {
                alpha,
                wauc: wauc(&accuracies, weights)?,
                accuracies,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (best, median, worst) = rank_alphas(&points);
    Ok(AlphaSweep {
        ratios: ratios.to_vec(),
        points,
        best,
        median,
        worst,
    })
}

/// Best, median and worst alpha by wAUC; ties rank the smaller alpha higher.
fn rank_alphas(points: &[AlphaPoint]) -> (f64, f64, f64) {
    let mut order: Vec<&AlphaPoint> = points.iter().collect();
    order.sort_by(|a, b| b.wauc.total_cmp(&a.wauc).then(a.alpha.total_cmp(&b.alpha)));
    (
        order[0].alpha,
        order[(order.len() - 1) / 2].alpha,
        order[order.len() - 1].alpha,
    )
}
