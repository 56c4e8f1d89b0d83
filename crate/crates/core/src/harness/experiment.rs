use serde::{Deserialize, Serialize};

use super::report::SeedAlpha;
use super::sweep::{alpha_sweep, run_sweep, SweepConfig, SweepResult};
use crate::transformer::Example;
use super::task::{gen_task, SyntheticTask, TaskKind};
use crate::error::{Error, Result};
use crate::pruning::Criterion;
use crate::scoring::{score_model, NormScope, ScoreTable};
use crate::tensor::LossKind;
use crate::transformer::{train, Model, ModelConfig, TrainConfig, TrainReport};

fn default_calib() -> usize {
    512
}

fn default_alpha() -> f64 {
    0.5
}

/// Everything needed to reproduce a train, score, prune and evaluate run.
/// Each seed reseeds the data, the initialization and the shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: SyntheticTask,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_eval: usize,
    /// Held-out calibration examples, also used to choose alpha.
    #[serde(default = "default_calib")]
    pub n_calib: usize,
    pub criteria: Vec<Criterion>,
    pub ratios: Vec<f64>,
    /// When nonempty, alpha is chosen per seed by wAUC over `ratios`.
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default)]
    pub wauc_weights: Option<Vec<f64>>,
    /// Used when `alpha_grid` is empty.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub scope: NormScope,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Needle task on the 2-layer, 4-head desk model.
    pub fn desk_needle() -> Self {
        let task = SyntheticTask {
            kind: TaskKind::Needle,
            vocab_size: 24,
            min_len: 8,
            max_len: 23,
            num_classes: 4,
            distractors: 0,
            seed: 0,
        };
        Self {
            model: ModelConfig::desk(task.vocab_size, task.num_classes, task.max_seq_len()),
            task,
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            n_train: 4000,
            n_eval: 1000,
            n_calib: default_calib(),
            criteria: Criterion::ALL.to_vec(),
            ratios: vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75],
            alpha_grid: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            wauc_weights: None,
            alpha: default_alpha(),
            scope: NormScope::Global,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        let m = &self.model;
        if m.vocab_size < self.task.vocab_size
            || m.max_seq_len < self.task.max_seq_len()
            || m.num_classes != self.task.num_classes
        {
            return Err(Error::Config(format!(
                "model (vocab {}, max_seq_len {}, classes {}) cannot represent the task (vocab {}, max_seq_len {}, classes {})",
                m.vocab_size,
                m.max_seq_len,
                m.num_classes,
                self.task.vocab_size,
                self.task.max_seq_len(),
                self.task.num_classes
            )));
        }
        if m.loss_kind == LossKind::Binary && m.num_classes != 2 {
            return Err(Error::Config("binary loss needs two classes".into()));
        }
        if self.seeds.is_empty() || self.n_calib == 0 {
            return Err(Error::Config("an experiment needs seeds and calibration data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub model: Model,
    pub train_report: TrainReport,
    /// Scores at the alpha used for the sweep.
    pub scores: ScoreTable,
    pub alpha_sweep: Option<SeedAlpha>,
    pub reference_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub sweep: SweepResult,
}

impl ExperimentResult {
    pub fn alpha_sweeps(&self) -> Vec<SeedAlpha> {
        self.runs.iter().filter_map(|r| r.alpha_sweep.clone()).collect()
    }

    pub fn score_tables(&self) -> Vec<(u64, &ScoreTable)> {
        self.runs.iter().map(|r| (r.seed, &r.scores)).collect()
    }
}

/// Train, calibration and evaluation sets for one seed.
pub struct SeedData {
    pub train: Vec<Example>,
    pub calib: Vec<Example>,
    pub eval: Vec<Example>,
}

impl ExperimentConfig {
    /// The calibration set is drawn from the same stream as the training set
    /// but never trained on.
    pub fn datasets(&self, seed: u64) -> Result<SeedData> {
        let task = SyntheticTask {
            seed,
            ..self.task.clone()
        };
        let (mut train, eval) = gen_task(&task, self.n_train + self.n_calib, self.n_eval)?;
        let calib = train.split_off(self.n_train);
        Ok(SeedData { train, calib, eval })
    }

    pub fn train_model(&self, seed: u64, train_set: &[Example]) -> Result<(Model, TrainReport)> {
        let mut model = Model::new(ModelConfig {
            seed,
            ..self.model.clone()
        })?;
        let report = train(
            &mut model,
            train_set,
            &TrainConfig {
                seed,
                ..self.train.clone()
            },
        )?;
        Ok((model, report))
    }

    /// Scores on the calibration set, with alpha chosen by wAUC when the grid
    /// is nonempty.
    pub fn score(&self, model: &Model, seed: u64, calib: &[Example]) -> Result<(ScoreTable, Option<SeedAlpha>)> {
        let scores = score_model(model, calib, self.alpha, self.scope)?;
        if self.alpha_grid.is_empty() {
            return Ok((scores, None));
        }
        let sweep = alpha_sweep(
            model,
            &scores,
            calib,
            &self.alpha_grid,
            &self.ratios,
            self.wauc_weights.as_deref(),
        )?;
        Ok((scores.with_alpha(sweep.best)?, Some(SeedAlpha { seed, sweep })))
    }

    pub fn sweep_config(&self, seed: u64) -> SweepConfig {
        SweepConfig {
            criteria: self.criteria.clone(),
            ratios: self.ratios.clone(),
            seeds: vec![seed],
        }
    }
}

/// Scores, tunes alpha and sweeps an already trained model.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    model: Model,
    train_report: TrainReport,
    data: &SeedData,
) -> Result<(SeedRun, SweepResult)> {
    let (scores, alpha_sweep) = cfg.score(&model, seed, &data.calib)?;
    let result = run_sweep(&model, Some(&train_report), &scores, &data.eval, &cfg.sweep_config(seed))?;
    let reference_accuracy = result.rows.iter().find(|r| r.ratio == 0.0).map_or(0.0, |r| r.accuracy);
    Ok((
        SeedRun {
            seed,
            model,
            train_report,
            scores,
            alpha_sweep,
            reference_accuracy,
        },
        result,
    ))
}

/// Trains one model per seed and sweeps every criterion over every ratio.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut sweep = SweepResult::default();
    for &seed in &cfg.seeds {
        let data = cfg.datasets(seed)?;
        let (model, report) = cfg.train_model(seed, &data.train)?;
        let (run, result) = evaluate_seed(cfg, seed, model, report, &data)?;
        runs.push(run);
        sweep.extend(result);
    }
    Ok(ExperimentResult { runs, sweep })
}

/// A trained 1-block, 4-head linear-head model on a binary majority task,
/// with 64 held-out calibration examples.
pub fn toy_linear_head(seed: u64) -> Result<(Model, TrainReport, Vec<Example>)> {
    let task = SyntheticTask {
        kind: TaskKind::Majority,
        vocab_size: 12,
        min_len: 4,
        max_len: 10,
        num_classes: 2,
        distractors: 0,
        seed,
    };
    let (train_set, calib) = gen_task(&task, 400, 64)?;
    let mut model = Model::new(ModelConfig {
        seed,
        ..ModelConfig::linear_head(task.vocab_size, 4, 4, 2, task.max_seq_len(), LossKind::Binary)
    })?;
    let report = train(
        &mut model,
        &train_set,
        &TrainConfig {
            learning_rate: 1e-2,
            epochs: 3,
            seed,
            ..TrainConfig::default()
        },
    )?;
    Ok((model, report, calib))
}
