//! Per-head importance (HIS), attention entropy (AE) and their combination.
//!
//! For head `h` and example `x`, the mask derivative is
//! `dL(x)/dm_h = <grad_{A_h} L(x), A_h(x)>_F`. HIS is the calibration mean of
//! its absolute value, taken per example before averaging so that signs
//! cannot cancel across examples.
//!
//! Token averaging: with `<U, V>_tok = (1/n) sum_t <U(t), V(t)>` the gradient
//! representing `dL` under that inner product is `n` times the Euclidean one,
//! so `<grad_tok, A>_tok` equals the Euclidean pairing and the mask derivative
//! is unchanged. Norms of activations that enter the curvature term use the
//! token-averaged form (see [`crate::analysis`]).
//!
//! AE is the token-averaged, length-normalized entropy
//! `AE_h(x) = 1/(n log n) * sum_t H(alpha_t)`, which lies in `[0, 1]`; the
//! attention deficit is `AD = 1 - AE`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{entropy, Tensor};
use crate::transformer::{Example, GateVector, HeadId, HeadLayout, HeadRecord, Model};

/// One scalar per head, in `(layer, head)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    layout: HeadLayout,
    values: Vec<f64>,
}

impl HeadValues {
    pub fn new(layout: HeadLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Index(format!(
                "{} values for a {}x{} head grid",
                values.len(),
                layout.num_layers,
                layout.num_heads
            )));
        }
        Ok(Self { layout, values })
    }

    /// A single layer of `values.len()` heads.
    pub fn flat(values: Vec<f64>) -> Self {
        Self {
            layout: HeadLayout::new(1, values.len()),
            values,
        }
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, id: HeadId) -> Result<f64> {
        Ok(self.values[self.layout.flat(id)?])
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        self.layout.heads().zip(self.values.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> HeadValues {
        HeadValues {
            layout: self.layout,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Where min-max normalization takes its min and max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    #[default]
    Global,
    PerLayer,
}

impl std::str::FromStr for NormScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(NormScope::Global),
            "per-layer" | "layer" => Ok(NormScope::PerLayer),
            other => Err(Error::Parameter(format!("unknown normalization scope {other:?}"))),
        }
    }
}

/// `(s - min) / (max - min)`; a constant input maps to 0.5 everywhere.
pub fn minmax(scores: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Score(format!("non-finite score {bad}")));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; scores.len()]);
    }
    let span = max - min;
    Ok(scores.iter().map(|s| (s - min) / span).collect())
}

pub fn minmax_normalize(scores: &HeadValues, scope: NormScope) -> Result<HeadValues> {
    let values = match scope {
        NormScope::Global => minmax(&scores.values)?,
        NormScope::PerLayer => {
            let mut out = Vec::with_capacity(scores.len());
            for layer in scores.values.chunks(scores.layout.num_heads) {
                out.extend(minmax(layer)?);
            }
            out
        }
    };
    HeadValues::new(scores.layout, values)
}

/// `alpha * his_hat + (1 - alpha) * (1 - ae_hat)` with `alpha` in `[0, 1)`.
pub fn hies_combine(his_hat: &HeadValues, ae_hat: &HeadValues, alpha: f64) -> Result<HeadValues> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha = {alpha} outside [0, 1)")));
    }
    if his_hat.layout != ae_hat.layout {
        return Err(Error::Index("HIS and AE head grids differ".into()));
    }
    for v in his_hat.values.iter().chain(&ae_hat.values) {
        if !(0.0..=1.0).contains(v) {
            return Err(Error::Score(format!("normalized score {v} outside [0, 1]")));
        }
    }
    let values = his_hat
        .values
        .iter()
        .zip(&ae_hat.values)
        .map(|(h, a)| alpha * h + (1.0 - alpha) * (1.0 - a))
        .collect();
    HeadValues::new(his_hat.layout, values)
}

/// `|<grad, act>_F|` for one head on one example.
pub fn his_sample(grad: &Tensor, act: &Tensor) -> Result<f64> {
    Ok(grad.frobenius_dot(act)?.abs())
}

/// Length-normalized mean row entropy of an `n × n` attention matrix.
/// Returns `None` when `n < 2` (the normalizer `log n` vanishes).
pub fn ae_sample(attn_rows: &Tensor) -> Option<f64> {
    let n = attn_rows.cols();
    if n < 2 {
        return None;
    }
    let rows = attn_rows.rows();
    let total: f64 = (0..rows).map(|t| entropy(attn_rows.row(t))).sum();
    Some(total / (rows as f64 * (n as f64).ln()))
}

/// Per-head quantities for one calibration example.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    /// Signed `dL/dm_h = <grad_{A_h} L, A_h>_F`.
    pub mask_grad: f64,
    pub ae: f64,
    /// Token-averaged `||A_h||_F^2 = (1/n) sum_t ||A_h(t)||^2`.
    pub act_sq_norm: f64,
    /// Token-averaged squared norm of the token-averaged gradient
    /// (`n * grad`), i.e. `n * ||grad||_F^2`.
    pub grad_sq_norm: f64,
    /// `max_j ||V_h(j, :)||_2`.
    pub max_value_row_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleStats {
    pub loss: f64,
    pub effective_len: usize,
    /// In `(layer, head)` order.
    pub heads: Vec<HeadSample>,
}

fn head_sample(rec: &HeadRecord, index: usize) -> Result<HeadSample> {
    let n = rec.effective_len;
    let ae = ae_sample(&rec.attn_rows).ok_or(Error::Length { index, len: n })?;
    let grad = rec
        .head_output_grad
        .as_ref()
        .ok_or_else(|| Error::Tape("record has no gradient".into()))?;
    let max_value_row_norm = (0..rec.value_matrix.rows())
        .map(|j| rec.value_matrix.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(HeadSample {
        mask_grad: grad.frobenius_dot(&rec.head_output)?,
        ae,
        act_sq_norm: rec.head_output.sq_norm() / n as f64,
        grad_sq_norm: grad.sq_norm() * n as f64,
        max_value_row_norm,
    })
}

/// One forward and backward pass per example (examples are scored one at a
/// time so that absolute values are taken per example). The output order
/// matches `calib` regardless of thread count.
pub fn calibration_pass(model: &Model, calib: &[Example], gates: Option<&GateVector>) -> Result<Vec<ExampleStats>> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    calib
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            if ex.tokens.len() < 2 {
                return Err(Error::Length {
                    index: i,
                    len: ex.tokens.len(),
                });
            }
            let back = model.forward(std::slice::from_ref(ex), gates)?.backward()?;
            let heads = back
                .records
                .values()
                .map(|recs| head_sample(&recs[0], i))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExampleStats {
                loss: back.loss,
                effective_len: ex.tokens.len(),
                heads,
            })
        })
        .collect()
}

/// Ordered mean over examples of `f(head sample)` for each head.
pub fn mean_per_head(stats: &[ExampleStats], layout: HeadLayout, f: impl Fn(&HeadSample) -> f64) -> HeadValues {
    let mut acc = vec![0.0; layout.total()];
    for ex in stats {
        for (a, h) in acc.iter_mut().zip(&ex.heads) {
            *a += f(h);
        }
    }
    let n = stats.len() as f64;
    HeadValues {
        layout,
        values: acc.into_iter().map(|v| v / n).collect(),
    }
}

pub fn his_from_stats(stats: &[ExampleStats], layout: HeadLayout) -> HeadValues {
    mean_per_head(stats, layout, |h| h.mask_grad.abs())
}

pub fn ae_from_stats(stats: &[ExampleStats], layout: HeadLayout) -> HeadValues {
    mean_per_head(stats, layout, |h| h.ae)
}

/// `HIS_h = mean_x |<grad_{A_h} L(x), A_h(x)>_F|` over the calibration set.
pub fn his_per_head(model: &Model, calib: &[Example]) -> Result<HeadValues> {
    let stats = calibration_pass(model, calib, None)?;
    Ok(his_from_stats(&stats, model.config.layout()))
}

/// Mean length-normalized attention entropy per head. Forward passes only.
pub fn ae_per_head(model: &Model, calib: &[Example]) -> Result<HeadValues> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    let layout = model.config.layout();
    let per_example = calib
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pass = model.forward(std::slice::from_ref(ex), None)?;
            pass.records()?
                .values()
                .map(|recs| {
                    ae_sample(&recs[0].attn_rows).ok_or(Error::Length {
                        index: i,
                        len: recs[0].effective_len,
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; layout.total()];
    for row in &per_example {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    HeadValues::new(layout, acc.into_iter().map(|v| v / calib.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub his: f64,
    pub ae: f64,
    pub ad: f64,
    pub his_hat: f64,
    pub ae_hat: f64,
    pub hies: f64,
}

impl HeadScore {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub calibration_size: usize,
    pub alpha: f64,
    pub scope: NormScope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    layout: HeadLayout,
    entries: Vec<HeadScore>,
    pub meta: ScoreMeta,
}

/// Score columns that can be exported as heatmaps or used for selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    His,
    Ae,
    Ad,
    HisHat,
    AeHat,
    Hies,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::His,
        Metric::Ae,
        Metric::Ad,
        Metric::HisHat,
        Metric::AeHat,
        Metric::Hies,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::His => "his",
            Metric::Ae => "ae",
            Metric::Ad => "ad",
            Metric::HisHat => "his_hat",
            Metric::AeHat => "ae_hat",
            Metric::Hies => "hies",
        }
    }

    fn pick(self, s: &HeadScore) -> f64 {
        match self {
            Metric::His => s.his,
            Metric::Ae => s.ae,
            Metric::Ad => s.ad,
            Metric::HisHat => s.his_hat,
            Metric::AeHat => s.ae_hat,
            Metric::Hies => s.hies,
        }
    }
}

impl ScoreTable {
    pub fn build(his: &HeadValues, ae: &HeadValues, alpha: f64, scope: NormScope, calibration_size: usize) -> Result<Self> {
        if his.layout != ae.layout {
            return Err(Error::Index("HIS and AE head grids differ".into()));
        }
        if let Some(v) = his.values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Score(format!("HIS value {v} is not a finite nonnegative number")));
        }
        if let Some(v) = ae.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Score(format!("AE value {v} outside [0, 1]")));
        }
        let his_hat = minmax_normalize(his, scope)?;
        let ae_hat = minmax_normalize(ae, scope)?;
        let hies = hies_combine(&his_hat, &ae_hat, alpha)?;
        let entries = his
            .layout
            .heads()
            .enumerate()
            .map(|(i, id)| HeadScore {
                layer: id.layer,
                head: id.head,
                his: his.values[i],
                ae: ae.values[i],
                ad: 1.0 - ae.values[i],
                his_hat: his_hat.values[i],
                ae_hat: ae_hat.values[i],
                hies: hies.values[i],
            })
            .collect();
        Ok(Self {
            layout: his.layout,
            entries,
            meta: ScoreMeta {
                calibration_size,
                alpha,
                scope,
            },
        })
    }

    /// Recomputes the HIES column for a different mixing coefficient.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let hies = hies_combine(&self.column(Metric::HisHat), &self.column(Metric::AeHat), alpha)?;
        let mut out = self.clone();
        for (e, h) in out.entries.iter_mut().zip(hies.values) {
            e.hies = h;
        }
        out.meta.alpha = alpha;
        Ok(out)
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn entries(&self) -> &[HeadScore] {
        &self.entries
    }

    pub fn column(&self, metric: Metric) -> HeadValues {
        HeadValues {
            layout: self.layout,
            values: self.entries.iter().map(|e| metric.pick(e)).collect(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses one JSON record per line. Records need `layer`, `head`, `his` and
    /// `ae`; when any normalized column is missing, all derived columns are
    /// recomputed with `alpha` and `scope`.
    pub fn from_jsonl(text: &str, alpha: f64, scope: NormScope) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            layer: usize,
            head: usize,
            his: f64,
            ae: f64,
            his_hat: Option<f64>,
            ae_hat: Option<f64>,
            hies: Option<f64>,
        }
        let lines: Vec<Line> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        if lines.is_empty() {
            return Err(Error::Input("score file has no records".into()));
        }
        let layout = HeadLayout::new(
            lines.iter().map(|l| l.layer).max().unwrap_or(0) + 1,
            lines.iter().map(|l| l.head).max().unwrap_or(0) + 1,
        );
        let mut seen = vec![None; layout.total()];
        for (i, l) in lines.iter().enumerate() {
            let flat = layout.flat(HeadId::new(l.layer, l.head))?;
            if seen[flat].replace(i).is_some() {
                return Err(Error::Index(format!("duplicate record for L{}H{}", l.layer, l.head)));
            }
        }
        let order: Vec<&Line> = seen
            .iter()
            .map(|s| s.map(|i| &lines[i]))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Index("score file does not cover a full head grid".into()))?;
        let his = HeadValues::new(layout, order.iter().map(|l| l.his).collect())?;
        let ae = HeadValues::new(layout, order.iter().map(|l| l.ae).collect())?;
        let mut table = Self::build(&his, &ae, alpha, scope, 0)?;
        let complete = order.iter().all(|l| l.his_hat.is_some() && l.ae_hat.is_some());
        if complete {
            for (e, l) in table.entries.iter_mut().zip(&order) {
                e.his_hat = l.his_hat.unwrap_or(e.his_hat);
                e.ae_hat = l.ae_hat.unwrap_or(e.ae_hat);
                e.hies = l.hies.unwrap_or(e.hies);
            }
            table = table.with_alpha(alpha)?;
        }
        Ok(table)
    }

    /// `num_layers` rows by `num_heads` columns.
    pub fn heatmap_csv(&self, metric: Metric) -> String {
        heatmap_csv(&self.column(metric))
    }

    /// Writes `scores.jsonl` and one `heatmap_<metric>.csv` per column.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let p = dir.join("scores.jsonl");
        std::fs::write(&p, self.to_jsonl()?)?;
        written.push(p);
        for m in Metric::ALL {
            let p = dir.join(format!("heatmap_{}.csv", m.name()));
            std::fs::write(&p, self.heatmap_csv(m))?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Grid CSV with a `layer` column followed by `h0..h{H-1}`.
pub fn heatmap_csv(values: &HeadValues) -> String {
    let mut out = String::from("layer");
    for h in 0..values.layout.num_heads {
        let _ = write!(out, ",h{h}");
    }
    out.push('\n');
    for (l, row) in values.values.chunks(values.layout.num_heads).enumerate() {
        let _ = write!(out, "{l}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Computes HIS and AE on `calib` and assembles the table.
pub fn score_model(model: &Model, calib: &[Example], alpha: f64, scope: NormScope) -> Result<ScoreTable> {
    let stats = calibration_pass(model, calib, None)?;
    let layout = model.config.layout();
    ScoreTable::build(
        &his_from_stats(&stats, layout),
        &ae_from_stats(&stats, layout),
        alpha,
        scope,
        calib.len(),
    )
}
