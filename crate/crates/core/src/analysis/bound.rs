use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::curvature::{logit_hessian_norm, popoviciu_bound};
use super::spectral::{blockwise_wo_norms, spectral_norm};
use super::BoundReport;
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::scoring::{calibration_pass, ExampleStats};
use crate::tensor::{sigmoid, LossKind};
use crate::transformer::{Architecture, Example, Model};

/// How the logit-curvature constant `c` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    /// Per example, the largest Hessian norm on the segment between the
    /// unpruned and pruned logits.
    Exact,
    /// `c = 1/4`.
    BinaryPlugin,
    /// `c = 1/2`.
    MulticlassPlugin,
}

/// Which norm of `W^O` scales the quadratic term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    Full,
    /// Per-head `||W^O_h||_2^2` on that head's rows.
    Blockwise,
}

struct LinearPass {
    stats: Vec<ExampleStats>,
    delta: Vec<f64>,
    /// Curvature bound per example on the logit segment.
    curvature: Vec<f64>,
}

fn require_linear_head(model: &Model, mask: &PruneMask) -> Result<()> {
    if model.config.architecture != Architecture::LinearHead {
        return Err(Error::Config(
            "the loss bound needs logits computed directly from head outputs (linear-head architecture)".into(),
        ));
    }
    if mask.layout() != model.config.layout() {
        return Err(Error::Index("mask does not match model".into()));
    }
    Ok(())
}

fn segment_curvature(z0: &[f64], z1: &[f64], kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::Binary => {
            let (a, b) = (z0[0], z1[0]);
            if a * b <= 0.0 {
                return Ok(0.25);
            }
            let s = sigmoid(if a.abs() < b.abs() { a } else { b });
            Ok(s * (1.0 - s))
        }
        LossKind::Multiclass => {
            const POINTS: usize = 257;
            let mut best = 0.0f64;
            for i in 0..POINTS {
                let t = i as f64 / (POINTS - 1) as f64;
                let z: Vec<f64> = z0.iter().zip(z1).map(|(a, b)| a + t * (b - a)).collect();
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / s).collect();
                best = best.max(logit_hessian_norm(&p, LossKind::Multiclass)?);
            }
            Ok(best)
        }
    }
}

fn linear_pass(model: &Model, mask: &PruneMask, calib: &[Example], mode: CurvatureMode) -> Result<LinearPass> {
    let kind = model.config.loss_kind;
    if mode == CurvatureMode::BinaryPlugin && kind != LossKind::Binary {
        return Err(Error::Config("the 1/4 curvature constant only holds for the sigmoid loss".into()));
    }
    let stats = calibration_pass(model, calib, None)?;
    let gates = mask.gates();
    let per_example = calib
        .par_iter()
        .map(|ex| {
            let full = model.forward(std::slice::from_ref(ex), None)?;
            let pruned = model.forward(std::slice::from_ref(ex), Some(&gates))?;
            let c = match mode {
                CurvatureMode::Exact => segment_curvature(full.logits().row(0), pruned.logits().row(0), kind)?,
                CurvatureMode::BinaryPlugin => popoviciu_bound(LossKind::Binary),
                CurvatureMode::MulticlassPlugin => popoviciu_bound(LossKind::Multiclass),
            };
            Ok((pruned.loss() - full.loss(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let (delta, curvature) = per_example.into_iter().unzip();
    Ok(LinearPass {
        stats,
        delta,
        curvature,
    })
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Empirical loss increase from masking versus the second-order bound
/// `sum_pruned HIS_h + (1/2) E[c ||W^O||^2 sum_pruned ||A_h||_tok^2]`.
///
/// Requires the linear-head architecture, where the logits are the pooled
/// gated head outputs times `W^O` plus a bias. With `NormMode::Blockwise` the
/// full spectral norm is replaced by each head's block norm.
pub fn verify_loss_bound(
    model: &Model,
    mask: &PruneMask,
    calib: &[Example],
    curvature: CurvatureMode,
    norm: NormMode,
) -> Result<BoundReport> {
    require_linear_head(model, mask)?;
    let pass = linear_pass(model, mask, calib, curvature)?;
    let n = calib.len();
    let pruned: Vec<usize> = (0..mask.retained().len()).filter(|&i| !mask.retained()[i]).collect();

    let w_sq: Vec<f64> = match norm {
        NormMode::Full => vec![spectral_norm(&model.params.layers[0].attn.w_o)?.powi(2); mask.retained().len()],
        NormMode::Blockwise => blockwise_wo_norms(model, 0)?.into_iter().map(|s| s * s).collect(),
    };

    let lhs = mean(pass.delta.iter().copied(), n);
    let first: f64 = pruned
        .iter()
        .map(|&h| mean(pass.stats.iter().map(|s| s.heads[h].mask_grad.abs()), n))
        .sum();
    let quad = mean(
        pass.stats.iter().zip(&pass.curvature).map(|(s, &c)| {
            0.5 * c * pruned.iter().map(|&h| w_sq[h] * s.heads[h].act_sq_norm).sum::<f64>()
        }),
        n,
    );
    let name = match norm {
        NormMode::Full => "loss_bound_full",
        NormMode::Blockwise => "loss_bound_blockwise",
    };
    let context = format!(
        "retained={};rho={};curvature={:?};n={}",
        mask.retained().iter().map(|&r| if r { '1' } else { '0' }).collect::<String>(),
        mask.rho(),
        curvature,
        n
    );
    Ok(BoundReport::new(name, lhs, first + quad, context))
}

/// Measured size of the second-order remainder relative to the first-order
/// term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadRatioReport {
    /// `sum_pruned HIS_h`.
    pub first_order: f64,
    /// Mean loss increase minus its signed first-order part.
    pub empirical_quadratic: f64,
    pub empirical_ratio: f64,
    /// `(c/2) ||W^O||^2 sum_pruned E||A_h||_tok^2 / first_order`.
    pub plugin_ratio: f64,
    /// `(c/2) ||W^O||^2 max_h E||A_h||_tok / g`.
    pub analytic_bound: f64,
    /// `min_h E[|cos| ||grad||]`, with `|cos| ||grad|| = |dL/dm_h| / ||A_h||_tok`.
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuadRatio {
    /// Nothing is pruned; both terms vanish.
    Empty,
    Ratio(QuadRatioReport),
}

/// Quadratic-to-linear ratio of the loss expansion under `mask`. `kind`
/// selects the curvature constant.
pub fn quad_ratio(model: &Model, calib: &[Example], mask: &PruneMask, kind: LossKind) -> Result<QuadRatio> {
    require_linear_head(model, mask)?;
    let pruned: Vec<usize> = (0..mask.retained().len()).filter(|&i| !mask.retained()[i]).collect();
    if pruned.is_empty() {
        return Ok(QuadRatio::Empty);
    }
    let c = popoviciu_bound(kind);
    let mode = match kind {
        LossKind::Binary => CurvatureMode::BinaryPlugin,
        LossKind::Multiclass => CurvatureMode::MulticlassPlugin,
    };
    let pass = linear_pass(model, mask, calib, mode)?;
    let n = calib.len();
    let heads = model.config.total_heads();

    let align: Vec<f64> = (0..heads)
        .map(|h| {
            mean(
                pass.stats.iter().map(|s| {
                    let a = s.heads[h].act_sq_norm.sqrt();
                    if a > 0.0 {
                        s.heads[h].mask_grad.abs() / a
                    } else {
                        0.0
                    }
                }),
                n,
            )
        })
        .collect();
    let g = align.iter().copied().fold(f64::INFINITY, f64::min);
    if !(g > 0.0) {
        return Err(Error::DegenerateAlignment);
    }
    let w_sq = spectral_norm(&model.params.layers[0].attn.w_o)?.powi(2);
    let his = |h: usize| mean(pass.stats.iter().map(|s| s.heads[h].mask_grad.abs()), n);
    let act = |h: usize| mean(pass.stats.iter().map(|s| s.heads[h].act_sq_norm.sqrt()), n);
    let act_sq = |h: usize| mean(pass.stats.iter().map(|s| s.heads[h].act_sq_norm), n);

    let first_order: f64 = pruned.iter().map(|&h| his(h)).sum();
    let signed_first: f64 = mean(
        pass.stats.iter().map(|s| -pruned.iter().map(|&h| s.heads[h].mask_grad).sum::<f64>()),
        n,
    );
    let delta = mean(pass.delta.iter().copied(), n);
    let empirical_quadratic = delta - signed_first;
    let max_act = (0..heads).map(act).fold(0.0, f64::max);
    Ok(QuadRatio::Ratio(QuadRatioReport {
        first_order,
        empirical_quadratic,
        empirical_ratio: empirical_quadratic / first_order,
        plugin_ratio: 0.5 * c * w_sq * pruned.iter().map(|&h| act_sq(h)).sum::<f64>() / first_order,
        analytic_bound: 0.5 * c * w_sq * max_act / g,
        g,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_segment_curvature() {
        assert_eq!(segment_curvature(&[-1.0], &[2.0], LossKind::Binary).unwrap(), 0.25);
        let s = sigmoid(1.0);
        assert_eq!(segment_curvature(&[3.0], &[1.0], LossKind::Binary).unwrap(), s * (1.0 - s));
    }

    #[test]
    fn multiclass_segment_hits_uniform_crossing() {
        let c = segment_curvature(&[1.0, -1.0], &[-1.0, 1.0], LossKind::Multiclass).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }
}
