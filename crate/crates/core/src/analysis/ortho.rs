use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::{Example, HeadId, HeadRecord, Model};

/// Sample moments of the attention-space gradients of HIS (`u`) and AE (`-v`)
/// for one head, pooled over every valid query token of the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthoDiagnostic {
    pub layer: usize,
    pub head: usize,
    pub samples: usize,
    pub projected: bool,
    /// `tr Cov(u, v)` with `1/N` normalization.
    pub cov_trace: f64,
    pub mean_u_norm: f64,
    pub mean_v_norm: f64,
    /// `<mean u, mean v>`.
    pub mean_dot: f64,
    /// `mean <u, -v>`.
    pub expected_inner: f64,
    /// Tokens where `dL/dm_h = 0`, handled with the zero subgradient.
    pub zero_subgradients: usize,
    /// Largest `|v_j|` over all samples; exactly zero for uniform attention
    /// under projection.
    pub max_abs_v: f64,
}

/// Centres `x[..n]` about its mean. The first entry is subtracted before
/// averaging so that a constant vector maps to exactly zero.
fn project(x: &mut [f64]) {
    let n = x.len() as f64;
    let x0 = x[0];
    x.iter_mut().for_each(|v| *v -= x0);
    let mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= mean);
}

/// `(u, v)` per valid query token of one example and head, zero-padded to
/// `width`. The HIS sign is that of the example's `dL/dm_h`.
fn token_pairs(rec: &HeadRecord, width: usize, projected: bool) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, usize)> {
    let grad = rec
        .head_output_grad
        .as_ref()
        .ok_or_else(|| Error::Tape("record has no gradient".into()))?;
    let mask_grad = grad.frobenius_dot(&rec.head_output)?;
    let sign = if mask_grad > 0.0 {
        1.0
    } else if mask_grad < 0.0 {
        -1.0
    } else {
        0.0
    };
    let n = rec.effective_len;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let g_row = grad.row(t);
        let mut u: Vec<f64> = (0..n)
            .map(|j| sign * rec.value_matrix.row(j).iter().zip(g_row).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mut v: Vec<f64> = rec.attn_rows.row(t).iter().map(|&a| 1.0 + a.ln()).collect();
        if projected {
            project(&mut u);
            project(&mut v);
        }
        u.resize(width, 0.0);
        v.resize(width, 0.0);
        out.push((u, v));
    }
    Ok((out, usize::from(sign == 0.0) * n))
}

fn moments(id: HeadId, pairs: &[(Vec<f64>, Vec<f64>)], width: usize, projected: bool, zeros: usize) -> OrthoDiagnostic {
    let n = pairs.len() as f64;
    let mut mu = vec![0.0; width];
    let mut mv = vec![0.0; width];
    for (u, v) in pairs {
        for j in 0..width {
            mu[j] += u[j];
            mv[j] += v[j];
        }
    }
    mu.iter_mut().for_each(|x| *x /= n);
    mv.iter_mut().for_each(|x| *x /= n);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let cov_trace = pairs
        .iter()
        .map(|(u, v)| (0..width).map(|j| (u[j] - mu[j]) * (v[j] - mv[j])).sum::<f64>())
        .sum::<f64>()
        / n;
    let expected_inner = -pairs.iter().map(|(u, v)| dot(u, v)).sum::<f64>() / n;
    OrthoDiagnostic {
        layer: id.layer,
        head: id.head,
        samples: pairs.len(),
        projected,
        cov_trace,
        mean_u_norm: dot(&mu, &mu).sqrt(),
        mean_v_norm: dot(&mv, &mv).sqrt(),
        mean_dot: dot(&mu, &mv),
        expected_inner,
        zero_subgradients: zeros,
        max_abs_v: pairs
            .iter()
            .flat_map(|(_, v)| v.iter().map(|x| x.abs()))
            .fold(0.0, f64::max),
    }
}

/// Per-head orthogonality statistics over the calibration set. With
/// `projected`, both vectors are centred onto the simplex tangent space.
pub fn ortho_diagnostic(model: &Model, calib: &[Example], projected: bool) -> Result<Vec<OrthoDiagnostic>> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    let width = model.config.max_seq_len;
    let layout = model.config.layout();
    let per_example = calib
        .par_iter()
        .map(|ex| {
            let back = model.forward(std::slice::from_ref(ex), None)?.backward()?;
            back.records
                .values()
                .map(|recs| token_pairs(&recs[0], width, projected))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(layout
        .heads()
        .enumerate()
        .map(|(flat, id)| {
            let mut pairs = Vec::new();
            let mut zeros = 0;
            for ex in &per_example {
                pairs.extend(ex[flat].0.iter().cloned());
                zeros += ex[flat].1;
            }
            moments(id, &pairs, width, projected, zeros)
        })
        .collect())
}

pub fn ortho_jsonl(diags: &[OrthoDiagnostic]) -> Result<String> {
    let mut out = String::new();
    for d in diags {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}
