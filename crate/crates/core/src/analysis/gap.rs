use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::BoundReport;
use crate::error::{Error, Result};
use crate::pruning::PruneMask;
use crate::scoring::ae_sample;
use crate::tensor::{entropy, Tensor};
use crate::transformer::{Example, Model};

fn check_simplex(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < -1e-9) {
        return Err(Error::Input(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} sums to {s}")));
    }
    Ok(())
}

/// `||p - q||_1^2 <= 4 [2 log n - H(p) - H(q)]`.
pub fn entropy_tv_check(p: &[f64], q: &[f64]) -> Result<BoundReport> {
    if p.len() != q.len() {
        return Err(Error::Input(format!("dimensions {} and {} differ", p.len(), q.len())));
    }
    if p.len() < 2 {
        return Err(Error::Input("entropy-TV check needs n >= 2".into()));
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    let n = p.len();
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    let rhs = 4.0 * (2.0 * (n as f64).ln() - entropy(p) - entropy(q));
    Ok(BoundReport::new("entropy_tv", l1 * l1, rhs, format!("n={n}")))
}

/// `||(a - a')^T V||_2 <= M ||a - a'||_1` with `M = max_j ||V(j, :)||_2`.
pub fn op_ineq_check(alpha: &[f64], alpha_prime: &[f64], values: &Tensor) -> Result<BoundReport> {
    if alpha.len() != alpha_prime.len() || alpha.len() != values.rows() {
        return Err(Error::dim("op_ineq", &[alpha.len(), alpha_prime.len()], values.shape()));
    }
    let diff: Vec<f64> = alpha.iter().zip(alpha_prime).map(|(a, b)| a - b).collect();
    let mut combo = vec![0.0; values.cols()];
    for (j, d) in diff.iter().enumerate() {
        for (c, v) in combo.iter_mut().zip(values.row(j)) {
            *c += d * v;
        }
    }
    let lhs = combo.iter().map(|x| x * x).sum::<f64>().sqrt();
    let m = (0..values.rows())
        .map(|j| values.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let l1: f64 = diff.iter().map(|d| d.abs()).sum();
    Ok(BoundReport::new("op_ineq", lhs, m * l1, format!("n={}", alpha.len())))
}

/// `C_AE = sqrt(8) M sqrt(|H| rho log n)`.
pub fn c_ae(m: f64, total_heads: usize, rho: f64, n: f64) -> Result<f64> {
    if !(n >= 2.0) {
        return Err(Error::Input(format!("representative length {n} is below 2")));
    }
    if !(m >= 0.0) || !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!("invalid M = {m} or rho = {rho}")));
    }
    Ok(8f64.sqrt() * m * (total_heads as f64 * rho * n.ln()).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentativeLen {
    #[default]
    Mean,
    Max,
}

/// How the deficits of a model and its neighbour are combined per example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeficitAggregation {
    /// `(AD + AD') / 2`.
    #[default]
    OnAverage,
    /// `max(AD, AD')`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Replaces the measured value-row bound `M`.
    pub m_override: Option<f64>,
    pub representative: RepresentativeLen,
    pub aggregation: DeficitAggregation,
    /// Lipschitz constant of the per-example loss.
    pub lipschitz: f64,
    /// Loss bound `B`; defaults to the largest calibration loss.
    pub loss_bound: Option<f64>,
    /// `N`; defaults to the calibration size.
    pub sample_size: Option<usize>,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            m_override: None,
            representative: RepresentativeLen::Mean,
            aggregation: DeficitAggregation::OnAverage,
            lipschitz: 1.0,
            loss_bound: None,
            sample_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub m: f64,
    pub representative_n: f64,
    pub rho: f64,
    pub c_ae: f64,
    /// `sum_pruned E[AD_bar_h]`.
    pub deficit_sum: f64,
    pub lipschitz: f64,
    pub loss_bound: f64,
    pub sample_size: usize,
    /// `2 L C_AE sqrt(deficit_sum) + B / N`.
    pub bound: f64,
}

struct DeficitPass {
    /// Per example, per head `AD_h(x)`.
    deficits: Vec<Vec<f64>>,
    losses: Vec<f64>,
    lens: Vec<usize>,
    max_value_row: f64,
}

fn deficit_pass(model: &Model, calib: &[Example]) -> Result<DeficitPass> {
    let rows = calib
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pass = model.forward(std::slice::from_ref(ex), None)?;
            let mut ad = Vec::with_capacity(model.config.total_heads());
            let mut vmax = 0.0f64;
            for recs in pass.records()?.values() {
                let r = &recs[0];
                ad.push(1.0 - ae_sample(&r.attn_rows).ok_or(Error::Length { index: i, len: r.effective_len })?);
                for j in 0..r.value_matrix.rows() {
                    vmax = vmax.max(r.value_matrix.row(j).iter().map(|x| x * x).sum::<f64>().sqrt());
                }
            }
            Ok((ad, pass.loss(), ex.tokens.len(), vmax))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DeficitPass {
        deficits: Vec::with_capacity(rows.len()),
        losses: Vec::with_capacity(rows.len()),
        lens: Vec::with_capacity(rows.len()),
        max_value_row: 0.0,
    };
    for (ad, loss, len, vmax) in rows {
        out.deficits.push(ad);
        out.losses.push(loss);
        out.lens.push(len);
        out.max_value_row = out.max_value_row.max(vmax);
    }
    Ok(out)
}

/// Generalization-gap bound for `mask` on the calibration set.
///
/// `neighbour` is the model trained on the neighbouring dataset; its deficits
/// are evaluated on the same calibration examples. Without one the model is
/// its own neighbour and both aggregations reduce to `AD`.
pub fn gap_constant(
    model: &Model,
    mask: &PruneMask,
    calib: &[Example],
    neighbour: Option<&Model>,
    cfg: &GapConfig,
) -> Result<GapReport> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    if mask.layout() != model.config.layout() {
        return Err(Error::Index("mask does not match model".into()));
    }
    if let Some(nb) = neighbour {
        if nb.config.layout() != model.config.layout() {
            return Err(Error::Index("neighbour model has a different head grid".into()));
        }
    }
    let own = deficit_pass(model, calib)?;
    let other = neighbour.map(|nb| deficit_pass(nb, calib)).transpose()?;
    let other_deficits = other.as_ref().map_or(&own.deficits, |o| &o.deficits);

    let n_ex = calib.len() as f64;
    let deficit_sum: f64 = mask
        .retained()
        .iter()
        .enumerate()
        .filter(|(_, &r)| !r)
        .map(|(h, _)| {
            own.deficits
                .iter()
                .zip(other_deficits)
                .map(|(a, b)| match cfg.aggregation {
                    DeficitAggregation::OnAverage => 0.5 * (a[h] + b[h]),
                    DeficitAggregation::Uniform => a[h].max(b[h]),
                })
                .sum::<f64>()
                / n_ex
        })
        .sum();

    let representative_n = match cfg.representative {
        RepresentativeLen::Mean => own.lens.iter().sum::<usize>() as f64 / n_ex,
        RepresentativeLen::Max => *own.lens.iter().max().expect("nonempty") as f64,
    };
    let m = cfg.m_override.unwrap_or(own.max_value_row);
    let c = c_ae(m, model.config.total_heads(), mask.rho(), representative_n)?;
    let loss_bound = cfg
        .loss_bound
        .unwrap_or_else(|| own.losses.iter().copied().fold(0.0, f64::max));
    let sample_size = cfg.sample_size.unwrap_or(calib.len());
    if sample_size == 0 {
        return Err(Error::Parameter("sample size N must be positive".into()));
    }
    Ok(GapReport {
        m,
        representative_n,
        rho: mask.rho(),
        c_ae: c,
        deficit_sum,
        lipschitz: cfg.lipschitz,
        loss_bound,
        sample_size,
        bound: 2.0 * cfg.lipschitz * c * deficit_sum.max(0.0).sqrt() + loss_bound / sample_size as f64,
    })
}
