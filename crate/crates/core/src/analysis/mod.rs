//! Numerical checks of the theory behind the criterion.

mod bound;
mod curvature;
mod gap;
mod ortho;
mod spectral;

pub use bound::{quad_ratio, verify_loss_bound, CurvatureMode, NormMode, QuadRatio, QuadRatioReport};
pub use curvature::{logit_hessian_norm, popoviciu_bound};
pub use gap::{
    c_ae, entropy_tv_check, gap_constant, op_ineq_check, DeficitAggregation, GapConfig, GapReport,
    RepresentativeLen,
};
pub use ortho::{ortho_diagnostic, ortho_jsonl, OrthoDiagnostic};
pub use spectral::{blockwise_wo_norms, power_iteration_norm, power_iteration_trace, spectral_norm};

use serde::{Deserialize, Serialize};

/// Absolute tolerance used by [`BoundReport::new`].
pub const BOUND_TOL: f64 = 1e-9;

/// One inequality `lhs <= rhs` evaluated numerically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub context: String,
}

impl BoundReport {
    pub fn new(bound_name: impl Into<String>, lhs: f64, rhs: f64, context: impl Into<String>) -> Self {
        // `+ 0.0` turns the `-0.0` of empty float sums into `0.0`.
        let (lhs, rhs) = (lhs + 0.0, rhs + 0.0);
        Self {
            bound_name: bound_name.into(),
            lhs,
            rhs,
            slack: rhs - lhs + 0.0,
            holds: lhs <= rhs + BOUND_TOL,
            context: context.into(),
        }
    }
}

/// CSV with columns `bound_name,lhs,rhs,slack,holds,context`.
pub fn bound_reports_csv(reports: &[BoundReport]) -> String {
    let mut out = String::from("bound_name,lhs,rhs,slack,holds,context\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&r.bound_name),
            r.lhs,
            r.rhs,
            r.slack,
            r.holds,
            csv_field(&r.context)
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
