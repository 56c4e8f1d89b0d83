use crate::error::{Error, Result};
use crate::tensor::LossKind;

/// Worst-case `||grad_z^2 L||_2` over all probabilities: `1/4` for the
/// sigmoid loss, `1/2` for softmax.
pub fn popoviciu_bound(kind: LossKind) -> f64 {
    match kind {
        LossKind::Binary => 0.25,
        LossKind::Multiclass => 0.5,
    }
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < -1e-9) {
        return Err(Error::Input(format!("{p:?} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// Operator norm of the logit Hessian of cross-entropy at probabilities `p`.
///
/// Binary takes `p = (1 - s, s)` and returns `s (1 - s)`. Multiclass returns
/// `lambda_max(diag(p) - p p^T)`, the largest root of the secular equation
/// `sum_i p_i^2 / (p_i - lambda) = 1`, which lies in `[p_(2), p_(1)]`.
pub fn logit_hessian_norm(p: &[f64], kind: LossKind) -> Result<f64> {
    check_simplex(p)?;
    match kind {
        LossKind::Binary => {
            if p.len() != 2 {
                return Err(Error::Input(format!("binary curvature needs 2 probabilities, got {}", p.len())));
            }
            Ok(p[0].max(0.0) * p[1].max(0.0))
        }
        LossKind::Multiclass => {
            if p.len() < 2 {
                return Err(Error::Input("multiclass curvature needs at least 2 classes".into()));
            }
            Ok(secular_lambda_max(p))
        }
    }
}

fn secular_lambda_max(p: &[f64]) -> f64 {
    let mut support: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    support.sort_by(|a, b| b.total_cmp(a));
    if support.len() < 2 {
        return 0.0;
    }
    let (top, second) = (support[0], support[1]);
    if top == second {
        // e_i - e_j for the two largest entries is an eigenvector.
        return top;
    }
    let f = |lambda: f64| support.iter().map(|&q| q * q / (q - lambda)).sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (second, top);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_at_uniform_pair() {
        assert_eq!(logit_hessian_norm(&[0.5, 0.5], LossKind::Multiclass).unwrap(), 0.5);
        assert_eq!(logit_hessian_norm(&[0.5, 0.5], LossKind::Binary).unwrap(), 0.25);
    }

    #[test]
    fn one_hot_is_flat() {
        assert_eq!(logit_hessian_norm(&[0.0, 1.0, 0.0], LossKind::Multiclass).unwrap(), 0.0);
    }

    #[test]
    fn two_class_closed_form() {
        // diag(p) - p p^T has eigenvalues 0 and 2 p (1 - p) for C = 2.
        let v = logit_hessian_norm(&[0.3, 0.7], LossKind::Multiclass).unwrap();
        assert!((v - 2.0 * 0.21).abs() < 1e-12);
    }

    #[test]
    fn off_simplex_is_input_error() {
        assert!(matches!(logit_hessian_norm(&[0.5, 0.6], LossKind::Multiclass), Err(Error::Input(_))));
        assert!(matches!(logit_hessian_norm(&[1.1, -0.1], LossKind::Binary), Err(Error::Input(_))));
    }
}
