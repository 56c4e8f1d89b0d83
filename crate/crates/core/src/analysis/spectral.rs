use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::Model;

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(m: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += a * ui;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Running estimates of the largest singular value, one per iteration.
///
/// Each iteration maps `v -> M^T M v` (normalized); the estimate is
/// `||M v||` for unit `v`, a lower bound on `sigma_max` that cannot decrease
/// in exact arithmetic. The returned sequence is the running maximum, so it is
/// nondecreasing in floating point too.
pub fn power_iteration_trace(matrix: &Tensor, iters: usize, seed: u64) -> Result<Vec<f64>> {
    if matrix.is_empty() || !matrix.is_matrix() {
        return Err(Error::Input("power iteration needs a nonempty matrix".into()));
    }
    if iters == 0 {
        return Err(Error::Parameter("power iteration needs at least one step".into()));
    }
    if !matrix.all_finite() {
        return Err(Error::Input("matrix has non-finite entries".into()));
    }
    if matrix.data().iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; iters]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..matrix.cols()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);
    if norm(&mat_vec(matrix, &v)) == 0.0 {
        // Start orthogonal to the row space: restart on the heaviest column.
        let heaviest = (0..matrix.cols())
            .map(|j| (0..matrix.rows()).map(|i| matrix.get(i, j).powi(2)).sum::<f64>())
            .enumerate()
            .fold((0, -1.0), |best, (j, s)| if s > best.1 { (j, s) } else { best })
            .0;
        v = vec![0.0; matrix.cols()];
        v[heaviest] = 1.0;
    }
    let mut best = 0.0f64;
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let mut u = mat_vec(matrix, &v);
        let estimate = normalize(&mut u);
        best = best.max(estimate);
        trace.push(best);
        let mut next = mat_t_vec(matrix, &u);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
    }
    trace.resize(iters, best);
    Ok(trace)
}

/// Largest singular value estimated by `iters` power-iteration steps.
pub fn power_iteration_norm(matrix: &Tensor, iters: usize, seed: u64) -> Result<f64> {
    Ok(*power_iteration_trace(matrix, iters, seed)?.last().expect("iters >= 1"))
}

/// Spectral norm with the iteration count used by the verifiers.
pub fn spectral_norm(matrix: &Tensor) -> Result<f64> {
    power_iteration_norm(matrix, 1000, 0)
}

/// `sigma_max` of each head's block of `W^O` in `layer`: the `d_v` rows that
/// read head `h`'s output.
pub fn blockwise_wo_norms(model: &Model, layer: usize) -> Result<Vec<f64>> {
    let lp = model
        .params
        .layers
        .get(layer)
        .ok_or_else(|| Error::Index(format!("layer {layer} out of range")))?;
    let dv = model.config.d_v;
    (0..model.config.num_heads)
        .map(|h| spectral_norm(&lp.attn.w_o.slice_rows(h * dv, dv)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!((power_iteration_norm(&m, 200, 1).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_matrix_is_zero() {
        assert_eq!(power_iteration_norm(&Tensor::zeros(&[4, 4]), 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn start_in_null_space_recovers() {
        // Rank one; a start vector along e_2 would be annihilated.
        let m = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!((power_iteration_norm(&m, 5, 9).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bad_arguments() {
        assert!(power_iteration_norm(&Tensor::zeros(&[0, 3]), 5, 0).is_err());
        assert!(power_iteration_norm(&Tensor::identity(2), 0, 0).is_err());
    }
}
