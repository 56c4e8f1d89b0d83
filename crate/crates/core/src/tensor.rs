//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array. `shape.iter().product() == data.len()` always holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::dim("from_rows", &[n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a matrix; a rank-1 tensor is treated as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => self.data.len(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Squared Frobenius norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("frobenius_dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Contiguous column range `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > n {
            return Err(Error::dim("slice_cols", &self.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Ok(Tensor {
            shape: vec![m, len],
            data,
        })
    }

    /// Contiguous row range `[start, start + len)` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        if start + len > m {
            return Err(Error::dim("slice_rows", &self.shape, &[start, len]));
        }
        Ok(Tensor {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }
}

/// Standard matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// Row-wise softmax. Columns with `mask[j] == false` get exactly zero weight.
pub fn softmax_rows(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = (logits.rows(), logits.cols());
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(Error::dim("softmax_rows", logits.shape(), &[mask.len()]));
        }
    }
    let valid = |j: usize| mask.map_or(true, |mk| mk[j]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = logits.row(i);
        let max = (0..n)
            .filter(|&j| valid(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if valid(j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Cross-entropy flavour: one sigmoid logit per example or one logit per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Binary,
    Multiclass,
}

impl LossKind {
    /// Number of logits the classifier emits.
    pub fn output_dim(self, num_classes: usize) -> usize {
        match self {
            LossKind::Binary => 1,
            LossKind::Multiclass => num_classes,
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-example losses and `dL_i/dz` (unscaled by batch size).
pub(crate) fn cross_entropy_parts(
    logits: &Tensor,
    targets: &[usize],
    kind: LossKind,
) -> Result<(Vec<f64>, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if targets.len() != b || b == 0 {
        return Err(Error::dim("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if !logits.all_finite() {
        return Err(Error::Input("cross_entropy: non-finite logits".into()));
    }
    let mut losses = Vec::with_capacity(b);
    let mut grad = Tensor::zeros(&[b, c]);
    match kind {
        LossKind::Binary => {
            if c != 1 {
                return Err(Error::dim("binary cross_entropy", logits.shape(), &[b, 1]));
            }
            for (i, &y) in targets.iter().enumerate() {
                if y > 1 {
                    return Err(Error::Label { label: y, classes: 2 });
                }
                let z = logits.data[i];
                let yf = y as f64;
                // softplus(z) - y z, written to avoid overflow
                losses.push(z.max(0.0) - z * yf + (-z.abs()).exp().ln_1p());
                grad.data[i] = sigmoid(z) - yf;
            }
        }
        LossKind::Multiclass => {
            for (i, &y) in targets.iter().enumerate() {
                if y >= c {
                    return Err(Error::Label { label: y, classes: c });
                }
                let row = logits.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
                let log_z = max + total.ln();
                losses.push(log_z - row[y]);
                let g = grad.row_mut(i);
                for j in 0..c {
                    g[j] = (row[j] - log_z).exp();
                }
                g[y] -= 1.0;
            }
        }
    }
    Ok((losses, grad))
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], kind: LossKind) -> Result<f64> {
    let (losses, _) = cross_entropy_parts(logits, targets, kind)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, 0.0]]).unwrap();
        let s = softmax_rows(&t, None).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.get(1, 0), 1.0);
        assert_eq!(s.get(1, 1), 0.0);
    }

    #[test]
    fn softmax_reference_values() {
        // exp(k) / (e + e^2 + e^3), evaluated independently
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&t, None).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_mask_gives_exact_zeros() {
        let t = Tensor::from_rows(&[vec![0.3, 5.0, -1.0]]).unwrap();
        let s = softmax_rows(&t, Some(&[true, false, true])).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 0) + s.get(0, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_all_masked_row_is_error() {
        let t = Tensor::from_rows(&[vec![0.3, 5.0]]).unwrap();
        assert!(matches!(
            softmax_rows(&t, Some(&[false, false])),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn cross_entropy_symmetric_cases() {
        let z = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let l = cross_entropy(&z, &[1], LossKind::Binary).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let z = Tensor::from_rows(&[vec![0.7; 4], vec![0.7; 4]]).unwrap();
        let l = cross_entropy(&z, &[3, 0], LossKind::Multiclass).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_label_errors() {
        let z = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            cross_entropy(&z, &[2], LossKind::Multiclass),
            Err(Error::Label { label: 2, classes: 2 })
        ));
        let z = Tensor::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(
            cross_entropy(&z, &[2], LossKind::Binary),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn multiclass_gradient_is_p_minus_onehot() {
        let z = Tensor::from_rows(&[vec![0.2, -1.0, 0.5]]).unwrap();
        let (_, g) = cross_entropy_parts(&z, &[1], LossKind::Multiclass).unwrap();
        let p = softmax_rows(&z, None).unwrap();
        for j in 0..3 {
            let want = p.get(0, j) - if j == 1 { 1.0 } else { 0.0 };
            assert!((g.get(0, j) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_conventions() {
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    }
}
