//! Independent oracles shared by the integration suites: a cyclic Jacobi
//! eigen-solver, a loop-based reference forward pass and small generators.
#![allow(dead_code)]

use hies_core::tensor::LossKind;
use hies_core::transformer::{Architecture, Example, Model, ModelConfig};
use hies_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut a: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

pub fn lambda_max(a: &[Vec<f64>]) -> f64 {
    jacobi_eigenvalues(a).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `sigma_max(M) = sqrt(lambda_max(M^T M))`.
pub fn sigma_max(m: &Tensor) -> f64 {
    let (r, c) = (m.rows(), m.cols());
    let gram: Vec<Vec<f64>> = (0..c)
        .map(|i| (0..c).map(|j| (0..r).map(|k| m.get(k, i) * m.get(k, j)).sum()).collect())
        .collect();
    lambda_max(&gram).max(0.0).sqrt()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Simplex point; the concentration varies from flat to nearly one-hot.
pub fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    if rng.gen_bool(0.05) {
        let mut p = vec![0.0; n];
        p[rng.gen_range(0..n)] = 1.0;
        return p;
    }
    let power = [0.5, 1.0, 3.0, 8.0][rng.gen_range(0..4)];
    let x: Vec<f64> = (0..n).map(|_| (-(1.0 - rng.gen::<f64>()).ln()).powf(power)).collect();
    let s: f64 = x.iter().sum();
    x.into_iter().map(|v| v / s).collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Small standard or linear-head config with random widths.
pub fn tiny_config(rng: &mut ChaCha8Rng, architecture: Architecture, loss: LossKind) -> ModelConfig {
    let num_heads = rng.gen_range(1..=3);
    let d_v = rng.gen_range(2..=4);
    let classes = match loss {
        LossKind::Binary => 2,
        LossKind::Multiclass => rng.gen_range(2..=4),
    };
    let linear = architecture == Architecture::LinearHead;
    ModelConfig {
        vocab_size: 9,
        num_layers: if linear { 1 } else { rng.gen_range(1..=2) },
        num_heads,
        d_model: num_heads * d_v,
        d_k: rng.gen_range(2..=4),
        d_v,
        num_classes: classes,
        max_seq_len: 7,
        loss_kind: loss,
        architecture,
        mlp: !linear && rng.gen_bool(0.7),
        seed: rng.gen(),
    }
}

pub fn random_examples(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize, min_len: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(min_len..=cfg.max_seq_len);
            Example {
                tokens: (0..len).map(|_| rng.gen_range(1..cfg.vocab_size)).collect(),
                label: rng.gen_range(0..cfg.num_classes),
            }
        })
        .collect()
}

/// A model with parameters perturbed away from the structured init so that
/// biases and LayerNorm affine terms are exercised.
pub fn random_model(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Model {
    let mut model = Model::new(cfg).unwrap();
    for t in model.params.refs_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    model
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn layer_norm(x: &[Vec<f64>], g: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g.data()[j] * (v - mean) / (var + 1e-5).sqrt() + b.data()[j])
                .collect()
        })
        .collect()
}

fn add_bias(x: &mut [Vec<f64>], b: &Tensor) {
    for row in x.iter_mut() {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits for one unpadded example, written with plain loops and no tape.
pub fn reference_logits(model: &Model, tokens: &[usize], gates: &[f64]) -> Vec<f64> {
    let cfg = &model.config;
    let (n, d) = (tokens.len(), cfg.d_model);
    let emb = &model.params.token_embedding;
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    emb.get(t, i) + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect();
    for (l, lp) in model.params.layers.iter().enumerate() {
        let h = layer_norm(&x, &lp.ln_gain, &lp.ln_bias);
        let q = mul(&h, &mat(&lp.attn.w_q));
        let k = mul(&h, &mat(&lp.attn.w_k));
        let v = mul(&h, &mat(&lp.attn.w_v));
        let mut y = vec![vec![0.0; cfg.num_heads * cfg.d_v]; n];
        for hd in 0..cfg.num_heads {
            let gate = gates[l * cfg.num_heads + hd];
            for t in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|s| {
                        (0..cfg.d_k)
                            .map(|c| q[t][hd * cfg.d_k + c] * k[s][hd * cfg.d_k + c])
                            .sum::<f64>()
                            / (cfg.d_k as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..cfg.d_v {
                    let a: f64 = (0..n).map(|s| e[s] / z * v[s][hd * cfg.d_v + c]).sum();
                    y[t][hd * cfg.d_v + c] = gate * a;
                }
            }
        }
        match cfg.architecture {
            Architecture::LinearHead => {
                let pooled: Vec<f64> = (0..y[0].len()).map(|c| y.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
                let mut z = mul(&[pooled], &mat(&lp.attn.w_o));
                add_bias(&mut z, &lp.attn.b_o);
                return z.remove(0);
            }
            Architecture::Standard => {
                let mut o = mul(&y, &mat(&lp.attn.w_o));
                add_bias(&mut o, &lp.attn.b_o);
                for (xr, orow) in x.iter_mut().zip(&o) {
                    for (a, b) in xr.iter_mut().zip(orow) {
                        *a += b;
                    }
                }
                if let Some(m) = &lp.mlp {
                    let h2 = layer_norm(&x, &m.ln_gain, &m.ln_bias);
                    let mut u = mul(&h2, &mat(&m.w_in));
                    add_bias(&mut u, &m.b_in);
                    let u: Vec<Vec<f64>> = u.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
                    let mut u = mul(&u, &mat(&m.w_out));
                    add_bias(&mut u, &m.b_out);
                    for (xr, ur) in x.iter_mut().zip(&u) {
                        for (a, b) in xr.iter_mut().zip(ur) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    let out = model.params.output.as_ref().expect("standard model has an output head");
    let xf = layer_norm(&x[..1], &out.ln_gain, &out.ln_bias);
    let mut z = mul(&xf, &mat(&out.w));
    add_bias(&mut z, &out.b);
    z.remove(0)
}

/// Cross-entropy of one example from its logits.
pub fn reference_loss(logits: &[f64], label: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::Binary => {
            let z = logits[0];
            let p = 1.0 / (1.0 + (-z).exp());
            if label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        }
        LossKind::Multiclass => {
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            lse - logits[label]
        }
    }
}

/// Central finite difference of the model loss on one example in gate `flat`.
pub fn gate_fd(model: &Model, ex: &Example, gates: &[f64], flat: usize, step: f64) -> f64 {
    let mut plus = gates.to_vec();
    let mut minus = gates.to_vec();
    plus[flat] += step;
    minus[flat] -= step;
    let kind = model.config.loss_kind;
    let lp = reference_loss(&reference_logits(model, &ex.tokens, &plus), ex.label, kind);
    let lm = reference_loss(&reference_logits(model, &ex.tokens, &minus), ex.label, kind);
    (lp - lm) / (2.0 * step)
}

/// Needle task on a narrow 2-layer, 4-head model; small enough for repeated
/// end-to-end runs.
pub fn small_needle() -> hies_core::harness::ExperimentConfig {
    use hies_core::harness::{ExperimentConfig, SyntheticTask, TaskKind};
    let task = SyntheticTask {
        kind: TaskKind::Needle,
        vocab_size: 16,
        min_len: 6,
        max_len: 10,
        num_classes: 3,
        distractors: 0,
        seed: 0,
    };
    let mut model = ModelConfig::desk(task.vocab_size, task.num_classes, task.max_seq_len());
    model.d_model = 16;
    model.d_k = 4;
    model.d_v = 4;
    ExperimentConfig {
        model,
        task,
        n_train: 600,
        n_eval: 200,
        n_calib: 64,
        ratios: vec![0.25, 0.5, 0.75],
        alpha_grid: vec![0.0, 0.5, 0.9],
        seeds: vec![0, 1],
        ..ExperimentConfig::desk_needle()
    }
}
