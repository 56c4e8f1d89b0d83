use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelConfig};
use crate::tensor::Tensor;

/// Per-layer attention weights. Head `h` owns columns `h*d_k..(h+1)*d_k` of
/// `w_q`/`w_k`, columns `h*d_v..(h+1)*d_v` of `w_v`, and the matching rows of
/// `w_o` (the block that maps its output into the next space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub b_o: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub ln_gain: T,
    pub ln_bias: T,
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln_gain: T,
    pub ln_bias: T,
    pub attn: AttentionParams<T>,
    pub mlp: Option<MlpParams<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputParams<T> {
    pub ln_gain: T,
    pub ln_bias: T,
    pub w: T,
    pub b: T,
}

/// All trainable parameters, generic so the same shape can carry tensors,
/// tape handles or gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T = Tensor> {
    pub token_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    /// Final LayerNorm and classifier; absent for the linear-head layout.
    pub output: Option<OutputParams<T>>,
}

impl<T> Params<T> {
    /// Parameters in canonical order.
    pub fn refs(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln_gain"), &layer.ln_gain));
            out.push((p("ln_bias"), &layer.ln_bias));
            out.push((p("attn.w_q"), &layer.attn.w_q));
            out.push((p("attn.w_k"), &layer.attn.w_k));
            out.push((p("attn.w_v"), &layer.attn.w_v));
            out.push((p("attn.w_o"), &layer.attn.w_o));
            out.push((p("attn.b_o"), &layer.attn.b_o));
            if let Some(m) = &layer.mlp {
                out.push((p("mlp.ln_gain"), &m.ln_gain));
                out.push((p("mlp.ln_bias"), &m.ln_bias));
                out.push((p("mlp.w_in"), &m.w_in));
                out.push((p("mlp.b_in"), &m.b_in));
                out.push((p("mlp.w_out"), &m.w_out));
                out.push((p("mlp.b_out"), &m.b_out));
            }
        }
        if let Some(o) = &self.output {
            out.push(("output.ln_gain".into(), &o.ln_gain));
            out.push(("output.ln_bias".into(), &o.ln_bias));
            out.push(("output.w".into(), &o.w));
            out.push(("output.b".into(), &o.b));
        }
        out
    }

    /// Mutable parameters in canonical order.
    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.ln_gain);
            out.push(&mut layer.ln_bias);
            let a = &mut layer.attn;
            out.extend([&mut a.w_q, &mut a.w_k, &mut a.w_v, &mut a.w_o, &mut a.b_o]);
            if let Some(m) = &mut layer.mlp {
                out.extend([
                    &mut m.ln_gain,
                    &mut m.ln_bias,
                    &mut m.w_in,
                    &mut m.b_in,
                    &mut m.w_out,
                    &mut m.b_out,
                ]);
            }
        }
        if let Some(o) = &mut self.output {
            out.extend([&mut o.ln_gain, &mut o.ln_bias, &mut o.w, &mut o.b]);
        }
        out
    }

    /// Structure-preserving map, visiting parameters in canonical order.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&T) -> Result<U, E>) -> Result<Params<U>, E> {
        let token_embedding = f(&self.token_embedding)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let ln_gain = f(&layer.ln_gain)?;
            let ln_bias = f(&layer.ln_bias)?;
            let a = &layer.attn;
            let attn = AttentionParams {
                w_q: f(&a.w_q)?,
                w_k: f(&a.w_k)?,
                w_v: f(&a.w_v)?,
                w_o: f(&a.w_o)?,
                b_o: f(&a.b_o)?,
            };
            let mlp = match &layer.mlp {
                Some(m) => Some(MlpParams {
                    ln_gain: f(&m.ln_gain)?,
                    ln_bias: f(&m.ln_bias)?,
                    w_in: f(&m.w_in)?,
                    b_in: f(&m.b_in)?,
                    w_out: f(&m.w_out)?,
                    b_out: f(&m.b_out)?,
                }),
                None => None,
            };
            layers.push(LayerParams {
                ln_gain,
                ln_bias,
                attn,
                mlp,
            });
        }
        let output = match &self.output {
            Some(o) => Some(OutputParams {
                ln_gain: f(&o.ln_gain)?,
                ln_bias: f(&o.ln_bias)?,
                w: f(&o.w)?,
                b: f(&o.b)?,
            }),
            None => None,
        };
        Ok(Params {
            token_embedding,
            layers,
            output,
        })
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

fn row(cols: usize, value: f64) -> Tensor {
    Tensor::filled(&[1, cols], value)
}

impl Params<Tensor> {
    /// Seeded initialization: Xavier-uniform matrices, unit LayerNorm gains,
    /// zero biases, unit-variance embeddings.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let hk = cfg.num_heads * cfg.d_k;
        let hv = cfg.num_heads * cfg.d_v;
        let token_embedding = uniform(rng, cfg.vocab_size, d, 3f64.sqrt());
        let linear = cfg.architecture == Architecture::LinearHead;
        let attn_out = if linear { cfg.output_dim() } else { d };
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams {
                ln_gain: row(d, 1.0),
                ln_bias: row(d, 0.0),
                attn: AttentionParams {
                    w_q: xavier(rng, d, hk),
                    w_k: xavier(rng, d, hk),
                    w_v: xavier(rng, d, hv),
                    w_o: xavier(rng, hv, attn_out),
                    b_o: row(attn_out, 0.0),
                },
                mlp: cfg.mlp.then(|| MlpParams {
                    ln_gain: row(d, 1.0),
                    ln_bias: row(d, 0.0),
                    w_in: xavier(rng, d, 4 * d),
                    b_in: row(4 * d, 0.0),
                    w_out: xavier(rng, 4 * d, d),
                    b_out: row(d, 0.0),
                }),
            })
            .collect();
        let output = (!linear).then(|| OutputParams {
            ln_gain: row(d, 1.0),
            ln_bias: row(d, 0.0),
            w: xavier(rng, d, cfg.output_dim()),
            b: row(cfg.output_dim(), 0.0),
        });
        Params {
            token_embedding,
            layers,
            output,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.refs().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.refs().iter().all(|t| t.all_finite())
    }
}
