use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Params;
use super::{Architecture, Example, GateVector, HeadId, HeadRecord, ModelConfig, PAD};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{LossKind, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

#[derive(Debug, Clone, Copy)]
struct HeadVars {
    attn: Var,
    output: Var,
    gated: Var,
    value: Var,
}

/// A recorded forward pass over one batch.
pub struct ForwardPass<'m> {
    model: &'m Model,
    tape: Tape,
    loss: Var,
    logits: Var,
    param_vars: Params<Var>,
    gate_vars: Vec<Var>,
    /// `[example][flat head]`
    heads: Vec<Vec<HeadVars>>,
    lens: Vec<usize>,
}

/// Gradients of the batch loss.
pub struct Backward {
    pub loss: f64,
    pub params: Params,
    /// `dL/dm_h`, in `(layer, head)` order.
    pub gate_grads: Vec<f64>,
    /// Per-head records for every example, with gradients filled in.
    pub records: BTreeMap<HeadId, Vec<HeadRecord>>,
}

/// Sinusoidal position encoding, `len × d`.
pub fn position_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = Params::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let reference = Params::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let want: Vec<_> = reference.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let got: Vec<_> = params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if want != got {
            return Err(Error::Config("parameter layout does not match config".into()));
        }
        Ok(Self { config, params })
    }

    /// Gated forward pass. `gates = None` means every gate is 1.
    pub fn forward(&self, batch: &[Example], gates: Option<&GateVector>) -> Result<ForwardPass<'_>> {
        let cfg = &self.config;
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let ones;
        let gates = match gates {
            Some(g) => {
                if g.layout() != cfg.layout() {
                    return Err(Error::Index("gate layout does not match model".into()));
                }
                g
            }
            None => {
                ones = GateVector::ones(cfg.layout());
                &ones
            }
        };
        let mut lens = Vec::with_capacity(batch.len());
        for (i, ex) in batch.iter().enumerate() {
            let n = ex.tokens.len();
            if n == 0 || n > cfg.max_seq_len {
                return Err(Error::Input(format!(
                    "example {i} has length {n}; allowed 1..={}",
                    cfg.max_seq_len
                )));
            }
            lens.push(n);
        }
        let n_pad = *lens.iter().max().expect("batch is nonempty");
        let b = batch.len();
        let (h_count, dk, dv) = (cfg.num_heads, cfg.d_k, cfg.d_v);

        let mut tape = Tape::new();
        let pv = self.params.try_map(|t| Ok::<_, Error>(tape.leaf(t.clone())))?;
        let gate_vars: Vec<Var> = gates
            .values()
            .iter()
            .map(|&g| tape.leaf(Tensor::scalar(g)))
            .collect();

        let mut ids = Vec::with_capacity(b * n_pad);
        for ex in batch {
            ids.extend_from_slice(&ex.tokens);
            ids.extend(std::iter::repeat(PAD).take(n_pad - ex.tokens.len()));
        }
        let pe = position_encoding(n_pad, cfg.d_model);
        let mut pe_tiled = Vec::with_capacity(b * n_pad * cfg.d_model);
        for _ in 0..b {
            pe_tiled.extend_from_slice(pe.data());
        }
        let pe = tape.constant(Tensor::matrix(b * n_pad, cfg.d_model, pe_tiled)?);
        let emb = tape.gather_rows(pv.token_embedding, &ids)?;
        let mut x = tape.add(emb, pe)?;

        let masks: Vec<Vec<bool>> = lens.iter().map(|&n| (0..n_pad).map(|j| j < n).collect()).collect();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = vec![Vec::with_capacity(cfg.total_heads()); b];
        let mut logits = None;

        for (l, lp) in pv.layers.iter().enumerate() {
            let h = tape.layer_norm(x, lp.ln_gain, lp.ln_bias)?;
            let q = tape.matmul(h, lp.attn.w_q)?;
            let k = tape.matmul(h, lp.attn.w_k)?;
            let v = tape.matmul(h, lp.attn.w_v)?;
            let mut rows = Vec::with_capacity(b);
            for e in 0..b {
                let qe = tape.slice_rows(q, e * n_pad, n_pad)?;
                let ke = tape.slice_rows(k, e * n_pad, n_pad)?;
                let ve = tape.slice_rows(v, e * n_pad, n_pad)?;
                let mut blocks = Vec::with_capacity(h_count);
                for hd in 0..h_count {
                    let qh = tape.slice_cols(qe, hd * dk, dk)?;
                    let kh = tape.slice_cols(ke, hd * dk, dk)?;
                    let vh = tape.slice_cols(ve, hd * dv, dv)?;
                    let kt = tape.transpose(kh);
                    let s = tape.matmul(qh, kt)?;
                    let s = tape.scale(s, scale);
                    let attn = tape.softmax_rows(s, Some(&masks[e]))?;
                    let out = tape.matmul(attn, vh)?;
                    let gated = tape.scale_by(out, gate_vars[l * h_count + hd])?;
                    heads[e].push(HeadVars {
                        attn,
                        output: out,
                        gated,
                        value: vh,
                    });
                    blocks.push(gated);
                }
                rows.push(tape.concat_cols(&blocks)?);
            }
            match cfg.architecture {
                Architecture::Standard => {
                    let y = tape.concat_rows(&rows)?;
                    let o = tape.matmul(y, lp.attn.w_o)?;
                    let o = tape.add_row(o, lp.attn.b_o)?;
                    x = tape.add(x, o)?;
                    if let Some(mlp) = &lp.mlp {
                        let h2 = tape.layer_norm(x, mlp.ln_gain, mlp.ln_bias)?;
                        let u = tape.matmul(h2, mlp.w_in)?;
                        let u = tape.add_row(u, mlp.b_in)?;
                        let u = tape.gelu(u);
                        let u = tape.matmul(u, mlp.w_out)?;
                        let u = tape.add_row(u, mlp.b_out)?;
                        x = tape.add(x, u)?;
                    }
                }
                Architecture::LinearHead => {
                    let mut pooled = Vec::with_capacity(b);
                    for (e, &row) in rows.iter().enumerate() {
                        let valid = tape.slice_rows(row, 0, lens[e])?;
                        pooled.push(tape.mean_rows(valid));
                    }
                    let ybar = tape.concat_rows(&pooled)?;
                    let z = tape.matmul(ybar, lp.attn.w_o)?;
                    logits = Some(tape.add_row(z, lp.attn.b_o)?);
                }
            }
        }

        let logits = match (cfg.architecture, &pv.output) {
            (Architecture::LinearHead, _) => logits.expect("linear head sets logits"),
            (Architecture::Standard, Some(out)) => {
                let xf = tape.layer_norm(x, out.ln_gain, out.ln_bias)?;
                let firsts = (0..b)
                    .map(|e| tape.slice_rows(xf, e * n_pad, 1))
                    .collect::<Result<Vec<_>>>()?;
                let pooled = tape.concat_rows(&firsts)?;
                let z = tape.matmul(pooled, out.w)?;
                tape.add_row(z, out.b)?
            }
            (Architecture::Standard, None) => {
                return Err(Error::Config("standard architecture without output head".into()))
            }
        };
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let loss = tape.cross_entropy(logits, &labels, cfg.loss_kind)?;
        let lv = tape.value(loss).data()[0];
        if !lv.is_finite() {
            return Err(Error::Input(format!("non-finite loss {lv}")));
        }

        Ok(ForwardPass {
            model: self,
            tape,
            loss,
            logits,
            param_vars: pv,
            gate_vars,
            heads,
            lens,
        })
    }

    /// Mean loss over `examples`, evaluated in chunks of `batch_size`.
    pub fn mean_loss(&self, examples: &[Example], gates: Option<&GateVector>, batch_size: usize) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(batch_size.max(1)) {
            total += self.forward(chunk, gates)?.loss() * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    /// Per-example losses (one forward per example).
    pub fn example_losses(&self, examples: &[Example], gates: Option<&GateVector>) -> Result<Vec<f64>> {
        examples
            .iter()
            .map(|ex| Ok(self.forward(std::slice::from_ref(ex), gates)?.loss()))
            .collect()
    }

    /// Argmax class per example.
    pub fn predict(&self, examples: &[Example], gates: Option<&GateVector>, batch_size: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let pass = self.forward(chunk, gates)?;
            out.extend(pass.predictions());
        }
        Ok(out)
    }
}

impl<'m> ForwardPass<'m> {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn effective_lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn predictions(&self) -> Vec<usize> {
        let z = self.logits();
        (0..z.rows())
            .map(|i| match self.model.config.loss_kind {
                LossKind::Binary => usize::from(z.get(i, 0) > 0.0),
                LossKind::Multiclass => {
                    let row = z.row(i);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                }
            })
            .collect()
    }

    /// Attention rows over the padded batch for one example and head,
    /// `n_pad × n_pad`, padded key columns exactly zero.
    pub fn padded_attention(&self, example: usize, id: HeadId) -> Result<&Tensor> {
        let flat = self.model.config.layout().flat(id)?;
        let hv = self
            .heads
            .get(example)
            .ok_or_else(|| Error::Index(format!("example {example} not in batch")))?;
        Ok(self.tape.value(hv[flat].attn))
    }

    fn build_records(&self, grads: bool) -> Result<BTreeMap<HeadId, Vec<HeadRecord>>> {
        let layout = self.model.config.layout();
        let mut out: BTreeMap<HeadId, Vec<HeadRecord>> = BTreeMap::new();
        for (e, hv) in self.heads.iter().enumerate() {
            let n = self.lens[e];
            for (flat, vars) in hv.iter().enumerate() {
                let attn = self.tape.value(vars.attn).slice_rows(0, n)?.slice_cols(0, n)?;
                let head_output = self.tape.value(vars.output).slice_rows(0, n)?;
                let value_matrix = self.tape.value(vars.value).slice_rows(0, n)?;
                let head_output_grad = if grads {
                    Some(self.tape.grad(vars.gated)?.slice_rows(0, n)?)
                } else {
                    None
                };
                out.entry(layout.id(flat)).or_default().push(HeadRecord {
                    attn_rows: attn,
                    head_output,
                    head_output_grad,
                    value_matrix,
                    effective_len: n,
                });
            }
        }
        Ok(out)
    }

    /// Head records without gradients.
    pub fn records(&self) -> Result<BTreeMap<HeadId, Vec<HeadRecord>>> {
        self.build_records(false)
    }

    pub fn backward(mut self) -> Result<Backward> {
        self.tape.backward(self.loss)?;
        let tape = &self.tape;
        let params = self.param_vars.try_map(|&v| tape.grad(v))?;
        let gate_grads = self
            .gate_vars
            .iter()
            .map(|&v| Ok(tape.grad(v)?.data()[0]))
            .collect::<Result<Vec<_>>>()?;
        let records = self.build_records(true)?;
        Ok(Backward {
            loss: self.loss(),
            params,
            gate_grads,
            records,
        })
    }
}
