//! Gated multi-head attention encoder with a classification head.
//!
//! Every head output `A_h` is multiplied by a scalar gate `m_h` before the heads
//! are concatenated and projected through `W^O`. A gate of zero removes the
//! head; a forward pass records the attention rows, head outputs, value
//! matrices and (after backward) the gradient flowing into each head block.

mod checkpoint;
mod model;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{Backward, ForwardPass, Model};
pub use params::{AttentionParams, LayerParams, MlpParams, OutputParams, Params};
pub use train::{train, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LossKind, Tensor};

/// Token id reserved for padding.
pub const PAD: usize = 0;

/// Block layout of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Pre-LayerNorm blocks with residual attention and MLP sublayers, final
    /// LayerNorm, and a classifier reading the first token.
    #[default]
    Standard,
    /// One attention sublayer whose `W^O` produces the logits directly from the
    /// token-mean of the concatenated head outputs: `z = mean_t(y_t) W^O + b`.
    /// No residual, MLP or final normalization sits between `y` and `z`.
    LinearHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub num_classes: usize,
    pub max_seq_len: usize,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub architecture: Architecture,
    /// Include the residual MLP in each standard block.
    #[serde(default = "default_true")]
    pub mlp: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale default: 2 layers of 4 heads, `d_model = 32`, `d_v = 8`.
    pub fn desk(vocab_size: usize, num_classes: usize, max_seq_len: usize) -> Self {
        Self {
            vocab_size,
            num_layers: 2,
            num_heads: 4,
            d_model: 32,
            d_k: 8,
            d_v: 8,
            num_classes,
            max_seq_len,
            loss_kind: if num_classes == 2 {
                LossKind::Binary
            } else {
                LossKind::Multiclass
            },
            architecture: Architecture::Standard,
            mlp: true,
            seed: 0,
        }
    }

    /// Single attention sublayer feeding the logits through `W^O`.
    pub fn linear_head(
        vocab_size: usize,
        num_heads: usize,
        d_v: usize,
        num_classes: usize,
        max_seq_len: usize,
        loss_kind: LossKind,
    ) -> Self {
        Self {
            vocab_size,
            num_layers: 1,
            num_heads,
            d_model: num_heads * d_v,
            d_k: d_v,
            d_v,
            num_classes,
            max_seq_len,
            loss_kind,
            architecture: Architecture::LinearHead,
            mlp: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.loss_kind == LossKind::Binary && self.num_classes != 2 {
            return Err(Error::Config("binary loss needs num_classes == 2".into()));
        }
        if self.d_model != self.num_heads * self.d_v {
            return Err(Error::Config(format!(
                "d_model ({}) must equal num_heads ({}) x d_v ({})",
                self.d_model, self.num_heads, self.d_v
            )));
        }
        if self.architecture == Architecture::LinearHead && (self.num_layers != 1 || self.mlp) {
            return Err(Error::Config(
                "linear-head architecture has exactly one block and no MLP".into(),
            ));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.loss_kind.output_dim(self.num_classes)
    }
}

/// Shape of the head grid: `num_layers × num_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub num_layers: usize,
    pub num_heads: usize,
}

impl HeadLayout {
    pub fn new(num_layers: usize, num_heads: usize) -> Self {
        Self {
            num_layers,
            num_heads,
        }
    }

    pub fn total(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.num_layers)
            .flat_map(move |layer| (0..self.num_heads).map(move |head| HeadId { layer, head }))
    }

    pub fn flat(&self, id: HeadId) -> Result<usize> {
        if id.layer >= self.num_layers || id.head >= self.num_heads {
            return Err(Error::Index(format!(
                "{id} outside {}x{} head grid",
                self.num_layers, self.num_heads
            )));
        }
        Ok(id.layer * self.num_heads + id.head)
    }

    pub fn id(&self, flat: usize) -> HeadId {
        HeadId {
            layer: flat / self.num_heads,
            head: flat % self.num_heads,
        }
    }
}

/// `(layer, head)`; the derived ordering is lexicographic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Per-head gate values `m_h`, stored in `(layer, head)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    layout: HeadLayout,
    values: Vec<f64>,
}

impl GateVector {
    pub fn ones(layout: HeadLayout) -> Self {
        Self {
            layout,
            values: vec![1.0; layout.total()],
        }
    }

    pub fn from_values(layout: HeadLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::Index(format!(
                "{} gate values for {} heads",
                values.len(),
                layout.total()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("gate value {v} outside [0, 1]")));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, id: HeadId) -> Result<f64> {
        Ok(self.values[self.layout.flat(id)?])
    }

    pub fn set(&mut self, id: HeadId, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Parameter(format!("gate value {value} outside [0, 1]")));
        }
        let i = self.layout.flat(id)?;
        self.values[i] = value;
        Ok(())
    }

    /// Shifts one gate by `delta` without the `[0, 1]` check, for derivative
    /// probes around `m_h = 1`.
    pub fn nudged(&self, id: HeadId, delta: f64) -> Result<Self> {
        let mut out = self.clone();
        let i = self.layout.flat(id)?;
        out.values[i] += delta;
        Ok(out)
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Elementwise product; for binary gates this is the logical AND.
    pub fn and(&self, other: &GateVector) -> Result<GateVector> {
        if self.layout != other.layout {
            return Err(Error::Index("gate layouts differ".into()));
        }
        Ok(GateVector {
            layout: self.layout,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }
}

/// One labelled token sequence. Position 0 is the pooled token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// What one head did on one example, restricted to the example's valid tokens.
#[derive(Debug, Clone)]
pub struct HeadRecord {
    /// `n(x) × n(x)`; row `t` is the attention distribution of query `t`.
    pub attn_rows: Tensor,
    /// `A_h = attn_rows · V_h`, before gating.
    pub head_output: Tensor,
    /// Gradient of the loss with respect to the head's block of `y`. `None`
    /// until backward has run.
    pub head_output_grad: Option<Tensor>,
    pub value_matrix: Tensor,
    pub effective_len: usize,
}
