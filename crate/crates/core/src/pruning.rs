//! Budgeted head selection, the pruning risk, baseline criteria and masked
//! model views.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{HeadValues, Metric, ScoreTable};
use crate::transformer::{Example, ForwardPass, GateVector, HeadId, HeadLayout, Model};

/// Binary retain/prune decision per head.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    layout: HeadLayout,
    retained: Vec<bool>,
    k: usize,
    rho: f64,
}

impl PruneMask {
    pub fn from_retained(layout: HeadLayout, retained: Vec<bool>) -> Result<Self> {
        if retained.len() != layout.total() {
            return Err(Error::Index(format!(
                "{} mask entries for {} heads",
                retained.len(),
                layout.total()
            )));
        }
        let k = retained.iter().filter(|&&r| r).count();
        let total = layout.total();
        Ok(Self {
            layout,
            retained,
            k,
            rho: (total - k) as f64 / total as f64,
        })
    }

    pub fn keep_all(layout: HeadLayout) -> Self {
        Self::from_retained(layout, vec![true; layout.total()]).expect("sizes agree")
    }

    pub fn from_gates(gates: &GateVector) -> Result<Self> {
        if !gates.is_binary() {
            return Err(Error::Parameter("mask gates must be 0 or 1".into()));
        }
        Self::from_retained(gates.layout(), gates.values().iter().map(|&v| v == 1.0).collect())
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Realized pruning fraction `(|H| - k) / |H|`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn retained(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_retained(&self, id: HeadId) -> Result<bool> {
        Ok(self.retained[self.layout.flat(id)?])
    }

    pub fn retained_ids(&self) -> Vec<HeadId> {
        self.layout
            .heads()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn pruned_ids(&self) -> Vec<HeadId> {
        self.layout
            .heads()
            .zip(&self.retained)
            .filter(|(_, &r)| !r)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn gates(&self) -> GateVector {
        GateVector::from_values(
            self.layout,
            self.retained.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect(),
        )
        .expect("binary gates are valid")
    }

    pub fn and(&self, other: &PruneMask) -> Result<PruneMask> {
        if self.layout != other.layout {
            return Err(Error::Index("mask layouts differ".into()));
        }
        Self::from_retained(
            self.layout,
            self.retained.iter().zip(&other.retained).map(|(a, b)| *a && *b).collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MaskFile {
            k: self.k,
            rho: self.rho,
            retained: self.retained_ids().iter().map(|id| [id.layer, id.head]).collect(),
        })?)
    }

    /// Parses `{"k", "rho", "retained": [[layer, head], ...]}` for the given grid.
    pub fn from_json(text: &str, layout: HeadLayout) -> Result<Self> {
        let file: MaskFile = serde_json::from_str(text)?;
        let mut retained = vec![false; layout.total()];
        for [layer, head] in file.retained {
            let i = layout.flat(HeadId::new(layer, head))?;
            if std::mem::replace(&mut retained[i], true) {
                return Err(Error::Index(format!("head L{layer}H{head} listed twice")));
            }
        }
        let mask = Self::from_retained(layout, retained)?;
        if mask.k != file.k {
            return Err(Error::Index(format!(
                "mask lists {} heads but k = {}",
                mask.k, file.k
            )));
        }
        Ok(mask)
    }

    /// `num_layers` rows of 0 (pruned) / 1 (retained).
    pub fn heatmap_csv(&self) -> String {
        let values = self.retained.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
        crate::scoring::heatmap_csv(&HeadValues::new(self.layout, values).expect("sizes agree"))
    }

    /// Inverse of [`PruneMask::heatmap_csv`].
    pub fn from_heatmap_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Input("empty mask CSV".into()))?;
        let num_heads = header.split(',').count() - 1;
        let mut retained = Vec::new();
        let mut num_layers = 0;
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != num_heads + 1 {
                return Err(Error::Input(format!("mask CSV row {line:?} has wrong width")));
            }
            for c in &cells[1..] {
                match c.trim() {
                    "1" => retained.push(true),
                    "0" => retained.push(false),
                    other => return Err(Error::Input(format!("mask cell {other:?} is not 0 or 1"))),
                }
            }
            num_layers += 1;
        }
        Self::from_retained(HeadLayout::new(num_layers, num_heads), retained)
    }
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    k: usize,
    rho: f64,
    retained: Vec<[usize; 2]>,
}

/// Retained-head count for pruning ratio `rho`: `round((1 - rho) |H|)`,
/// ties to even.
pub fn k_for_ratio(rho: f64, total: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Parameter(format!("pruning ratio {rho} outside [0, 1]")));
    }
    Ok(((1.0 - rho) * total as f64).round_ties_even() as usize)
}

/// Retains the `k` highest-scoring heads; equal scores keep the
/// lexicographically smaller `(layer, head)` first.
pub fn select_topk(scores: &HeadValues, k: usize) -> Result<PruneMask> {
    let total = scores.len();
    if k > total {
        return Err(Error::Budget { k, total });
    }
    if let Some(v) = scores.values().iter().find(|v| !v.is_finite()) {
        return Err(Error::Score(format!("non-finite score {v}")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    let v = scores.values();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    let mut retained = vec![false; total];
    for &i in &order[..k] {
        retained[i] = true;
    }
    PruneMask::from_retained(scores.layout(), retained)
}

/// Summed score of the pruned heads, `R(m) = sum_h (1 - m_h) s_h`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RiskValue(pub f64);

pub fn risk(scores: &HeadValues, mask: &PruneMask) -> Result<RiskValue> {
    if scores.layout() != mask.layout {
        return Err(Error::Index(format!(
            "scores cover {:?} but mask covers {:?}",
            scores.layout(),
            mask.layout
        )));
    }
    Ok(RiskValue(
        scores
            .values()
            .iter()
            .zip(&mask.retained)
            .filter(|(_, &r)| !r)
            .map(|(s, _)| s)
            .sum::<f64>()
            + 0.0,
    ))
}

/// Head-selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Hies,
    His,
    Ad,
    L2,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Hies,
        Criterion::His,
        Criterion::Ad,
        Criterion::L2,
        Criterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Hies => "hies",
            Criterion::His => "his",
            Criterion::Ad => "ad",
            Criterion::L2 => "l2",
            Criterion::Random => "random",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown criterion {s:?}")))
    }
}

/// L2 norm of everything head `h` owns: its `W^Q`, `W^K`, `W^V` columns and
/// its block of `W^O`.
pub fn head_l2_norms(model: &Model) -> HeadValues {
    let cfg = &model.config;
    let (dk, dv) = (cfg.d_k, cfg.d_v);
    let mut values = Vec::with_capacity(cfg.total_heads());
    for layer in &model.params.layers {
        let a = &layer.attn;
        for h in 0..cfg.num_heads {
            let mut sq = 0.0;
            for w in [&a.w_q, &a.w_k] {
                for i in 0..w.rows() {
                    sq += w.row(i)[h * dk..(h + 1) * dk].iter().map(|x| x * x).sum::<f64>();
                }
            }
            for i in 0..a.w_v.rows() {
                sq += a.w_v.row(i)[h * dv..(h + 1) * dv].iter().map(|x| x * x).sum::<f64>();
            }
            for r in h * dv..(h + 1) * dv {
                sq += a.w_o.row(r).iter().map(|x| x * x).sum::<f64>();
            }
            values.push(sq.sqrt());
        }
    }
    HeadValues::new(cfg.layout(), values).expect("one norm per head")
}

/// Mask for `criterion` at budget `k`. HIES/HIS retain the largest scores; AD
/// prunes the lowest-entropy heads first (retains the largest AE); L2 retains
/// the largest parameter norms; Random draws `k` heads uniformly with `seed`.
pub fn baseline_mask(criterion: Criterion, model: &Model, scores: &ScoreTable, k: usize, seed: u64) -> Result<PruneMask> {
    if scores.layout() != model.config.layout() {
        return Err(Error::Index("score table does not match model".into()));
    }
    match criterion {
        Criterion::L2 => select_topk(&head_l2_norms(model), k),
        _ => mask_from_scores(criterion, scores, k, seed),
    }
}

/// [`baseline_mask`] for the criteria that need only the score table.
pub fn mask_from_scores(criterion: Criterion, scores: &ScoreTable, k: usize, seed: u64) -> Result<PruneMask> {
    match criterion {
        Criterion::Hies => select_topk(&scores.column(Metric::Hies), k),
        Criterion::His => select_topk(&scores.column(Metric::His), k),
        Criterion::Ad => select_topk(&scores.column(Metric::Ae), k),
        Criterion::Random => random_mask(scores.layout(), k, seed),
        Criterion::L2 => Err(Error::Parameter("the l2 criterion needs model parameters".into())),
    }
}

pub fn random_mask(layout: HeadLayout, k: usize, seed: u64) -> Result<PruneMask> {
    let total = layout.total();
    if k > total {
        return Err(Error::Budget { k, total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut rng);
    let mut retained = vec![false; total];
    for &i in &idx[..k] {
        retained[i] = true;
    }
    PruneMask::from_retained(layout, retained)
}

/// A model evaluated with fixed binary gates.
#[derive(Debug, Clone)]
pub struct MaskedModel<'m> {
    model: &'m Model,
    mask: PruneMask,
}

pub fn apply_mask<'m>(model: &'m Model, mask: &PruneMask) -> Result<MaskedModel<'m>> {
    if mask.layout != model.config.layout() {
        return Err(Error::Index("mask does not match model".into()));
    }
    Ok(MaskedModel {
        model,
        mask: mask.clone(),
    })
}

impl<'m> MaskedModel<'m> {
    pub fn mask(&self) -> &PruneMask {
        &self.mask
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn forward(&self, batch: &[Example]) -> Result<ForwardPass<'m>> {
        self.model.forward(batch, Some(&self.mask.gates()))
    }

    pub fn predict(&self, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
        self.model.predict(examples, Some(&self.mask.gates()), batch_size)
    }

    /// Further restriction by `other`; equals applying `self.mask AND other`.
    pub fn restrict(&self, other: &PruneMask) -> Result<MaskedModel<'m>> {
        apply_mask(self.model, &self.mask.and(other)?)
    }
}
