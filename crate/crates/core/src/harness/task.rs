//! Synthetic classification tasks with labels derivable from the tokens.
//!
//! Vocabulary layout: `0 = PAD`, `1 = CLS`, `2 = MARK`, then one token per
//! class, then filler tokens. Every sequence starts with `CLS`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transformer::Example;

pub const CLS: usize = 1;
pub const MARK: usize = 2;
const FIRST_CLASS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Label is the most frequent class token.
    Majority,
    /// Label is the class token that follows the single `MARK`; the rest of
    /// the body is filler.
    Needle,
    /// Binary label: parity of the number of `MARK` tokens.
    Parity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Body length range (inclusive), not counting the leading `CLS`.
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    /// Needle only: class tokens scattered through the filler, so the label
    /// must be read at the position after `MARK`.
    #[serde(default)]
    pub distractors: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn class_token(&self, class: usize) -> usize {
        FIRST_CLASS + class
    }

    fn first_filler(&self) -> usize {
        FIRST_CLASS + self.num_classes
    }

    /// Longest sequence the generator emits, including `CLS`.
    pub fn max_seq_len(&self) -> usize {
        self.max_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are needed".into()));
        }
        if self.vocab_size <= self.first_filler() {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no filler tokens after {} classes and 3 specials",
                self.vocab_size, self.num_classes
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid body length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        match self.kind {
            TaskKind::Needle if self.min_len < 2 + self.distractors => Err(Error::Config(
                "needle bodies need room for MARK, a class token and the distractors".into(),
            )),
            TaskKind::Parity if self.num_classes != 2 => {
                Err(Error::Config("parity is a two-class task".into()))
            }
            TaskKind::Majority if self.max_len < 1 => Err(Error::Config("empty bodies".into())),
            _ => Ok(()),
        }
    }

    /// Label implied by the task rule, or `None` when the tokens admit none.
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        let body = tokens.strip_prefix(&[CLS])?;
        let class_of = |t: usize| (t >= FIRST_CLASS && t < self.first_filler()).then(|| t - FIRST_CLASS);
        match self.kind {
            TaskKind::Majority => {
                let mut counts = vec![0usize; self.num_classes];
                for &t in body {
                    if let Some(c) = class_of(t) {
                        counts[c] += 1;
                    }
                }
                let max = *counts.iter().max()?;
                let winners: Vec<usize> = (0..self.num_classes).filter(|&c| counts[c] == max).collect();
                (max > 0 && winners.len() == 1).then(|| winners[0])
            }
            TaskKind::Needle => {
                let p = body.iter().position(|&t| t == MARK)?;
                body.get(p + 1).copied().and_then(class_of)
            }
            TaskKind::Parity => Some(body.iter().filter(|&&t| t == MARK).count() % 2),
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.first_filler()..self.vocab_size)
    }

    fn sample(&self, label: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let mut body: Vec<usize>;
        match self.kind {
            TaskKind::Majority => {
                let c = self.num_classes;
                let lo = len / c + 1;
                let hi = (len / 2 + 1).max(lo).min(len);
                let k = rng.gen_range(lo.min(hi)..=hi);
                body = vec![self.class_token(label); k];
                let mut counts = vec![0usize; c];
                counts[label] = k;
                while body.len() < len {
                    let other = rng.gen_range(0..c);
                    if other != label && counts[other] + 1 < k && rng.gen_bool(0.6) {
                        counts[other] += 1;
                        body.push(self.class_token(other));
                    } else {
                        body.push(self.filler(rng));
                    }
                }
                body.shuffle(rng);
            }
            TaskKind::Needle => {
                body = (0..len).map(|_| self.filler(rng)).collect();
                let p = rng.gen_range(0..len - 1);
                body[p] = MARK;
                body[p + 1] = self.class_token(label);
                let mut free: Vec<usize> = (0..len).filter(|&i| i != p && i != p + 1).collect();
                free.shuffle(rng);
                for &i in free.iter().take(self.distractors) {
                    body[i] = self.class_token(rng.gen_range(0..self.num_classes));
                }
            }
            TaskKind::Parity => {
                body = (0..len).map(|_| self.filler(rng)).collect();
                let mut count = rng.gen_range(0..=len);
                if count % 2 != label {
                    count = if count == 0 { 1 } else { count - 1 };
                }
                let mut positions: Vec<usize> = (0..len).collect();
                positions.shuffle(rng);
                for &p in positions.iter().take(count) {
                    body[p] = MARK;
                }
            }
        }
        let mut tokens = Vec::with_capacity(len + 1);
        tokens.push(CLS);
        tokens.extend(body);
        tokens
    }

    /// `n` examples with labels cycling through the classes, then shuffled.
    fn generate(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        labels.shuffle(rng);
        labels
            .into_iter()
            .map(|label| Example {
                tokens: self.sample(label, rng),
                label,
            })
            .collect()
    }
}

/// Deterministic train and eval sets for `spec`.
pub fn gen_task(spec: &SyntheticTask, n_train: usize, n_eval: usize) -> Result<(Vec<Example>, Vec<Example>)> {
    spec.validate()?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("n_train and n_eval must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = spec.generate(n_train, &mut rng);
    let eval = spec.generate(n_eval, &mut rng);
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(kind: TaskKind, classes: usize) -> SyntheticTask {
        SyntheticTask {
            kind,
            vocab_size: 16,
            min_len: 4,
            max_len: 12,
            num_classes: classes,
            distractors: 0,
            seed: 3,
        }
    }

    #[test]
    fn majority_rule() {
        let t = task(TaskKind::Majority, 3);
        let (a, b) = (t.class_token(0), t.class_token(1));
        assert_eq!(t.label_of(&[CLS, a, a, b]), Some(0));
        assert_eq!(t.label_of(&[CLS, a, b]), None);
    }

    #[test]
    fn needle_rule() {
        let t = task(TaskKind::Needle, 3);
        let x = t.first_filler();
        assert_eq!(t.label_of(&[CLS, x, MARK, t.class_token(2), x + 1]), Some(2));
    }

    #[test]
    fn parity_rule() {
        let t = task(TaskKind::Parity, 2);
        let x = t.first_filler();
        assert_eq!(t.label_of(&[CLS, MARK, x, MARK, MARK]), Some(1));
        assert_eq!(t.label_of(&[CLS, x]), Some(0));
    }

    #[test]
    fn generated_labels_follow_rules_and_balance() {
        for (kind, classes) in [(TaskKind::Majority, 3), (TaskKind::Needle, 4), (TaskKind::Parity, 2)] {
            let t = task(kind, classes);
            let (train, eval) = gen_task(&t, 600, 100).unwrap();
            let mut counts = vec![0usize; classes];
            for ex in train.iter().chain(&eval) {
                assert_eq!(t.label_of(&ex.tokens), Some(ex.label), "{kind:?} {:?}", ex.tokens);
                assert!(ex.tokens.len() <= t.max_seq_len());
                counts[ex.label] += 1;
            }
            let expected = 700.0 / classes as f64;
            for c in counts {
                assert!((c as f64 - expected).abs() <= 0.05 * expected, "{kind:?}");
            }
        }
    }

    #[test]
    fn needle_distractors_keep_the_rule() {
        let mut t = task(TaskKind::Needle, 4);
        t.distractors = 2;
        let (train, _) = gen_task(&t, 200, 1).unwrap();
        for ex in &train {
            assert_eq!(t.label_of(&ex.tokens), Some(ex.label));
            let classes = ex.tokens.iter().filter(|&&x| x >= FIRST_CLASS && x < t.first_filler()).count();
            assert_eq!(classes, 3);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let t = task(TaskKind::Needle, 4);
        assert_eq!(gen_task(&t, 50, 10).unwrap(), gen_task(&t, 50, 10).unwrap());
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let mut t = task(TaskKind::Majority, 3);
        t.vocab_size = 6;
        assert!(matches!(gen_task(&t, 1, 1), Err(Error::Config(_))));
        let mut t = task(TaskKind::Parity, 3);
        t.vocab_size = 20;
        assert!(matches!(gen_task(&t, 1, 1), Err(Error::Config(_))));
        let t = task(TaskKind::Needle, 2);
        assert!(matches!(gen_task(&t, 0, 1), Err(Error::Config(_))));
    }
}
