//! Bag-level classifiers: attention MIL and an MLP over the flattened bag.
//!
//! All arithmetic runs in `f64`; parameters are rounded to `f32` only when a
//! checkpoint is taken.

mod amil;
mod checkpoint;
mod mlp;
mod optim;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::BagMatrix;

pub use amil::{amil_backward, amil_forward, AmilModel, AmilOutput};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, write_history_csv, Checkpoint, CHECKPOINT_MAGIC,
    HISTORY_HEADER,
};
pub use mlp::{mlp_backward, mlp_forward, MlpModel};
pub use optim::AdamW;
pub use train::{
    evaluate, predict, train, EpochRecord, EvalSummary, Example, TrainConfig, TrainOutcome,
};

pub const DEFAULT_ATTENTION_WIDTH: usize = 128;
pub const DEFAULT_HIDDEN_WIDTH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Amil,
    Mlp,
}

impl ClassifierKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Amil => "AMIL",
            ClassifierKind::Mlp => "MLP",
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "amil" => Ok(ClassifierKind::Amil),
            "mlp" => Ok(ClassifierKind::Mlp),
            _ => Err(Error::InvalidArgument(format!(
                "unknown classifier {s:?} (expected amil or mlp)"
            ))),
        }
    }
}

/// Scoring function for AMIL. Only the plain tanh form is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[default]
    Tanh,
    Gated,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Amil(AmilModel),
    Mlp(MlpModel),
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Amil(_) => ClassifierKind::Amil,
            Classifier::Mlp(_) => ClassifierKind::Mlp,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Classifier::Amil(m) => m.classes(),
            Classifier::Mlp(m) => m.classes(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Classifier::Amil(m) => m.params(),
            Classifier::Mlp(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Classifier::Amil(m) => m.params_mut(),
            Classifier::Mlp(m) => m.params_mut(),
        }
    }

    pub fn logits(&self, bag: &BagMatrix) -> Result<Vec<f64>> {
        match self {
            Classifier::Amil(m) => amil_forward(m, bag).map(|o| o.logits),
            Classifier::Mlp(m) => mlp_forward(m, bag),
        }
    }

    pub fn loss_and_grad(&self, bag: &BagMatrix, target: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Classifier::Amil(m) => amil_backward(m, bag, target),
            Classifier::Mlp(m) => mlp_backward(m, bag, target),
        }
    }

    /// Attention weights over the bag rows; only AMIL has them.
    pub fn attention(&self, bag: &BagMatrix) -> Result<Vec<f64>> {
        match self {
            Classifier::Amil(m) => amil_forward(m, bag).map(|o| o.attention),
            Classifier::Mlp(_) => Err(Error::Unsupported(
                "attention export needs an AMIL checkpoint".into(),
            )),
        }
    }
}

/// Max-subtracted softmax.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Cross-entropy of `softmax(logits)` against a (soft) target, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let loss = -logits
        .iter()
        .zip(target)
        .filter(|(_, &y)| y != 0.0)
        .map(|(l, y)| y * (l - lse))
        .sum::<f64>();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(l, y)| (l - lse).exp() - y)
        .collect();
    (loss, grad)
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn uniform_init(dst: &mut [f64], fan_in: f64, rng: &mut impl Rng) {
    let bound = 1.0 / fan_in.sqrt();
    for v in dst {
        *v = rng.random_range(-bound..bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert_eq!(p, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, g) = cross_entropy(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn classifier_kind_parses() {
        assert_eq!(
            "AMIL".parse::<ClassifierKind>().unwrap(),
            ClassifierKind::Amil
        );
        assert_eq!(
            "mlp".parse::<ClassifierKind>().unwrap(),
            ClassifierKind::Mlp
        );
        assert!("svm".parse::<ClassifierKind>().is_err());
    }
}
