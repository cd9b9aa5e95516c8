use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    argmax, cross_entropy, one_hot, AdamW, AmilModel, AttentionKind, Classifier, ClassifierKind,
    MlpModel, DEFAULT_ATTENTION_WIDTH, DEFAULT_HIDDEN_WIDTH,
};
use crate::augment::{augment_bag, mixup_batch, AugmentConfig, Mode};
use crate::error::{Error, Result};
use crate::matrix::BagMatrix;
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub attention_width: usize,
    pub hidden_width: usize,
    pub attention: AttentionKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            attention_width: DEFAULT_ATTENTION_WIDTH,
            hidden_width: DEFAULT_HIDDEN_WIDTH,
            attention: AttentionKind::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.attention == AttentionKind::Gated {
            return Err(Error::Unsupported(
                "gated attention is not implemented".into(),
            ));
        }
        Ok(())
    }
}

/// One labelled bag.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub bag: BagMatrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, rounded to `f32` precision.
    pub model: Classifier,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

pub fn predict(model: &Classifier, bag: &BagMatrix) -> Result<usize> {
    Ok(argmax(&model.logits(bag)?))
}

/// Accuracy, mean cross-entropy and predictions over `examples`.
pub fn evaluate(model: &Classifier, examples: &[Example]) -> Result<EvalSummary> {
    let classes = model.classes();
    let scored: Vec<(usize, f64)> = examples
        .par_iter()
        .map(|ex| {
            let logits = model.logits(&ex.bag)?;
            let (loss, _) = cross_entropy(&logits, &one_hot(ex.label, classes));
            Ok((argmax(&logits), loss))
        })
        .collect::<Result<_>>()?;
    let n = examples.len().max(1) as f64;
    let correct = scored
        .iter()
        .zip(examples)
        .filter(|((p, _), ex)| *p == ex.label)
        .count();
    Ok(EvalSummary {
        accuracy: correct as f64 / n,
        loss: scored.iter().map(|(_, l)| l).sum::<f64>() / n,
        predictions: scored.into_iter().map(|(p, _)| p).collect(),
    })
}

fn init_model(
    kind: ClassifierKind,
    shape: (usize, usize),
    classes: usize,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    let mut r = rng(derive_seed(cfg.seed, "init"));
    Ok(match kind {
        ClassifierKind::Amil => Classifier::Amil(AmilModel::init(
            shape.1,
            cfg.attention_width,
            classes,
            &mut r,
        )?),
        ClassifierKind::Mlp => Classifier::Mlp(MlpModel::init(
            shape.0,
            shape.1,
            cfg.hidden_width,
            classes,
            &mut r,
        )?),
    })
}

fn rounded(model: &Classifier) -> Classifier {
    let mut m = model.clone();
    for p in m.params_mut() {
        *p = *p as f32 as f64;
    }
    m
}

fn check_examples(examples: &[Example], classes: usize, dim: usize) -> Result<()> {
    for ex in examples {
        if ex.label >= classes {
            return Err(Error::InvalidArgument(format!(
                "slide {} has label {} but only {classes} classes",
                ex.id, ex.label
            )));
        }
        if ex.bag.cols() != dim {
            return Err(Error::MixedDims {
                dims: vec![dim, ex.bag.cols()],
            });
        }
        if !ex.bag.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bag {} contains non-finite values",
                ex.id
            )));
        }
    }
    Ok(())
}

/// Train a classifier with AdamW, keeping the epoch with the best validation
/// accuracy (lower validation loss, then earlier epoch, breaks ties). With an
/// empty validation set the final epoch is kept.
pub fn train(
    kind: ClassifierKind,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let classes = train_set
        .iter()
        .chain(val_set)
        .map(|e| e.label + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    check_examples(train_set, classes, first.bag.cols())?;
    check_examples(val_set, classes, first.bag.cols())?;

    let mut model = init_model(kind, first.bag.shape(), classes, cfg)?;
    let mut opt = AdamW::new(model.params().len(), cfg.learning_rate, cfg.weight_decay);
    let mut order_rng = rng(derive_seed(cfg.seed, "batches"));
    let mut aug_rng = rng(derive_seed(aug.rng_seed, "augment"));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, Classifier)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(BagMatrix, Vec<f64>)> = chunk
                .iter()
                .map(|&i| {
                    let ex = &train_set[i];
                    (
                        augment_bag(&ex.bag, aug, Mode::Train, &mut aug_rng),
                        one_hot(ex.label, classes),
                    )
                })
                .collect();
            let batch = mixup_batch(batch, aug, Mode::Train, &mut aug_rng)?;

            let per_bag: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|(bag, y)| model.loss_and_grad(bag, y))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; model.params().len()];
            let mut batch_loss = 0.0;
            for (loss, g) in &per_bag {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: batch_loss,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            opt.step(model.params_mut(), &grad);
            loss_sum += batch_loss;
        }
        let train_loss = loss_sum / train_set.len() as f64;

        let (val_accuracy, val_loss) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let s = evaluate(&model, val_set)?;
            if !s.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: s.loss,
                });
            }
            (s.accuracy, s.loss)
        };
        log::debug!("epoch {epoch}: train_loss {train_loss:.6} val_acc {val_accuracy:.4} val_loss {val_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            val_loss,
        });

        let better = match &best {
            None => true,
            Some(_) if val_set.is_empty() => true,
            Some((acc, loss, _, _)) => {
                val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss)
            }
        };
        if better {
            best = Some((val_accuracy, val_loss, epoch, rounded(&model)));
        }
    }

    let (_, _, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentEnabled;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_cohort(n: usize, seed: u64) -> Vec<Example> {
        let mut r = rng(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|j| {
                        (0..3)
                            .map(|d| {
                                let noise: f64 = StandardNormal.sample(&mut r);
                                let shift = if label == 1 && j == 0 && d == 0 {
                                    5.0
                                } else {
                                    0.0
                                };
                                noise + shift
                            })
                            .collect()
                    })
                    .collect();
                Example {
                    id: format!("s{i}"),
                    bag: BagMatrix::from_rows(&rows).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn no_aug() -> AugmentConfig {
        AugmentConfig {
            augment_enabled: AugmentEnabled::NONE,
            ..Default::default()
        }
    }

    #[test]
    fn learns_shifted_first_row() {
        let data = toy_cohort(64, 1);
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 1e-2,
            attention_width: 8,
            hidden_width: 16,
            ..Default::default()
        };
        for kind in [ClassifierKind::Amil, ClassifierKind::Mlp] {
            let out = train(
                kind,
                &data[..40],
                &data[40..],
                &cfg,
                &AugmentConfig::default(),
            )
            .unwrap();
            let acc = evaluate(&out.model, &data[40..]).unwrap().accuracy;
            assert!(acc >= 0.9, "{kind:?}: {acc}");
            assert_eq!(out.history.len(), 40);
        }
    }

    #[test]
    fn deterministic_given_seeds() {
        let data = toy_cohort(20, 2);
        let cfg = TrainConfig {
            epochs: 5,
            attention_width: 4,
            ..Default::default()
        };
        let a = train(
            ClassifierKind::Amil,
            &data[..14],
            &data[14..],
            &cfg,
            &AugmentConfig::default(),
        )
        .unwrap();
        let b = train(
            ClassifierKind::Amil,
            &data[..14],
            &data[14..],
            &cfg,
            &AugmentConfig::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let data = toy_cohort(10, 3);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            weight_decay: 0.0,
            attention_width: 4,
            ..Default::default()
        };
        let out = train(ClassifierKind::Amil, &data, &[], &cfg, &no_aug()).unwrap();
        let init = rounded(&init_model(ClassifierKind::Amil, (4, 3), 2, &cfg).unwrap());
        assert_eq!(out.model, init);
        assert_eq!(out.best_epoch, 3);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = toy_cohort(8, 4);
        for ex in &mut data {
            ex.bag.data_mut().iter_mut().for_each(|v| *v *= 1e300);
        }
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            attention_width: 4,
            ..Default::default()
        };
        let err = train(ClassifierKind::Mlp, &data, &[], &cfg, &no_aug()).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn gated_attention_is_rejected() {
        let data = toy_cohort(4, 5);
        let cfg = TrainConfig {
            attention: AttentionKind::Gated,
            ..Default::default()
        };
        assert!(matches!(
            train(ClassifierKind::Amil, &data, &[], &cfg, &no_aug()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn raw_bags_of_different_sizes_train_with_mixup_on() {
        let mut r = rng(6);
        let data: Vec<Example> = (0..12)
            .map(|i| {
                let n = 3 + i % 4;
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| vec![r.random::<f64>() + (i % 2) as f64])
                    .collect();
                Example {
                    id: i.to_string(),
                    bag: BagMatrix::from_rows(&rows).unwrap(),
                    label: i % 2,
                }
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            attention_width: 4,
            ..Default::default()
        };
        train(
            ClassifierKind::Amil,
            &data,
            &data,
            &cfg,
            &AugmentConfig::default(),
        )
        .unwrap();
    }
}
