//! Training-time bag augmentation: global scaling, Gaussian jitter and mixup.
//!
//! When all three are enabled they compose as scale → jitter → mixup, so the
//! soft label produced by mixup describes the features the model actually sees.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::BagMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentEnabled {
    pub scale: bool,
    pub jitter: bool,
    pub mixup: bool,
}

impl Default for AugmentEnabled {
    fn default() -> Self {
        Self {
            scale: true,
            jitter: true,
            mixup: true,
        }
    }
}

impl AugmentEnabled {
    pub const NONE: AugmentEnabled = AugmentEnabled {
        scale: false,
        jitter: false,
        mixup: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of the additive Gaussian jitter.
    pub jitter_level: f64,
    /// Beta(α, α) parameter for the mixup weight.
    pub mixup_alpha: f64,
    pub augment_enabled: AugmentEnabled,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.0,
            jitter_level: 0.01,
            mixup_alpha: 0.2,
            augment_enabled: AugmentEnabled::default(),
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < scale_min <= scale_max, got {} and {}",
                self.scale_min, self.scale_max
            )));
        }
        if !(self.jitter_level >= 0.0 && self.jitter_level.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "jitter_level {} must be >= 0",
                self.jitter_level
            )));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mixup_alpha {} must be > 0",
                self.mixup_alpha
            )));
        }
        Ok(())
    }
}

/// Whether augmentation runs at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Multiply every element by one factor drawn from `U[scale_min, scale_max]`.
pub fn scale_bag(bag: &BagMatrix, cfg: &AugmentConfig, rng: &mut impl Rng) -> BagMatrix {
    let s = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    };
    scale_by(bag, s)
}

pub fn scale_by(bag: &BagMatrix, s: f64) -> BagMatrix {
    let mut out = bag.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= s);
    out
}

/// Add i.i.d. `N(0, jitter_level²)` noise to every element.
pub fn jitter_bag(bag: &BagMatrix, cfg: &AugmentConfig, rng: &mut impl Rng) -> BagMatrix {
    let mut out = bag.clone();
    if cfg.jitter_level == 0.0 {
        return out;
    }
    let noise = Normal::new(0.0, cfg.jitter_level).expect("validated jitter level");
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += noise.sample(rng));
    out
}

/// Convex combination `λ·a + (1 − λ)·b` of two bags and their label vectors.
pub fn mixup_with_lambda(
    a: &BagMatrix,
    label_a: &[f64],
    b: &BagMatrix,
    label_b: &[f64],
    lambda: f64,
) -> Result<(BagMatrix, Vec<f64>)> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!(
            "mixup needs equal bag shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if label_a.len() != label_b.len() {
        return Err(Error::InvalidArgument(
            "mixup labels differ in length".into(),
        ));
    }
    let mix = |x: f64, y: f64| {
        // Clamp keeps rounding from stepping outside [min(x,y), max(x,y)].
        (lambda * x + (1.0 - lambda) * y).clamp(x.min(y), x.max(y))
    };
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| mix(x, y))
        .collect();
    let bag = BagMatrix::new(a.rows(), a.cols(), data)?;
    let label = label_a
        .iter()
        .zip(label_b)
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Ok((bag, label))
}

/// Mixup with `λ ~ Beta(α, α)`. Returns the mixed bag, soft label and λ.
pub fn mixup_bags(
    a: &BagMatrix,
    label_a: &[f64],
    b: &BagMatrix,
    label_b: &[f64],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(BagMatrix, Vec<f64>, f64)> {
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
        .map_err(|e| Error::InvalidArgument(format!("mixup_alpha: {e}")))?;
    let lambda = beta.sample(rng);
    let (bag, label) = mixup_with_lambda(a, label_a, b, label_b, lambda)?;
    Ok((bag, label, lambda))
}

/// Per-bag augmentations (scale then jitter). A no-op in [`Mode::Eval`].
pub fn augment_bag(
    bag: &BagMatrix,
    cfg: &AugmentConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> BagMatrix {
    if mode == Mode::Eval {
        return bag.clone();
    }
    let mut out = if cfg.augment_enabled.scale {
        scale_bag(bag, cfg, rng)
    } else {
        bag.clone()
    };
    if cfg.augment_enabled.jitter {
        out = jitter_bag(&out, cfg, rng);
    }
    out
}

/// Mix each example of a batch with a randomly chosen partner from the same
/// batch. Pairs whose shapes differ are passed through. A no-op in [`Mode::Eval`] or when mixup is disabled.
pub fn mixup_batch(
    batch: Vec<(BagMatrix, Vec<f64>)>,
    cfg: &AugmentConfig,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Vec<(BagMatrix, Vec<f64>)>> {
    if mode == Mode::Eval || !cfg.augment_enabled.mixup || batch.len() < 2 {
        return Ok(batch);
    }
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    rand::seq::SliceRandom::shuffle(partners.as_mut_slice(), rng);
    partners
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let (a, ya) = &batch[i];
            let (b, yb) = &batch[j];
            // Raw-patch bags differ in row count; those are left unmixed.
            if a.shape() != b.shape() {
                return Ok((a.clone(), ya.clone()));
            }
            mixup_bags(a, ya, b, yb, cfg, rng).map(|(bag, y, _)| (bag, y))
        })
        .collect()
}
