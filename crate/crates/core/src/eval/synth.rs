//! Planted-signal synthetic cohorts.
//!
//! Every slide draws its patch features from the same set of Gaussian
//! components (unit variance). One component, the signal component, holds a
//! `signal_fraction` share of the patches. It starts on top of the first
//! background component, so negative slides contain nothing distinctive; in
//! positive slides its mean is moved by `shift` along a fixed unit direction.
//! Averaged over a whole slide the shift shrinks to `signal_fraction · shift`,
//! while a cluster mean keeps it intact. With `shift = 0` both classes share
//! one distribution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    write_features, write_labels_csv, FeatureMatrix, SlideManifest, LABELS_FILE,
};
use crate::io::{create_dir_all, write_json};
use crate::seed::{derive_index, derive_seed, rng};

pub const SYNTH_ENCODER: &str = "synthetic";
pub const SYNTH_PARAMS_FILE: &str = "synth_params.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub dim: usize,
    /// Background components besides the signal component.
    pub background_components: usize,
    /// Standard deviation of the component means around the origin.
    pub component_spread: f64,
    pub signal_fraction: f64,
    /// Displacement of the signal mean in positive slides, in units of the
    /// per-patch standard deviation.
    pub shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 160,
            patches_per_slide: 200,
            dim: 16,
            background_components: 5,
            component_spread: 3.0,
            signal_fraction: 0.1,
            shift: 5.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slides < 4
            || self.patches_per_slide == 0
            || self.dim == 0
            || self.background_components == 0
        {
            return Err(Error::InvalidArgument(
                "synthetic cohort needs >= 4 slides, >= 1 patch, dim >= 1 and >= 1 background component".into(),
            ));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "signal_fraction {} must lie in (0, 1)",
                self.signal_fraction
            )));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite() && self.component_spread >= 0.0) {
            return Err(Error::InvalidArgument(
                "shift and component_spread must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub slide_id: String,
    pub label: usize,
    pub features: FeatureMatrix,
    pub patch_keys: Vec<[usize; 2]>,
    /// Rows drawn from the signal component.
    pub signal_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub slides: Vec<SynthSlide>,
    /// Unit vector along which positive slides' signal mean is moved.
    pub direction: Vec<f64>,
    /// Component means; index 0 is the signal component (unshifted), which
    /// equals index 1.
    pub means: Vec<Vec<f64>>,
}

impl SynthCohort {
    pub fn labels(&self) -> BTreeMap<String, usize> {
        self.slides
            .iter()
            .map(|s| (s.slide_id.clone(), s.label))
            .collect()
    }
}

pub fn synth_slide_id(i: usize) -> String {
    format!("synth_{i:04}")
}

fn gaussian_vec(r: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

/// Generate the cohort in memory. Slides alternate negative/positive, so the
/// classes are balanced (or off by one for odd counts).
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let mut shared = rng(derive_seed(cfg.seed, "synth-shared"));
    let mut direction = gaussian_vec(&mut shared, cfg.dim, 1.0);
    let norm = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= norm);
    let mut means: Vec<Vec<f64>> = (0..cfg.background_components)
        .map(|_| gaussian_vec(&mut shared, cfg.dim, cfg.component_spread))
        .collect();
    means.insert(0, means[0].clone());

    let slide_seed = derive_seed(cfg.seed, "synth-slides");
    let grid = (cfg.patches_per_slide as f64).sqrt().ceil() as usize;
    let slides = (0..cfg.n_slides)
        .into_par_iter()
        .map(|i| {
            let label = i % 2;
            let mut r = rng(derive_index(slide_seed, i as u64));
            let mut data = Vec::with_capacity(cfg.patches_per_slide * cfg.dim);
            let mut signal_rows = Vec::new();
            for p in 0..cfg.patches_per_slide {
                let component = if r.random::<f64>() < cfg.signal_fraction {
                    signal_rows.push(p);
                    0
                } else {
                    1 + r.random_range(0..cfg.background_components)
                };
                for d in 0..cfg.dim {
                    let mut mu = means[component][d];
                    if component == 0 && label == 1 {
                        mu += cfg.shift * direction[d];
                    }
                    let noise: f64 = StandardNormal.sample(&mut r);
                    data.push((mu + noise) as f32);
                }
            }
            Ok(SynthSlide {
                slide_id: synth_slide_id(i),
                label,
                features: FeatureMatrix::new(cfg.patches_per_slide, cfg.dim, data)?,
                patch_keys: (0..cfg.patches_per_slide)
                    .map(|p| [p / grid, p % grid])
                    .collect(),
                signal_rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCohort {
        slides,
        direction,
        means,
    })
}

/// Generate the cohort and write it to `dir`: one `FVEC1` file plus manifest
/// per slide, `labels.csv`, and the generator settings.
pub fn write_synthetic_cohort(cfg: &SynthConfig, dir: &Path) -> Result<SynthCohort> {
    let cohort = generate_cohort(cfg)?;
    create_dir_all(dir)?;
    cohort.slides.par_iter().try_for_each(|s| {
        let manifest = SlideManifest {
            slide_id: s.slide_id.clone(),
            label: Some(s.label),
            encoder_name: SYNTH_ENCODER.into(),
            dim: cfg.dim,
            patch_keys: s.patch_keys.clone(),
        };
        write_features(
            &s.features,
            &manifest,
            &synth_feature_path(dir, &s.slide_id),
        )
    })?;
    write_labels_csv(&dir.join(LABELS_FILE), &cohort.labels())?;
    write_json(&dir.join(SYNTH_PARAMS_FILE), cfg)?;
    Ok(cohort)
}

pub fn synth_feature_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.fvec"))
}
