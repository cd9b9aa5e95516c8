use serde::{Deserialize, Serialize};

use super::morphology::{otsu_threshold, Mask};
use super::raster::RgbImage;

/// Ruifrok–Johnston hematoxylin optical-density vector (R, G, B).
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NucleiConfig {
    /// Radius of the square element used to open the binarised channel.
    pub open_radius: usize,
    /// Smallest component area, in pixels, counted as a nucleus.
    pub min_area: usize,
    /// Largest component area, in pixels, counted as a nucleus.
    pub max_area: usize,
    /// Optical-density floor. Only pixels above it feed the Otsu threshold,
    /// and the threshold never drops below it, so faint background noise on
    /// near-blank patches is not split into "nuclei".
    pub min_optical_density: f64,
}

impl Default for NucleiConfig {
    fn default() -> Self {
        Self {
            open_radius: 1,
            min_area: 40,
            max_area: 4000,
            min_optical_density: 0.1,
        }
    }
}

fn optical_density_table() -> [f64; 256] {
    let mut t = [0.0; 256];
    for (i, v) in t.iter_mut().enumerate() {
        *v = -((i.max(1) as f64) / 255.0).log10();
    }
    t
}

/// Per-pixel hematoxylin concentration: optical density projected onto the
/// normalised hematoxylin stain vector.
pub fn hematoxylin_map(patch: &RgbImage) -> Vec<f64> {
    let od = optical_density_table();
    let norm = HEMATOXYLIN.iter().map(|v| v * v).sum::<f64>().sqrt();
    let stain = HEMATOXYLIN.map(|v| v / norm);
    patch
        .pixels()
        .map(|[r, g, b]| {
            od[r as usize] * stain[0] + od[g as usize] * stain[1] + od[b as usize] * stain[2]
        })
        .collect()
}

/// Count nuclei in a patch (normally 512×512, but any size works).
///
/// Hematoxylin map → Otsu binarisation (over pixels above the density floor)
/// → opening → 8-connected components, keeping components whose area lies in
/// `[min_area, max_area]`.
pub fn count_nuclei(patch: &RgbImage, cfg: &NucleiConfig) -> usize {
    let h = hematoxylin_map(patch);
    // Otsu over stained pixels only: on patches at the tissue edge, blank
    // background would otherwise pull the split below the eosin level.
    let floor = cfg.min_optical_density;
    let stained: Vec<f64> = h.iter().copied().filter(|&v| v > floor).collect();
    if stained.is_empty() {
        return 0;
    }
    let threshold = otsu_threshold(&stained).unwrap_or(floor).max(floor);
    let mask = Mask::new(
        patch.width(),
        patch.height(),
        h.iter().map(|&v| v > threshold).collect(),
    )
    .open(cfg.open_radius);
    mask.component_areas()
        .into_iter()
        .filter(|a| (cfg.min_area..=cfg.max_area).contains(a))
        .count()
}
