use serde::{Deserialize, Serialize};

use super::morphology::{otsu_threshold, Mask};
use super::raster::SlideRaster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueConfig {
    /// Radius of the square structuring element used for closing then opening.
    pub morph_radius: usize,
}

impl Default for TissueConfig {
    fn default() -> Self {
        Self { morph_radius: 2 }
    }
}

/// Tissue/background segmentation of a raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub mask: Mask,
    /// Set when the raster had a single saturation level, so no threshold
    /// could be derived and the mask is empty.
    pub degenerate: bool,
}

/// HSV saturation, `(max - min) / max`, 0 for black.
#[inline]
pub fn saturation([r, g, b]: [u8; 3]) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == 0 {
        0.0
    } else {
        (max - min) as f64 / max as f64
    }
}

/// Saturation above an Otsu threshold, cleaned by closing then opening.
pub fn detect_tissue(raster: &SlideRaster, cfg: &TissueConfig) -> TissueMask {
    let (w, h) = (raster.width(), raster.height());
    let sat: Vec<f64> = raster.image.pixels().map(saturation).collect();
    let Some(threshold) = otsu_threshold(&sat) else {
        log::warn!(
            "slide {}: uniform saturation, no tissue threshold; mask is empty",
            raster.slide_id
        );
        return TissueMask {
            mask: Mask::filled(w, h, false),
            degenerate: true,
        };
    };
    let raw = Mask::new(w, h, sat.iter().map(|&s| s > threshold).collect());
    let mask = raw.close(cfg.morph_radius).open(cfg.morph_radius);
    TissueMask {
        mask,
        degenerate: false,
    }
}
