//! Slide tiling: tissue detection, a non-overlapping 512×512 grid, nucleus
//! counting and patch filtering.

mod manifest;
pub mod morphology;
pub mod nuclei;
mod raster;
pub mod tissue;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{read_patch_manifest, write_patch_manifest, ManifestRow, MANIFEST_HEADER};
pub use morphology::Mask;
pub use nuclei::{count_nuclei, NucleiConfig};
pub use raster::{RgbImage, SlideRaster};
pub use tissue::{detect_tissue, TissueConfig, TissueMask};

/// Side length of a patch in pixels.
pub const PATCH_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
    pub nucleus_count: usize,
    pub kept: bool,
}

impl PatchRecord {
    pub fn at(row: usize, col: usize) -> Self {
        Self {
            row,
            col,
            x: col * PATCH_SIZE,
            y: row * PATCH_SIZE,
            tissue_fraction: 0.0,
            nucleus_count: 0,
            kept: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterCriteria {
    pub nuclei_min: usize,
    pub tissue_min: f64,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            nuclei_min: 10,
            tissue_min: 0.5,
        }
    }
}

impl FilterCriteria {
    pub fn accepts(&self, r: &PatchRecord) -> bool {
        r.nucleus_count >= self.nuclei_min && r.tissue_fraction >= self.tissue_min
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tissue: TissueConfig,
    pub nuclei: NucleiConfig,
    pub filter: FilterCriteria,
}

/// One record per complete 512×512 window of a grid anchored at (0, 0), in
/// row-major order. Partial windows at the right and bottom edges are dropped.
pub fn tile_slide(raster: &SlideRaster, mask: &TissueMask) -> Result<Vec<PatchRecord>> {
    let (w, h) = (raster.width(), raster.height());
    if mask.mask.width() != w || mask.mask.height() != h {
        return Err(Error::MaskSize {
            width: w,
            height: h,
            mask_width: mask.mask.width(),
            mask_height: mask.mask.height(),
        });
    }
    let (rows, cols) = (h / PATCH_SIZE, w / PATCH_SIZE);
    if rows == 0 || cols == 0 {
        log::warn!(
            "slide {} is {w}x{h}, smaller than one {PATCH_SIZE}px patch; no tiles",
            raster.slide_id
        );
        return Ok(Vec::new());
    }
    let area = (PATCH_SIZE * PATCH_SIZE) as f64;
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let mut rec = PatchRecord::at(row, col);
            rec.tissue_fraction =
                mask.mask.count_in(rec.x, rec.y, PATCH_SIZE, PATCH_SIZE) as f64 / area;
            out.push(rec);
        }
    }
    Ok(out)
}

/// Set each record's `kept` flag; returns how many were kept.
pub fn mark_patches(records: &mut [PatchRecord], criteria: &FilterCriteria) -> usize {
    records.iter_mut().fold(0, |n, r| {
        r.kept = criteria.accepts(r);
        n + r.kept as usize
    })
}

/// The kept subset of `records`, in their original order.
pub fn filter_patches(
    records: &[PatchRecord],
    criteria: &FilterCriteria,
) -> Result<Vec<PatchRecord>> {
    let mut marked = records.to_vec();
    mark_patches(&mut marked, criteria);
    let kept: Vec<_> = marked.into_iter().filter(|r| r.kept).collect();
    if kept.is_empty() {
        return Err(Error::EmptySlide {
            slide_id: String::new(),
        });
    }
    Ok(kept)
}

/// Tiles of one slide with tissue fraction, nucleus counts and kept flags
/// populated.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledSlide {
    pub slide_id: String,
    pub records: Vec<PatchRecord>,
}

impl TiledSlide {
    pub fn kept(&self) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(|r| r.kept)
    }
}

/// Full preprocessing of an in-memory raster. Nuclei are only counted on
/// patches that already pass the tissue cutoff.
pub fn process_slide(raster: &SlideRaster, cfg: &TilingConfig) -> Result<TiledSlide> {
    let mask = detect_tissue(raster, &cfg.tissue);
    let mut records = tile_slide(raster, &mask)?;
    records.par_iter_mut().for_each(|r| {
        if r.tissue_fraction >= cfg.filter.tissue_min {
            let patch = raster.image.crop(r.x, r.y, PATCH_SIZE, PATCH_SIZE);
            r.nucleus_count = count_nuclei(&patch, &cfg.nuclei);
        }
    });
    mark_patches(&mut records, &cfg.filter);
    Ok(TiledSlide {
        slide_id: raster.slide_id.clone(),
        records,
    })
}

fn parse_tile_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.strip_suffix(".png")?;
    let (r, c) = stem.strip_prefix('r')?.split_once("_c")?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

/// Preprocess a directory of pre-extracted `r{row}_c{col}.png` tiles. Tissue
/// is detected per tile. Tiles that are not 512×512 are skipped with a warning.
pub fn process_tile_dir(slide_id: &str, dir: &Path, cfg: &TilingConfig) -> Result<TiledSlide> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut tiles = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((row, col)) = parse_tile_name(&name) {
            tiles.push((row, col, entry.path()));
        }
    }
    tiles.sort();
    let records: Vec<Option<PatchRecord>> = tiles
        .par_iter()
        .map(|(row, col, path)| -> Result<Option<PatchRecord>> {
            let image = RgbImage::load(path)?;
            if image.width() != PATCH_SIZE || image.height() != PATCH_SIZE {
                log::warn!(
                    "{}: tile is {}x{}, expected {PATCH_SIZE}x{PATCH_SIZE}; skipped",
                    path.display(),
                    image.width(),
                    image.height()
                );
                return Ok(None);
            }
            let raster = SlideRaster::from_image(slide_id, image);
            let mask = detect_tissue(&raster, &cfg.tissue);
            let mut rec = PatchRecord::at(*row, *col);
            rec.tissue_fraction = mask.mask.count() as f64 / (PATCH_SIZE * PATCH_SIZE) as f64;
            if rec.tissue_fraction >= cfg.filter.tissue_min {
                rec.nucleus_count = count_nuclei(&raster.image, &cfg.nuclei);
            }
            Ok(Some(rec))
        })
        .collect::<Result<_>>()?;
    let mut records: Vec<PatchRecord> = records.into_iter().flatten().collect();
    mark_patches(&mut records, &cfg.filter);
    Ok(TiledSlide {
        slide_id: slide_id.to_string(),
        records,
    })
}
