//! Per-slide patch feature storage.
//!
//! Encoders hand features to the pipeline as one `FVEC1` file per slide: the
//! ASCII magic `FVEC1`, a little-endian `u32` row count, a little-endian `u32`
//! column count, then `rows * cols` little-endian IEEE-754 `f32` values in
//! row-major order. A JSON sidecar `<name>.manifest.json` carries the slide
//! id, label, encoder name, dimension and the `(row, col)` grid key of every
//! matrix row.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_atomic, write_json};

pub const FVEC_MAGIC: &[u8; 5] = b"FVEC1";
const HEADER_LEN: usize = 5 + 4 + 4;

/// Dense row-major `f32` matrix with every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                rows,
                cols,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    context: "row".into(),
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Number of rows (patches).
    pub fn n_patches(&self) -> usize {
        self.rows
    }

    /// Number of columns (feature dimension).
    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    /// A new matrix built from the listed rows, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, data)
    }

    pub fn concat(parts: &[&FeatureMatrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::DimMismatch {
                    context: "concatenated matrix".into(),
                    expected: cols,
                    found: m.cols,
                });
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Self::new(rows, cols, data)
    }
}

pub fn encode_fvec(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(FVEC_MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one `FVEC1` block from the front of `bytes`, returning the matrix
/// and the number of bytes consumed. `path` is only used in error messages.
pub fn decode_fvec_prefix(path: &Path, bytes: &[u8]) -> Result<(FeatureMatrix, usize)> {
    if bytes.len() < FVEC_MAGIC.len() || &bytes[..FVEC_MAGIC.len()] != FVEC_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((FeatureMatrix::new(rows, cols, data)?, expected))
}

/// Decode a buffer holding exactly one `FVEC1` block.
pub fn decode_fvec(path: &Path, bytes: &[u8]) -> Result<FeatureMatrix> {
    let (m, used) = decode_fvec_prefix(path, bytes)?;
    if used != bytes.len() {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - used,
        });
    }
    Ok(m)
}

pub fn write_fvec(path: &Path, m: &FeatureMatrix) -> Result<()> {
    write_atomic(path, &encode_fvec(m))
}

pub fn read_fvec(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fvec(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideManifest {
    pub slide_id: String,
    /// Class index; may be left out when the cohort `labels.csv` supplies it.
    pub label: Option<usize>,
    pub encoder_name: String,
    pub dim: usize,
    /// `[row, col]` grid key of each matrix row, in row order.
    pub patch_keys: Vec<[usize; 2]>,
}

/// `dir/name.fvec` → `dir/name.manifest.json`.
pub fn manifest_path(fvec_path: &Path) -> PathBuf {
    let stem = fvec_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    fvec_path.with_file_name(format!("{stem}.manifest.json"))
}

fn check_manifest(matrix: &FeatureMatrix, manifest: &SlideManifest) -> Result<()> {
    if manifest.dim != matrix.dim() {
        return Err(Error::DimMismatch {
            context: format!("manifest of {}", manifest.slide_id),
            expected: matrix.dim(),
            found: manifest.dim,
        });
    }
    if manifest.patch_keys.len() != matrix.n_patches() {
        return Err(Error::RowCountMismatch {
            slide_id: manifest.slide_id.clone(),
            keys: manifest.patch_keys.len(),
            rows: matrix.n_patches(),
        });
    }
    Ok(())
}

/// Write the `FVEC1` file at `path` and its manifest sidecar, each atomically.
pub fn write_features(matrix: &FeatureMatrix, manifest: &SlideManifest, path: &Path) -> Result<()> {
    check_manifest(matrix, manifest)?;
    write_fvec(path, matrix)?;
    write_json(&manifest_path(path), manifest)
}

pub fn read_features(path: &Path) -> Result<(FeatureMatrix, SlideManifest)> {
    let matrix = read_fvec(path)?;
    let manifest: SlideManifest = read_json(&manifest_path(path))?;
    check_manifest(&matrix, &manifest)?;
    Ok((matrix, manifest))
}

pub const LABELS_FILE: &str = "labels.csv";

#[derive(Debug, Deserialize)]
struct LabelRow {
    slide_id: String,
    label: usize,
}

pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, usize>> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = BTreeMap::new();
    for row in reader.deserialize() {
        let row: LabelRow = row.map_err(csv_err)?;
        out.insert(row.slide_id, row.label);
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, labels: &BTreeMap<String, usize>) -> Result<()> {
    let mut s = String::from("slide_id,label\n");
    for (id, label) in labels {
        let _ = writeln!(s, "{id},{label}");
    }
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSlide {
    pub slide_id: String,
    pub label: usize,
    pub n_patches: usize,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortReport {
    pub slides: Vec<CohortSlide>,
    pub class_counts: BTreeMap<usize, usize>,
    pub dim: usize,
}

impl CohortReport {
    pub fn labels(&self) -> BTreeMap<String, usize> {
        self.slides
            .iter()
            .map(|s| (s.slide_id.clone(), s.label))
            .collect()
    }
}

/// Feature files (`*.fvec`, bag files excluded) in `dir`, sorted by name.
pub fn list_feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if name.ends_with(".fvec") && !name.ends_with(".bag.fvec") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Check every slide in `dir`: files parse, dimensions agree across the
/// cohort, and every slide has a label. `labels.csv` in `dir` overrides
/// manifest labels.
pub fn validate_cohort(dir: &Path) -> Result<CohortReport> {
    let files = list_feature_files(dir)?;
    if files.is_empty() {
        return Err(Error::EmptyCohort {
            path: dir.to_path_buf(),
        });
    }
    let labels_path = dir.join(LABELS_FILE);
    let csv_labels = if labels_path.exists() {
        read_labels_csv(&labels_path)?
    } else {
        BTreeMap::new()
    };

    let mut slides = Vec::with_capacity(files.len());
    let mut dims = std::collections::BTreeSet::new();
    for path in files {
        let (matrix, manifest) = read_features(&path)?;
        dims.insert(matrix.dim());
        let label = match (csv_labels.get(&manifest.slide_id), manifest.label) {
            (Some(&c), Some(m)) => {
                if c != m {
                    log::warn!(
                        "slide {}: labels.csv says {c}, manifest says {m}; using {c}",
                        manifest.slide_id
                    );
                }
                c
            }
            (Some(&c), None) => c,
            (None, Some(m)) => m,
            (None, None) => {
                return Err(Error::MissingLabel {
                    slide_id: manifest.slide_id,
                })
            }
        };
        if slides
            .iter()
            .any(|s: &CohortSlide| s.slide_id == manifest.slide_id)
        {
            return Err(Error::InvalidArgument(format!(
                "slide id {} appears twice in {}",
                manifest.slide_id,
                dir.display()
            )));
        }
        slides.push(CohortSlide {
            slide_id: manifest.slide_id,
            label,
            n_patches: matrix.n_patches(),
            path,
        });
    }
    if dims.len() > 1 {
        return Err(Error::MixedDims {
            dims: dims.into_iter().collect(),
        });
    }
    let mut class_counts = BTreeMap::new();
    for s in &slides {
        *class_counts.entry(s.label).or_insert(0) += 1;
    }
    Ok(CohortReport {
        slides,
        class_counts,
        dim: dims.into_iter().next().unwrap(),
    })
}
