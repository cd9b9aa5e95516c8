//! Patch manifest CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::PatchRecord;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MANIFEST_HEADER: &str = "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ManifestRow {
    pub slide_id: String,
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub tissue_fraction: f64,
    pub nucleus_count: usize,
    pub kept: bool,
}

impl ManifestRow {
    pub fn record(&self) -> PatchRecord {
        PatchRecord {
            row: self.row,
            col: self.col,
            x: self.x,
            y: self.y,
            tissue_fraction: self.tissue_fraction,
            nucleus_count: self.nucleus_count,
            kept: self.kept,
        }
    }
}

pub fn render_patch_manifest(slide_id: &str, records: &[PatchRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(MANIFEST_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{},{}",
            slide_id, r.row, r.col, r.x, r.y, r.tissue_fraction, r.nucleus_count, r.kept
        );
    }
    s
}

pub fn write_patch_manifest(path: &Path, slide_id: &str, records: &[PatchRecord]) -> Result<()> {
    write_atomic(path, render_patch_manifest(slide_id, records).as_bytes())
}

pub fn read_patch_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != MANIFEST_HEADER {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .map(|row| {
            row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_layout() {
        let mut r = PatchRecord::at(1, 2);
        r.tissue_fraction = 0.25;
        r.nucleus_count = 17;
        r.kept = true;
        let text = render_patch_manifest("slide-A", &[r]);
        assert_eq!(
            text,
            "slide_id,row,col,x,y,tissue_fraction,nucleus_count,kept\nslide-A,1,2,1024,512,0.250000,17,true\n"
        );
    }

    #[test]
    fn manifest_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut a = PatchRecord::at(0, 0);
        a.tissue_fraction = 1.0 / 3.0;
        let b = PatchRecord {
            kept: true,
            nucleus_count: 12,
            ..PatchRecord::at(0, 1)
        };
        write_patch_manifest(&path, "s", &[a, b]).unwrap();
        let rows = read_patch_manifest(&path).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].record(), b);
        assert!((rows[0].tissue_fraction - 0.333333).abs() < 1e-12);
    }
}
