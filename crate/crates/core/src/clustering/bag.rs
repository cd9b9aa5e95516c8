use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::kmeans::ClusterModel;
use crate::error::{Error, Result};
use crate::features::{read_fvec, write_fvec, FeatureMatrix};
use crate::io::{read_json, write_json};

/// The `k × dim` cluster-mean matrix standing in for a whole slide.
#[derive(Debug, Clone, PartialEq)]
pub struct BagRepresentation {
    pub slide_id: String,
    pub k: usize,
    pub dim: usize,
    /// One row per cluster mean, canonical order.
    pub means: FeatureMatrix,
    pub cluster_sizes: Vec<usize>,
    /// Patch (feature-row) indices belonging to each cluster, ascending.
    pub member_map: Vec<Vec<usize>>,
    pub seed: u64,
    pub wcss: f64,
    pub label: Option<usize>,
    /// Grid key of every patch, indexed like the source feature rows.
    pub patch_keys: Vec<[usize; 2]>,
}

/// Cluster means of `features` under `model`, in the model's canonical order.
pub fn build_bag(
    model: &ClusterModel,
    features: &FeatureMatrix,
    slide_id: &str,
) -> Result<BagRepresentation> {
    if model.assignments.len() != features.n_patches() {
        return Err(Error::RowCountMismatch {
            slide_id: slide_id.to_string(),
            keys: model.assignments.len(),
            rows: features.n_patches(),
        });
    }
    if model.dim != features.dim() {
        return Err(Error::DimMismatch {
            context: format!("cluster model for {slide_id}"),
            expected: features.dim(),
            found: model.dim,
        });
    }
    let mut member_map = vec![Vec::new(); model.k];
    for (i, &a) in model.assignments.iter().enumerate() {
        member_map[a].push(i);
    }
    let means = FeatureMatrix::new(
        model.k,
        model.dim,
        model.centroids.iter().map(|&v| v as f32).collect(),
    )?;
    Ok(BagRepresentation {
        slide_id: slide_id.to_string(),
        k: model.k,
        dim: model.dim,
        means,
        cluster_sizes: member_map.iter().map(Vec::len).collect(),
        member_map,
        seed: model.seed,
        wcss: model.wcss,
        label: None,
        patch_keys: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BagSidecar {
    slide_id: String,
    label: Option<usize>,
    k: usize,
    dim: usize,
    seed: u64,
    wcss: f64,
    cluster_sizes: Vec<usize>,
    member_map: Vec<Vec<usize>>,
    #[serde(default)]
    patch_keys: Vec<[usize; 2]>,
}

pub fn bag_path(dir: &Path, slide_id: &str) -> PathBuf {
    dir.join(format!("{slide_id}.bag.fvec"))
}

fn sidecar_path(fvec: &Path) -> PathBuf {
    let name = fvec
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".fvec").unwrap_or(&name);
    fvec.with_file_name(format!("{stem}.json"))
}

/// Write `<dir>/<slide_id>.bag.fvec` and its `<slide_id>.bag.json` sidecar.
pub fn write_bag(dir: &Path, bag: &BagRepresentation) -> Result<PathBuf> {
    let path = bag_path(dir, &bag.slide_id);
    write_fvec(&path, &bag.means)?;
    let sidecar = BagSidecar {
        slide_id: bag.slide_id.clone(),
        label: bag.label,
        k: bag.k,
        dim: bag.dim,
        seed: bag.seed,
        wcss: bag.wcss,
        cluster_sizes: bag.cluster_sizes.clone(),
        member_map: bag.member_map.clone(),
        patch_keys: bag.patch_keys.clone(),
    };
    write_json(&sidecar_path(&path), &sidecar)?;
    Ok(path)
}

pub fn read_bag(path: &Path) -> Result<BagRepresentation> {
    let means = read_fvec(path)?;
    let s: BagSidecar = read_json(&sidecar_path(path))?;
    if means.n_patches() != s.k || means.dim() != s.dim {
        return Err(Error::DimMismatch {
            context: format!("bag {}", path.display()),
            expected: s.k * s.dim,
            found: means.n_patches() * means.dim(),
        });
    }
    Ok(BagRepresentation {
        slide_id: s.slide_id,
        k: s.k,
        dim: s.dim,
        means,
        cluster_sizes: s.cluster_sizes,
        member_map: s.member_map,
        seed: s.seed,
        wcss: s.wcss,
        label: s.label,
        patch_keys: s.patch_keys,
    })
}

/// Bag files in `dir`, sorted by name.
pub fn list_bags(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.to_string_lossy().ends_with(".bag.fvec") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
