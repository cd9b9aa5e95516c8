//! End-to-end steps behind the command-line tool: tile, cluster, train,
//! evaluate, export attention, generate a synthetic cohort, validate.
//!
//! Every step reads its inputs from the configured directories and writes its
//! outputs under the work directory:
//!
//! ```text
//! <work>/manifests/<slide>.patches.csv
//! <work>/patches/<slide>/r{row}_c{col}.png      (tile --dump-patches)
//! <work>/bags/<slide>.bag.fvec + .bag.json
//! <work>/wcss_curve.csv, elbow.json             (cluster --elbow)
//! <work>/splits.json
//! <work>/model.ckpt, history.csv, train.json
//! <work>/results.csv, results.md
//! <work>/attention/<slide>.attention.csv + .heatmap.png
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::clustering::{
    bag_path, build_bag, elbow_select, kmeans_fit, read_bag, second_differences, wcss_curve,
    write_bag, BagRepresentation, KmeansConfig, DEFAULT_K,
};
use crate::error::{Error, Result};
use crate::eval::{
    full_grid, render_results_csv, render_results_table, run_ablation, run_cell, split_cohort,
    subsample_rows, write_synthetic_cohort, AblationCell, AblationInputs, AblationRow, Metrics,
    SplitSpec, SynthCohort, SynthConfig, DEFAULT_MAX_INSTANCES, DEFAULT_RATIOS, SPLITS_FILE,
};
use crate::features::{
    list_feature_files, read_features, validate_cohort, CohortReport, FeatureMatrix,
};
use crate::io::{create_dir_all, read_json, write_atomic, write_json};
use crate::matrix::BagMatrix;
use crate::mil::{
    read_checkpoint, write_checkpoint, write_history_csv, Checkpoint, ClassifierKind, Example,
    TrainConfig,
};
use crate::seed::derive_seed;
use crate::tiling::{
    process_slide, process_tile_dir, read_patch_manifest, write_patch_manifest, RgbImage,
    SlideRaster, TiledSlide, TilingConfig, PATCH_SIZE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Slide images (`*.png`, `*.ppm`) or directories of `r{row}_c{col}.png` tiles.
    pub slides_dir: Option<PathBuf>,
    /// Per-slide `FVEC1` feature files with manifests and `labels.csv`.
    pub features_dir: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub k: usize,
    /// Pick `k` from the pooled WCSS curve instead of using `k`.
    pub elbow: bool,
    pub elbow_k_max: usize,
    /// Pooled rows used for the WCSS curve (uniformly subsampled above this).
    pub elbow_max_points: usize,
    pub tiling: TilingConfig,
    pub kmeans: KmeansConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub split_ratios: [f64; 3],
    /// Classifier trained by the `train` step.
    pub classifier: ClassifierKind,
    /// Whether the `train` step uses cluster-mean bags or raw patch features.
    pub clustering: bool,
    /// Row cap for raw-feature bags.
    pub max_instances: usize,
    /// Configurations run by the `eval` step.
    pub grid: Vec<AblationCell>,
    /// Label for the results table; defaults to the encoder named in the manifests.
    pub feature_source: Option<String>,
    pub synth: SynthConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            slides_dir: None,
            features_dir: None,
            work_dir: None,
            seed: 0,
            k: DEFAULT_K,
            elbow: false,
            elbow_k_max: 15,
            elbow_max_points: 5000,
            tiling: TilingConfig::default(),
            kmeans: KmeansConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            split_ratios: DEFAULT_RATIOS,
            classifier: ClassifierKind::Amil,
            clustering: true,
            max_instances: DEFAULT_MAX_INSTANCES,
            grid: full_grid(),
            feature_source: None,
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn work_dir(&self) -> Result<&Path> {
        self.work_dir.as_deref().ok_or_else(|| {
            Error::InvalidArgument(
                "no work directory given (--work-dir or SLIDEVEC_WORKDIR)".into(),
            )
        })
    }

    pub fn workspace(&self) -> Result<Workspace> {
        let ws = Workspace::new(self.work_dir()?);
        create_dir_all(&ws.root)?;
        Ok(ws)
    }

    pub fn features_dir(&self) -> Result<&Path> {
        let dir = self.features_dir.as_deref().ok_or_else(|| {
            Error::InvalidArgument("no features directory given (--features)".into())
        })?;
        existing_dir(dir)
    }

    pub fn slides_dir(&self) -> Result<&Path> {
        let dir = self
            .slides_dir
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("no slides directory given (--slides)".into()))?;
        existing_dir(dir)
    }

    /// Training settings with the seed derived from the master seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            rng_seed: derive_seed(self.seed, "augment"),
            ..self.augment
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, "synth"),
            ..self.synth.clone()
        }
    }

    fn cluster_seed(&self, slide_id: &str) -> u64 {
        derive_seed(derive_seed(self.seed, "cluster"), slide_id)
    }

    fn subsample_seed(&self, slide_id: &str) -> u64 {
        derive_seed(derive_seed(self.seed, "subsample"), slide_id)
    }
}

fn existing_dir(dir: &Path) -> Result<&Path> {
    if dir.is_dir() {
        Ok(dir)
    } else {
        Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ))
    }
}

/// Paths of every artifact under the work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn manifests_dir(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn patch_manifest(&self, slide_id: &str) -> PathBuf {
        self.manifests_dir().join(format!("{slide_id}.patches.csv"))
    }

    pub fn patches_dir(&self, slide_id: &str) -> PathBuf {
        self.root.join("patches").join(slide_id)
    }

    pub fn bags_dir(&self) -> PathBuf {
        self.root.join("bags")
    }

    pub fn wcss_curve(&self) -> PathBuf {
        self.root.join("wcss_curve.csv")
    }

    pub fn elbow_report(&self) -> PathBuf {
        self.root.join("elbow.json")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join(SPLITS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn train_report(&self) -> PathBuf {
        self.root.join("train.json")
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn results_table(&self) -> PathBuf {
        self.root.join("results.md")
    }

    pub fn attention_dir(&self) -> PathBuf {
        self.root.join("attention")
    }
}

/// A per-slide error that does not stop the other slides.
#[derive(Debug)]
pub struct SlideFailure {
    pub slide_id: String,
    pub error: Error,
}

/// Highest exit code among the failures, or 0.
pub fn failure_exit_code(failures: &[SlideFailure]) -> i32 {
    failures
        .iter()
        .map(|f| f.error.exit_code())
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TiledSummary {
    pub slide_id: String,
    pub patches: usize,
    pub kept: usize,
}

#[derive(Debug, Default)]
pub struct TileReport {
    pub slides: Vec<TiledSummary>,
    pub failures: Vec<SlideFailure>,
}

enum SlideSource {
    Image(PathBuf),
    TileDir(PathBuf),
}

fn slide_sources(dir: &Path) -> Result<Vec<(String, SlideSource)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_dir() {
            let name = path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push((name, SlideSource::TileDir(path)));
        } else if matches!(ext.as_str(), "png" | "ppm" | "pnm") {
            out.push((stem, SlideSource::Image(path)));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn dump_patches(ws: &Workspace, raster: &SlideRaster, tiled: &TiledSlide) -> Result<()> {
    let dir = ws.patches_dir(&tiled.slide_id);
    create_dir_all(&dir)?;
    tiled
        .kept()
        .collect::<Vec<_>>()
        .par_iter()
        .try_for_each(|r| {
            raster
                .image
                .crop(r.x, r.y, PATCH_SIZE, PATCH_SIZE)
                .save_png(&dir.join(format!("r{}_c{}.png", r.row, r.col)))
        })
}

/// Tile every slide, writing one patch manifest per slide. Slides left with no
/// usable patch are reported as failures after their manifest is written.
pub fn run_tile(cfg: &ExperimentConfig, dump: bool) -> Result<TileReport> {
    let slides_dir = cfg.slides_dir()?;
    let ws = cfg.workspace()?;
    create_dir_all(&ws.manifests_dir())?;
    let mut report = TileReport::default();
    for (slide_id, source) in slide_sources(slides_dir)? {
        let result = (|| -> Result<TiledSlide> {
            let tiled = match &source {
                SlideSource::Image(path) => {
                    let raster = SlideRaster::from_image(slide_id.clone(), RgbImage::load(path)?);
                    let tiled = process_slide(&raster, &cfg.tiling)?;
                    if dump {
                        dump_patches(&ws, &raster, &tiled)?;
                    }
                    tiled
                }
                SlideSource::TileDir(dir) => process_tile_dir(&slide_id, dir, &cfg.tiling)?,
            };
            write_patch_manifest(&ws.patch_manifest(&slide_id), &slide_id, &tiled.records)?;
            Ok(tiled)
        })();
        match result {
            Ok(tiled) => {
                let kept = tiled.kept().count();
                log::info!("{slide_id}: {} patches, {kept} kept", tiled.records.len());
                report.slides.push(TiledSummary {
                    slide_id: slide_id.clone(),
                    patches: tiled.records.len(),
                    kept,
                });
                if kept == 0 {
                    report.failures.push(SlideFailure {
                        slide_id: slide_id.clone(),
                        error: Error::EmptySlide { slide_id },
                    });
                }
            }
            Err(error) => report.failures.push(SlideFailure { slide_id, error }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSlide {
    pub slide_id: String,
    pub label: usize,
    pub features: FeatureMatrix,
    pub patch_keys: Vec<[usize; 2]>,
    pub encoder_name: String,
}

/// Validate the cohort in `dir` and load every slide, in slide-id order.
pub fn load_cohort(dir: &Path) -> Result<Vec<LoadedSlide>> {
    let report = validate_cohort(dir)?;
    report
        .slides
        .par_iter()
        .map(|s| {
            let (features, manifest) = read_features(&s.path)?;
            Ok(LoadedSlide {
                slide_id: s.slide_id.clone(),
                label: s.label,
                features,
                patch_keys: manifest.patch_keys,
                encoder_name: manifest.encoder_name,
            })
        })
        .collect()
}

pub fn run_validate(cfg: &ExperimentConfig) -> Result<CohortReport> {
    validate_cohort(cfg.features_dir()?)
}

pub fn run_synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SynthCohort> {
    write_synthetic_cohort(&cfg.synth_config(), out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowReport {
    pub k_selected: usize,
    pub points_used: usize,
    pub curve: Vec<(usize, f64)>,
    pub second_differences: Vec<(usize, f64)>,
}

#[derive(Debug, Default)]
pub struct ClusterReport {
    pub k: usize,
    pub elbow: Option<ElbowReport>,
    pub bags: Vec<PathBuf>,
    pub failures: Vec<SlideFailure>,
}

/// Pooled WCSS curve over all slides and its elbow.
pub fn elbow_from_slides(slides: &[LoadedSlide], cfg: &ExperimentConfig) -> Result<ElbowReport> {
    let parts: Vec<&FeatureMatrix> = slides.iter().map(|s| &s.features).collect();
    let pooled = FeatureMatrix::concat(&parts)?;
    let pooled = subsample_rows(
        &pooled,
        cfg.elbow_max_points,
        derive_seed(cfg.seed, "elbow-pool"),
    )?;
    let k_max = cfg.elbow_k_max.min(pooled.n_patches());
    let curve = wcss_curve(
        &pooled,
        1,
        k_max,
        derive_seed(cfg.seed, "elbow"),
        &cfg.kmeans,
    )?;
    Ok(ElbowReport {
        k_selected: elbow_select(&curve)?,
        points_used: pooled.n_patches(),
        second_differences: second_differences(&curve),
        curve,
    })
}

pub fn cluster_slide(
    slide: &LoadedSlide,
    k: usize,
    cfg: &ExperimentConfig,
) -> Result<BagRepresentation> {
    let seed = cfg.cluster_seed(&slide.slide_id);
    let model = kmeans_fit(&slide.features, k, seed, &cfg.kmeans)?;
    let mut bag = build_bag(&model, &slide.features, &slide.slide_id)?;
    bag.label = Some(slide.label);
    bag.patch_keys = slide.patch_keys.clone();
    Ok(bag)
}

fn render_wcss_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("k,wcss\n");
    for (k, w) in curve {
        let _ = writeln!(s, "{k},{w}");
    }
    s
}

/// Cluster every slide into a `k`-row bag (`k` from the elbow when asked).
pub fn run_cluster(cfg: &ExperimentConfig) -> Result<ClusterReport> {
    let slides = load_cohort(cfg.features_dir()?)?;
    let ws = cfg.workspace()?;
    let mut report = ClusterReport {
        k: cfg.k,
        ..Default::default()
    };
    if cfg.elbow {
        let elbow = elbow_from_slides(&slides, cfg)?;
        write_atomic(&ws.wcss_curve(), render_wcss_csv(&elbow.curve).as_bytes())?;
        write_json(&ws.elbow_report(), &elbow)?;
        log::info!("elbow selected k = {}", elbow.k_selected);
        report.k = elbow.k_selected;
        report.elbow = Some(elbow);
    }
    let bags_dir = ws.bags_dir();
    create_dir_all(&bags_dir)?;
    let results: Vec<(String, Result<PathBuf>)> = slides
        .par_iter()
        .map(|s| {
            let r = cluster_slide(s, report.k, cfg).and_then(|bag| write_bag(&bags_dir, &bag));
            (s.slide_id.clone(), r)
        })
        .collect();
    for (slide_id, r) in results {
        match r {
            Ok(path) => report.bags.push(path),
            Err(error) => report.failures.push(SlideFailure { slide_id, error }),
        }
    }
    Ok(report)
}

/// Cluster-mean bags for every slide, read from the work directory when
/// present and computed with the configured `k` otherwise.
pub fn clustered_examples(cfg: &ExperimentConfig, slides: &[LoadedSlide]) -> Result<Vec<Example>> {
    let ws = Workspace::new(cfg.work_dir()?);
    let examples: Vec<Example> = slides
        .par_iter()
        .map(|s| {
            let path = bag_path(&ws.bags_dir(), &s.slide_id);
            let bag = if path.exists() {
                read_bag(&path)?
            } else {
                log::info!("{}: no bag file, clustering with k = {}", s.slide_id, cfg.k);
                cluster_slide(s, cfg.k, cfg)?
            };
            Ok(Example {
                id: s.slide_id.clone(),
                bag: BagMatrix::from(&bag),
                label: s.label,
            })
        })
        .collect::<Result<_>>()?;
    let ks: std::collections::BTreeSet<usize> = examples.iter().map(|e| e.bag.rows()).collect();
    if ks.len() > 1 {
        return Err(Error::InvalidArgument(format!(
            "bags have differing cluster counts {ks:?}; re-run cluster"
        )));
    }
    Ok(examples)
}

/// Raw patch features per slide, capped at `max_instances` rows.
pub fn raw_examples(cfg: &ExperimentConfig, slides: &[LoadedSlide]) -> Result<Vec<Example>> {
    slides
        .par_iter()
        .map(|s| {
            let m = subsample_rows(
                &s.features,
                cfg.max_instances,
                cfg.subsample_seed(&s.slide_id),
            )?;
            Ok(Example {
                id: s.slide_id.clone(),
                bag: BagMatrix::from(&m),
                label: s.label,
            })
        })
        .collect()
}

fn labels_of(slides: &[LoadedSlide]) -> BTreeMap<String, usize> {
    slides
        .iter()
        .map(|s| (s.slide_id.clone(), s.label))
        .collect()
}

/// Stratified split from the master seed, written to `splits.json`.
pub fn make_split(cfg: &ExperimentConfig, slides: &[LoadedSlide]) -> Result<SplitSpec> {
    let split = split_cohort(
        &labels_of(slides),
        cfg.split_ratios,
        derive_seed(cfg.seed, "split"),
    )?;
    split.write(&cfg.workspace()?.splits())?;
    Ok(split)
}

fn feature_source(cfg: &ExperimentConfig, slides: &[LoadedSlide]) -> String {
    cfg.feature_source
        .clone()
        .or_else(|| slides.first().map(|s| s.encoder_name.clone()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub classifier: ClassifierKind,
    pub clustering: bool,
    pub best_epoch: usize,
    pub test_metrics: Metrics,
    pub checkpoint: PathBuf,
}

/// Train the configured classifier and write checkpoint, history and a
/// summary with the test-split metrics.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let slides = load_cohort(cfg.features_dir()?)?;
    let ws = cfg.workspace()?;
    let split = make_split(cfg, &slides)?;
    let cell = AblationCell {
        clustering: cfg.clustering,
        classifier: cfg.classifier,
    };
    let inputs = ablation_inputs(cfg, &slides, &[cell])?;
    let examples = crate::eval::cell_examples(&inputs, cell);
    let train_cfg = cfg.train_config();
    let outcome = run_cell(
        &examples,
        cfg.classifier,
        &split,
        &train_cfg,
        &cfg.augment_config(),
    )?;

    let ck = Checkpoint {
        model: outcome.training.model.clone(),
        train_config: train_cfg,
        best_epoch: outcome.training.best_epoch,
        clustering: cfg.clustering,
        feature_source: inputs.feature_source.clone(),
    };
    write_checkpoint(&ws.checkpoint(), &ck)?;
    write_history_csv(&ws.history(), &outcome.training.history)?;
    let report = TrainReport {
        classifier: cfg.classifier,
        clustering: cfg.clustering,
        best_epoch: outcome.training.best_epoch,
        test_metrics: outcome.metrics,
        checkpoint: ws.checkpoint(),
    };
    write_json(&ws.train_report(), &report)?;
    Ok(report)
}

fn ablation_inputs(
    cfg: &ExperimentConfig,
    slides: &[LoadedSlide],
    cells: &[AblationCell],
) -> Result<AblationInputs> {
    let need_clustered = cells.iter().any(|c| c.clustering);
    let need_raw = cells.iter().any(|c| !c.clustering);
    Ok(AblationInputs {
        feature_source: feature_source(cfg, slides),
        clustered: if need_clustered {
            clustered_examples(cfg, slides)?
        } else {
            Vec::new()
        },
        raw: if need_raw {
            raw_examples(cfg, slides)?
        } else {
            Vec::new()
        },
    })
}

/// Run the ablation grid and write `results.csv` and `results.md`.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let slides = load_cohort(cfg.features_dir()?)?;
    let ws = cfg.workspace()?;
    let split = make_split(cfg, &slides)?;
    let inputs = ablation_inputs(cfg, &slides, &cfg.grid)?;
    let rows = run_ablation(
        &inputs,
        &cfg.grid,
        &split,
        &cfg.train_config(),
        &cfg.augment_config(),
    );
    write_atomic(&ws.results_csv(), render_results_csv(&rows).as_bytes())?;
    write_atomic(
        &ws.results_table(),
        render_results_table(&rows, &split).as_bytes(),
    )?;
    Ok(rows)
}

pub const ATTENTION_HEADER: &str = "slide_id,cluster,attention,row,col,x,y";

#[derive(Debug, Clone, PartialEq)]
pub struct PatchAttention {
    /// `None` when the model was trained on raw patches.
    pub cluster: Option<usize>,
    pub attention: f64,
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub slide_id: String,
    /// One weight per bag row (cluster, or patch for raw models).
    pub weights: Vec<f64>,
    /// One entry per patch, in feature-row order.
    pub patches: Vec<PatchAttention>,
}

impl AttentionExport {
    pub fn render_csv(&self) -> String {
        let mut s = format!("{ATTENTION_HEADER}\n");
        for p in &self.patches {
            let cluster = p.cluster.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{cluster},{},{},{},{},{}",
                self.slide_id, p.attention, p.row, p.col, p.x, p.y
            );
        }
        s
    }

    /// Grayscale grid: one pixel per patch cell, weight scaled by the slide's
    /// maximum to 0..=255. Cells without a patch stay black.
    pub fn heatmap(&self) -> (usize, usize, Vec<u8>) {
        let width = self.patches.iter().map(|p| p.col + 1).max().unwrap_or(1);
        let height = self.patches.iter().map(|p| p.row + 1).max().unwrap_or(1);
        let max = self.patches.iter().map(|p| p.attention).fold(0.0, f64::max);
        let mut pixels = vec![0u8; width * height];
        for p in &self.patches {
            let v = if max > 0.0 {
                p.attention / max * 255.0
            } else {
                0.0
            };
            pixels[p.row * width + p.col] = v.round().clamp(0.0, 255.0) as u8;
        }
        (width, height, pixels)
    }
}

fn save_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    image::save_buffer(
        path,
        pixels,
        width as u32,
        height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Pixel offsets of each feature row: the i-th kept row of the patch
/// manifest when one exists, otherwise the grid key times the patch size.
fn patch_positions(ws: &Workspace, slide_id: &str, keys: &[[usize; 2]]) -> Result<Vec<[usize; 2]>> {
    let manifest = ws.patch_manifest(slide_id);
    if manifest.exists() {
        let kept: Vec<[usize; 2]> = read_patch_manifest(&manifest)?
            .into_iter()
            .filter(|r| r.kept)
            .map(|r| [r.x, r.y])
            .collect();
        if kept.len() == keys.len() {
            return Ok(kept);
        }
        log::warn!(
            "{slide_id}: manifest lists {} kept patches but features have {} rows; using grid positions",
            kept.len(),
            keys.len()
        );
    }
    Ok(keys
        .iter()
        .map(|[r, c]| [c * PATCH_SIZE, r * PATCH_SIZE])
        .collect())
}

/// Attention weights of one slide under an AMIL checkpoint.
pub fn attend_slide(
    ck: &Checkpoint,
    ws: &Workspace,
    slide: &LoadedSlide,
) -> Result<AttentionExport> {
    if ck.model.kind() != ClassifierKind::Amil {
        return Err(Error::Unsupported(
            "attention export needs an AMIL checkpoint; MLP models have no attention".into(),
        ));
    }
    let keys = &slide.patch_keys;
    let positions = patch_positions(ws, &slide.slide_id, keys)?;
    let (weights, patches) = if ck.clustering {
        let path = bag_path(&ws.bags_dir(), &slide.slide_id);
        let bag = read_bag(&path)?;
        let weights = ck.model.attention(&BagMatrix::from(&bag))?;
        let mut patches: Vec<Option<PatchAttention>> = vec![None; keys.len()];
        for (cluster, members) in bag.member_map.iter().enumerate() {
            for &i in members {
                let slot = patches.get_mut(i).ok_or_else(|| Error::RowCountMismatch {
                    slide_id: slide.slide_id.clone(),
                    keys: keys.len(),
                    rows: i + 1,
                })?;
                *slot = Some(PatchAttention {
                    cluster: Some(cluster),
                    attention: weights[cluster],
                    row: keys[i][0],
                    col: keys[i][1],
                    x: positions[i][0],
                    y: positions[i][1],
                });
            }
        }
        (weights, patches.into_iter().flatten().collect())
    } else {
        let weights = ck.model.attention(&BagMatrix::from(&slide.features))?;
        let patches = weights
            .iter()
            .enumerate()
            .map(|(i, &a)| PatchAttention {
                cluster: None,
                attention: a,
                row: keys[i][0],
                col: keys[i][1],
                x: positions[i][0],
                y: positions[i][1],
            })
            .collect();
        (weights, patches)
    };
    Ok(AttentionExport {
        slide_id: slide.slide_id.clone(),
        weights,
        patches,
    })
}

#[derive(Debug, Default)]
pub struct AttendReport {
    pub exports: Vec<AttentionExport>,
    pub failures: Vec<SlideFailure>,
}

/// Export attention CSVs and heatmaps for `slide_ids` (all slides if empty).
pub fn run_attend(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    slide_ids: &[String],
) -> Result<AttendReport> {
    let ws = cfg.workspace()?;
    let ck_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.checkpoint());
    let ck = read_checkpoint(&ck_path)?;
    if ck.model.kind() != ClassifierKind::Amil {
        return Err(Error::Unsupported(format!(
            "{} holds an MLP model, which yields no attention",
            ck_path.display()
        )));
    }
    let features_dir = cfg.features_dir()?;
    let files = list_feature_files(features_dir)?;
    let out_dir = ws.attention_dir();
    create_dir_all(&out_dir)?;
    let mut report = AttendReport::default();
    let labels = validate_cohort(features_dir)?.labels();
    for path in files {
        let (features, manifest) = read_features(&path)?;
        if !slide_ids.is_empty() && !slide_ids.contains(&manifest.slide_id) {
            continue;
        }
        let slide = LoadedSlide {
            label: labels.get(&manifest.slide_id).copied().unwrap_or(0),
            slide_id: manifest.slide_id.clone(),
            features,
            patch_keys: manifest.patch_keys,
            encoder_name: manifest.encoder_name,
        };
        let result = attend_slide(&ck, &ws, &slide).and_then(|export| {
            write_atomic(
                &out_dir.join(format!("{}.attention.csv", slide.slide_id)),
                export.render_csv().as_bytes(),
            )?;
            let (w, h, px) = export.heatmap();
            save_gray_png(
                &out_dir.join(format!("{}.heatmap.png", slide.slide_id)),
                w,
                h,
                &px,
            )?;
            Ok(export)
        });
        match result {
            Ok(e) => report.exports.push(e),
            Err(error) => report.failures.push(SlideFailure {
                slide_id: slide.slide_id,
                error,
            }),
        }
    }
    for id in slide_ids {
        if !report.exports.iter().any(|e| &e.slide_id == id)
            && !report.failures.iter().any(|f| &f.slide_id == id)
        {
            report.failures.push(SlideFailure {
                slide_id: id.clone(),
                error: Error::InvalidArgument(format!("no feature file for slide {id}")),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_unknown_fields() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 3, "k": 4}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.grid.len(), 4);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn derived_seeds_follow_master() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_ne!(a.augment_config().rng_seed, a.train_config().seed);
        assert_eq!(
            a.cluster_seed("x"),
            ExperimentConfig::default().cluster_seed("x")
        );
        assert_ne!(a.cluster_seed("x"), a.cluster_seed("y"));
    }

    #[test]
    fn heatmap_scales_to_max() {
        let p = |row, col, attention| PatchAttention {
            cluster: Some(0),
            attention,
            row,
            col,
            x: 0,
            y: 0,
        };
        let e = AttentionExport {
            slide_id: "s".into(),
            weights: vec![],
            patches: vec![p(0, 0, 0.5), p(0, 2, 0.25), p(1, 1, 0.0)],
        };
        let (w, h, px) = e.heatmap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![255, 0, 128, 0, 0, 0]);
        assert!(e
            .render_csv()
            .starts_with("slide_id,cluster,attention,row,col,x,y\ns,0,0.5,0,0,0,0\n"));
    }

    #[test]
    fn missing_directories_name_the_path() {
        let cfg = ExperimentConfig {
            features_dir: Some("/definitely/not/here".into()),
            ..Default::default()
        };
        let err = cfg.features_dir().unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here"));
        assert_eq!(err.exit_code(), 1);
    }
}
