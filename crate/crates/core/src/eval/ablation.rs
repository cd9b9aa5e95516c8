use std::fmt::Write as _;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{metrics, ConfusionMatrix, Metrics};
use super::split::{Partition, SplitSpec};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::mil::{evaluate, train, ClassifierKind, Example, TrainConfig, TrainOutcome};
use crate::seed::rng;

pub const RESULTS_HEADER: &str =
    "feature_source,clustering,classifier,accuracy,kappa,precision,recall";
pub const DEFAULT_MAX_INSTANCES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub clustering: bool,
    pub classifier: ClassifierKind,
}

impl AblationCell {
    pub fn clustering_label(&self) -> &'static str {
        if self.clustering {
            "on"
        } else {
            "off"
        }
    }
}

/// {clustering on, off} × {AMIL, MLP}.
pub fn full_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for clustering in [true, false] {
        for classifier in [ClassifierKind::Amil, ClassifierKind::Mlp] {
            cells.push(AblationCell {
                clustering,
                classifier,
            });
        }
    }
    cells
}

/// Keep at most `max` rows, chosen uniformly without replacement and kept in
/// their original order.
pub fn subsample_rows(features: &FeatureMatrix, max: usize, seed: u64) -> Result<FeatureMatrix> {
    if features.n_patches() <= max {
        return Ok(features.clone());
    }
    let mut idx = sample(&mut rng(seed), features.n_patches(), max).into_vec();
    idx.sort_unstable();
    features.select_rows(&idx)
}

/// Bags for each arm of the grid, keyed by slide id.
#[derive(Debug, Clone, Default)]
pub struct AblationInputs {
    pub feature_source: String,
    /// Cluster-mean bags.
    pub clustered: Vec<Example>,
    /// Raw (possibly subsampled) patch features.
    pub raw: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub feature_source: String,
    pub cell: AblationCell,
    pub result: std::result::Result<Metrics, CellError>,
}

/// Why a grid cell produced no metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellError {
    pub message: String,
    pub exit_code: i32,
}

impl std::fmt::Display for CellError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub training: TrainOutcome,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

fn partition(examples: &[Example], split: &SplitSpec) -> Result<[Vec<Example>; 3]> {
    let mut parts: [Vec<Example>; 3] = Default::default();
    for ex in examples {
        let slot = match split.partition_of(&ex.id) {
            Some(Partition::Train) => 0,
            Some(Partition::Val) => 1,
            Some(Partition::Test) => 2,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "slide {} is not in the split",
                    ex.id
                )));
            }
        };
        parts[slot].push(ex.clone());
    }
    Ok(parts)
}

/// Examples for one grid cell. Without clustering the MLP sees the mean of
/// the raw rows, since it needs a fixed-size input.
pub fn cell_examples(inputs: &AblationInputs, cell: AblationCell) -> Vec<Example> {
    match (cell.clustering, cell.classifier) {
        (true, _) => inputs.clustered.clone(),
        (false, ClassifierKind::Amil) => inputs.raw.clone(),
        (false, ClassifierKind::Mlp) => inputs
            .raw
            .iter()
            .map(|ex| Example {
                id: ex.id.clone(),
                bag: ex.bag.mean_row(),
                label: ex.label,
            })
            .collect(),
    }
}

/// Train on the split's train part (validating on its val part) and score
/// the test part.
pub fn run_cell(
    examples: &[Example],
    kind: ClassifierKind,
    split: &SplitSpec,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Result<CellOutcome> {
    let [train_set, val_set, test_set] = partition(examples, split)?;
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let training = train(kind, &train_set, &val_set, cfg, aug)?;
    let summary = evaluate(&training.model, &test_set)?;
    let truth: Vec<usize> = test_set.iter().map(|e| e.label).collect();
    let confusion =
        ConfusionMatrix::from_predictions(&truth, &summary.predictions, training.model.classes())?;
    Ok(CellOutcome {
        metrics: metrics(&confusion)?,
        training,
        confusion,
    })
}

/// Run every cell (concurrently); a failing cell yields an error row rather
/// than aborting the grid. Rows come back in `cells` order.
pub fn run_ablation(
    inputs: &AblationInputs,
    cells: &[AblationCell],
    split: &SplitSpec,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
) -> Vec<AblationRow> {
    cells
        .par_iter()
        .map(|&cell| {
            let examples = cell_examples(inputs, cell);
            let result = if examples.is_empty() {
                Err(CellError {
                    message: "no bags for this configuration".into(),
                    exit_code: 1,
                })
            } else {
                run_cell(&examples, cell.classifier, split, cfg, aug)
                    .map(|o| o.metrics)
                    .map_err(|e| CellError {
                        message: e.to_string(),
                        exit_code: e.exit_code(),
                    })
            };
            if let Err(e) = &result {
                log::warn!(
                    "ablation cell clustering={} {} failed: {e}",
                    cell.clustering_label(),
                    cell.classifier.as_str()
                );
            }
            AblationRow {
                feature_source: inputs.feature_source.clone(),
                cell,
                result,
            }
        })
        .collect()
}

/// Machine-readable results, four decimals; failed rows leave the metric
/// fields empty.
pub fn render_results_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = write!(
            s,
            "{},{},{}",
            r.feature_source,
            r.cell.clustering_label(),
            r.cell.classifier.as_str()
        );
        match &r.result {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    ",{:.4},{:.4},{:.4},{:.4}",
                    m.accuracy, m.kappa, m.precision, m.recall
                );
            }
            Err(_) => s.push_str(",,,,\n"),
        }
    }
    s
}

/// Markdown table in percent with two decimals, headed by the split protocol.
pub fn render_results_table(rows: &[AblationRow], split: &SplitSpec) -> String {
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let mut s = format!(
        "Split protocol: stratified {:.0}/{:.0}/{:.0} train/val/test by label, seed {} ({} / {} / {} slides). Values in %.\n\n",
        100.0 * split.ratios[0],
        100.0 * split.ratios[1],
        100.0 * split.ratios[2],
        split.seed,
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    s.push_str("| Features | Clustering | Classifier | Accuracy | Kappa | Precision | Recall |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let head = format!(
            "| {} | {} | {} ",
            r.feature_source,
            r.cell.clustering_label(),
            r.cell.classifier.as_str()
        );
        match &r.result {
            Ok(m) => {
                let _ = writeln!(
                    s,
                    "{head}| {} | {} | {} | {} |",
                    pct(m.accuracy),
                    pct(m.kappa),
                    pct(m.precision),
                    pct(m.recall)
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{head}| failed: {e} | | | |");
            }
        }
    }
    s
}
