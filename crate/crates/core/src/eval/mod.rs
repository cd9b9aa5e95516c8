//! Metrics, cohort splits, the clustering × classifier ablation grid and the
//! synthetic cohort generator.

mod ablation;
mod metrics;
mod split;
mod synth;

pub use ablation::{
    cell_examples, full_grid, render_results_csv, render_results_table, run_ablation, run_cell,
    subsample_rows, AblationCell, AblationInputs, AblationRow, CellError, CellOutcome,
    DEFAULT_MAX_INSTANCES, RESULTS_HEADER,
};
pub use metrics::{metrics, ConfusionMatrix, Metrics};
pub use split::{check_split, split_cohort, Partition, SplitSpec, DEFAULT_RATIOS, SPLITS_FILE};
pub use synth::{
    generate_cohort, synth_feature_path, synth_slide_id, write_synthetic_cohort, SynthCohort,
    SynthConfig, SynthSlide, SYNTH_ENCODER, SYNTH_PARAMS_FILE,
};
