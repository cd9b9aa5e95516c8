use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slidevec::mil::ClassifierKind;
use slidevec::pipeline::{self, failure_exit_code, ExperimentConfig, SlideFailure};
use slidevec::Error;

// A closed pipe (`slidevec eval | head`) is not an error worth a panic.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Whole-slide images to cluster-mean bags to attention-MIL predictions.
#[derive(Debug, Parser)]
#[command(name = "slidevec", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory receiving every output artifact.
    #[arg(long, global = true, env = "SLIDEVEC_WORKDIR")]
    work_dir: Option<PathBuf>,

    /// Per-slide feature files (FVEC1 + manifests + labels.csv).
    #[arg(long, global = true)]
    features: Option<PathBuf>,

    /// Slide images or tile directories.
    #[arg(long, global = true)]
    slides: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Clusters per slide.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Choose k from the pooled WCSS curve.
    #[arg(long, global = true)]
    elbow: bool,

    /// Minimum nucleus count for a patch to be kept.
    #[arg(long, global = true)]
    nuclei_min: Option<usize>,

    /// Minimum tissue fraction for a patch to be kept.
    #[arg(long, global = true)]
    tissue_min: Option<f64>,

    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect tissue, tile into 512x512 patches, count nuclei, write patch manifests.
    Tile {
        /// Also write each kept patch as a PNG.
        #[arg(long)]
        dump_patches: bool,
    },
    /// Cluster each slide's patch features into a k-row bag.
    Cluster,
    /// Train one classifier and write checkpoint and history.
    Train {
        #[arg(long, value_parser = parse_classifier)]
        classifier: Option<ClassifierKind>,
        /// Train on raw patch features instead of cluster-mean bags.
        #[arg(long)]
        no_clustering: bool,
    },
    /// Run the clustering x classifier grid and write the results table.
    Eval,
    /// Export per-patch attention weights and heatmaps from an AMIL checkpoint.
    Attend {
        /// Checkpoint to load (default: <work-dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Slide to export (repeatable; default: all).
        #[arg(long = "slide")]
        slide_ids: Vec<String>,
    },
    /// Write a planted-signal synthetic feature cohort.
    Synth {
        /// Output directory (default: --features).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_slides: Option<usize>,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        signal_fraction: Option<f64>,
    },
    /// Check a feature cohort for format, dimension and label problems.
    Validate,
}

fn parse_classifier(s: &str) -> Result<ClassifierKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn build_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if common.work_dir.is_some() {
        cfg.work_dir = common.work_dir.clone();
    }
    if common.features.is_some() {
        cfg.features_dir = common.features.clone();
    }
    if common.slides.is_some() {
        cfg.slides_dir = common.slides.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    if common.elbow {
        cfg.elbow = true;
    }
    if let Some(n) = common.nuclei_min {
        cfg.tiling.filter.nuclei_min = n;
    }
    if let Some(t) = common.tissue_min {
        cfg.tiling.filter.tissue_min = t;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    Ok(cfg)
}

fn report_failures(failures: &[SlideFailure]) -> u8 {
    for f in failures {
        let msg = f.error.to_string();
        if msg.contains(&f.slide_id) {
            eprintln!("error: {msg}");
        } else {
            eprintln!("error: slide {}: {msg}", f.slide_id);
        }
    }
    failure_exit_code(failures) as u8
}

fn run(cli: Cli) -> Result<u8, Error> {
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--jobs: {e}")))?;
    }
    let mut cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Tile { dump_patches } => {
            let report = pipeline::run_tile(&cfg, dump_patches)?;
            for s in &report.slides {
                out!("{}: {} patches, {} kept", s.slide_id, s.patches, s.kept);
            }
            Ok(report_failures(&report.failures))
        }
        Command::Cluster => {
            let report = pipeline::run_cluster(&cfg)?;
            if let Some(e) = &report.elbow {
                out!(
                    "elbow: k = {} (pooled curve over {} patches)",
                    e.k_selected,
                    e.points_used
                );
            }
            out!("wrote {} bags with k = {}", report.bags.len(), report.k);
            Ok(report_failures(&report.failures))
        }
        Command::Train {
            classifier,
            no_clustering,
        } => {
            if let Some(c) = classifier {
                cfg.classifier = c;
            }
            if no_clustering {
                cfg.clustering = false;
            }
            let r = pipeline::run_train(&cfg)?;
            let m = r.test_metrics;
            out!(
                "{} (clustering {}): best epoch {}, test accuracy {:.4}, kappa {:.4}, precision {:.4}, recall {:.4}",
                r.classifier.as_str(),
                if r.clustering { "on" } else { "off" },
                r.best_epoch,
                m.accuracy,
                m.kappa,
                m.precision,
                m.recall
            );
            out!("checkpoint: {}", r.checkpoint.display());
            Ok(0)
        }
        Command::Eval => {
            let rows = pipeline::run_eval(&cfg)?;
            let _ = write!(
                std::io::stdout(),
                "{}",
                slidevec::eval::render_results_csv(&rows)
            );
            let mut code = 0;
            for r in &rows {
                if let Err(e) = &r.result {
                    eprintln!(
                        "error: clustering {} / {}: {e}",
                        r.cell.clustering_label(),
                        r.cell.classifier.as_str()
                    );
                    code = code.max(e.exit_code);
                }
            }
            Ok(code as u8)
        }
        Command::Attend {
            checkpoint,
            slide_ids,
        } => {
            let report = pipeline::run_attend(&cfg, checkpoint.as_deref(), &slide_ids)?;
            for e in &report.exports {
                let top = e.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out!(
                    "{}: {} patches, max attention {:.4}",
                    e.slide_id,
                    e.patches.len(),
                    top
                );
            }
            Ok(report_failures(&report.failures))
        }
        Command::Synth {
            out,
            n_slides,
            patches,
            dim,
            shift,
            signal_fraction,
        } => {
            let s = &mut cfg.synth;
            s.n_slides = n_slides.unwrap_or(s.n_slides);
            s.patches_per_slide = patches.unwrap_or(s.patches_per_slide);
            s.dim = dim.unwrap_or(s.dim);
            s.shift = shift.unwrap_or(s.shift);
            s.signal_fraction = signal_fraction.unwrap_or(s.signal_fraction);
            let out = out
                .or_else(|| cfg.features_dir.clone())
                .ok_or_else(|| Error::InvalidArgument("synth needs --out or --features".into()))?;
            let cohort = pipeline::run_synth(&cfg, &out)?;
            out!(
                "wrote {} synthetic slides to {}",
                cohort.slides.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Validate => {
            let report = pipeline::run_validate(&cfg)?;
            out!("{} slides, dim {}", report.slides.len(), report.dim);
            for (class, n) in &report.class_counts {
                out!("class {class}: {n} slides");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
