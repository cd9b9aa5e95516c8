//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Oracles are computed independently of the library code.

use std::f64::consts::TAU;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use slidevec::augment::{
    augment_bag, jitter_bag, mixup_batch, mixup_with_lambda, AugmentConfig, Mode,
};
use slidevec::clustering::{elbow_select, kmeans_fit, wcss_curve, KmeansConfig};
use slidevec::eval::{full_grid, metrics, AblationCell, ConfusionMatrix, SynthConfig};
use slidevec::features::FeatureMatrix;
use slidevec::mil::{amil_forward, cross_entropy, AmilModel, Classifier, ClassifierKind, MlpModel};
use slidevec::pipeline::{self, ExperimentConfig};
use slidevec::seed::rng;
use slidevec::tiling::{
    count_nuclei, filter_patches, FilterCriteria, NucleiConfig, PatchRecord, RgbImage,
};
use slidevec::BagMatrix;

type Check = Result<String, String>;

/// Every parameter uniform in ±1, including the classifier head that `init`
/// leaves at zero.
fn random_amil(r: &mut impl Rng, dim: usize, width: usize, classes: usize) -> AmilModel {
    let n = AmilModel::num_params(dim, width, classes);
    AmilModel::from_params(
        dim,
        width,
        classes,
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_bag(r: &mut impl Rng, rows: usize, cols: usize) -> BagMatrix {
    BagMatrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-2.0..2.0))
            .collect(),
    )
    .unwrap()
}

fn permutation_invariance() -> Check {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let (k, dim) = (r.random_range(1..=16), r.random_range(1..=64));
        let model = random_amil(&mut r, dim, 16, 2);
        let bag = random_bag(&mut r, k, dim);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let a = amil_forward(&model, &bag).unwrap();
        let b = amil_forward(&model, &bag.permute_rows(&perm)).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            worst = worst.max((x - y).abs());
        }
        ensure(worst < 1e-6, || {
            format!("case {case}: logits differ by {worst:e}")
        })?;
        for (i, &p) in perm.iter().enumerate() {
            let d = (b.attention[i] - a.attention[p]).abs();
            ensure(d < 1e-12, || {
                format!("case {case}: attention of row {p} moved by {d:e}")
            })?;
        }
    }
    Ok(format!("200 bags, max logit difference {worst:.1e}"))
}

fn fd_error(model: &Classifier, bag: &BagMatrix, target: &[f64]) -> f64 {
    let loss = |m: &Classifier| cross_entropy(&m.logits(bag).unwrap(), target).0;
    let (_, grad) = model.loss_and_grad(bag, target).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6));
    }
    worst
}

fn gradient_correctness() -> Check {
    let mut r = rng(102);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let classes = r.random_range(2..=3);
        let (rows, dim) = (r.random_range(1..=5), r.random_range(1..=4));
        let width = r.random_range(1..=5);
        let amil = Classifier::Amil(random_amil(&mut r, dim, width, classes));
        let mlp = Classifier::Mlp(
            MlpModel::init(rows, dim, r.random_range(1..=6), classes, &mut r).unwrap(),
        );
        let bag = random_bag(&mut r, rows, dim);
        let raw: Vec<f64> = (0..classes).map(|_| r.random::<f64>()).collect();
        let sum: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        for m in [&amil, &mlp] {
            worst = worst.max(fd_error(m, &bag, &target));
            ensure(worst < 1e-4, || {
                format!("case {case} ({:?}): relative error {worst:e}", m.kind())
            })?;
        }
    }
    Ok(format!(
        "50 AMIL + 50 MLP models, max relative error {worst:.1e}"
    ))
}

fn wcss_of(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let dim = points[0].len();
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(assign)
            .filter(|(_, &a)| a == j)
            .map(|(p, _)| p)
            .collect();
        if members.is_empty() {
            continue;
        }
        for d in 0..dim {
            let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
        }
    }
    total
}

/// Minimum WCSS over every assignment of points to `k` labels.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut assign = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(wcss_of(points, &assign, k));
        let mut i = 0;
        while i < n {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

fn kmeans_oracle() -> Check {
    let mut r = rng(103);
    let cfg = KmeansConfig {
        restarts: 50,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = r.random_range(1..=10);
        let dim = r.random_range(1..=3);
        let k = r.random_range(1..=3.min(n));
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect())
            .collect();
        let points: Vec<Vec<f64>> = rows
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect();
        let model = kmeans_fit(&FeatureMatrix::from_rows(&rows).unwrap(), k, case, &cfg)
            .map_err(|e| e.to_string())?;
        let opt = exhaustive_optimum(&points, k);
        let rel = (model.wcss - opt).abs() / opt.max(1e-300);
        if opt > 0.0 {
            worst = worst.max(rel);
        }
        ensure(opt == 0.0 && model.wcss < 1e-12 || rel <= 1e-9, || {
            format!(
                "case {case} (n={n}, d={dim}, k={k}): wcss {} vs optimum {opt}",
                model.wcss
            )
        })?;
    }
    Ok(format!("100 instances, max relative gap {worst:.1e}"))
}

fn lloyd_monotonicity() -> Check {
    let mut r = rng(104);
    let cfg = KmeansConfig {
        restarts: 1,
        ..Default::default()
    };
    let mut steps = 0;
    for fit in 0..1000u64 {
        let n = r.random_range(5..=80);
        let dim = r.random_range(1..=6);
        let k = r.random_range(1..=8.min(n));
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        let m = kmeans_fit(&FeatureMatrix::from_rows(&rows).unwrap(), k, fit, &cfg)
            .map_err(|e| e.to_string())?;
        for w in m.history.windows(2) {
            steps += 1;
            ensure(w[1] <= w[0], || {
                format!("fit {fit}: WCSS rose from {} to {}", w[0], w[1])
            })?;
        }
    }
    Ok(format!("1000 fits, {steps} iterations, 0 violations"))
}

fn elbow_detector() -> Check {
    let hand = [
        (1, 100.0),
        (2, 60.0),
        (3, 25.0),
        (4, 20.0),
        (5, 17.0),
        (6, 15.0),
    ];
    let k = elbow_select(&hand).map_err(|e| e.to_string())?;
    ensure(k == 3, || format!("hand curve gave k = {k}"))?;
    let mut hits = 0;
    for run in 0..20u64 {
        let mut r = rng(1000 + run);
        // Equilateral triangle, side 10, randomly placed and rotated.
        let (ox, oy, turn) = (
            r.random_range(-50.0..50.0),
            r.random_range(-50.0..50.0),
            r.random_range(0.0..TAU),
        );
        let radius = 10.0 / 3f64.sqrt();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let rows: Vec<[f32; 2]> = (0..300)
            .map(|i| {
                let angle = turn + TAU * (i % 3) as f64 / 3.0;
                let x = ox + radius * angle.cos() + noise.sample(&mut r);
                let y = oy + radius * angle.sin() + noise.sample(&mut r);
                [x as f32, y as f32]
            })
            .collect();
        let curve = wcss_curve(
            &FeatureMatrix::from_rows(&rows).unwrap(),
            1,
            10,
            run,
            &KmeansConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        if elbow_select(&curve).map_err(|e| e.to_string())? == 3 {
            hits += 1;
        }
    }
    ensure(hits >= 18, || format!("k* == 3 in only {hits}/20 runs"))?;
    Ok(format!("hand curve k* = 3; planted runs {hits}/20"))
}

fn augmentation_statistics() -> Check {
    let cfg = AugmentConfig::default();
    let mut r = rng(105);
    let zeros = BagMatrix::new(1000, 1000, vec![0.0; 1_000_000]).unwrap();
    let noisy = jitter_bag(&zeros, &cfg, &mut r);
    let n = noisy.data().len() as f64;
    let mean = noisy.data().iter().sum::<f64>() / n;
    let std = (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    ensure((std - 0.01).abs() <= 0.0005, || format!("jitter std {std}"))?;

    let a = random_bag(&mut r, 10, 7);
    let b = random_bag(&mut r, 10, 7);
    let (ya, yb) = ([1.0, 0.0], [0.0, 1.0]);
    let (m1, l1) = mixup_with_lambda(&a, &ya, &b, &yb, 1.0).map_err(|e| e.to_string())?;
    let (m0, l0) = mixup_with_lambda(&a, &ya, &b, &yb, 0.0).map_err(|e| e.to_string())?;
    ensure(m1 == a && l1 == ya && m0 == b && l0 == yb, || {
        "mixup endpoints do not reproduce the inputs".into()
    })?;

    let before = a.clone();
    let out = augment_bag(&a, &cfg, Mode::Eval, &mut r);
    let batch = vec![(a.clone(), ya.to_vec()), (b.clone(), yb.to_vec())];
    let mixed = mixup_batch(batch.clone(), &cfg, Mode::Eval, &mut r).map_err(|e| e.to_string())?;
    let bits = |m: &BagMatrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&out) == bits(&before) && mixed == batch, || {
        "eval mode changed a bag".into()
    })?;
    Ok(format!("jitter std {std:.5}; endpoints exact; eval no-op"))
}

/// Independent recomputation from the four cells of a binary confusion matrix.
fn brute_metrics(tn: u64, fp: u64, fn_: u64, tp: u64) -> (f64, f64, f64, f64) {
    let total = (tn + fp + fn_ + tp) as f64;
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let acc = (tn + tp) as f64 / total;
    let pe = ((tn + fp) as f64 * (tn + fn_) as f64 + (fn_ + tp) as f64 * (fp + tp) as f64)
        / (total * total);
    let kappa = if pe >= 1.0 {
        0.0
    } else {
        (acc - pe) / (1.0 - pe)
    };
    (acc, div(tp, tp + fp), div(tp, tp + fn_), kappa)
}

fn metrics_oracle() -> Check {
    let mut checked = 0;
    for tn in 0..=12u64 {
        for fp in 0..=12 - tn {
            for fn_ in 0..=12 - tn - fp {
                for tp in 0..=12 - tn - fp - fn_ {
                    if tn + fp + fn_ + tp == 0 {
                        continue;
                    }
                    let cm = ConfusionMatrix::new(vec![vec![tn, fp], vec![fn_, tp]])
                        .map_err(|e| e.to_string())?;
                    let m = metrics(&cm).map_err(|e| e.to_string())?;
                    let (acc, p, rc, kappa) = brute_metrics(tn, fp, fn_, tp);
                    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
                    ensure(
                        close(m.accuracy, acc)
                            && close(m.precision, p)
                            && close(m.recall, rc)
                            && close(m.kappa, kappa),
                        || {
                            format!(
                                "[[{tn},{fp}],[{fn_},{tp}]]: {m:?} vs ({acc}, {p}, {rc}, {kappa})"
                            )
                        },
                    )?;
                    checked += 1;
                }
            }
        }
    }
    let m = metrics(&ConfusionMatrix::new(vec![vec![2, 1], vec![1, 2]]).unwrap()).unwrap();
    ensure((m.kappa - 0.3333).abs() <= 1e-4, || {
        format!("[[2,1],[1,2]] kappa {}", m.kappa)
    })?;
    Ok(format!(
        "{checked} matrices; [[2,1],[1,2]] kappa {:.4}",
        m.kappa
    ))
}

fn e2e_config(root: &Path, seed: u64, grid: Vec<AblationCell>) -> ExperimentConfig {
    ExperimentConfig {
        features_dir: Some(root.join("features")),
        work_dir: Some(root.join("work")),
        seed,
        k: 10,
        grid,
        synth: SynthConfig {
            n_slides: 160,
            signal_fraction: 0.1,
            shift: 5.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn end_to_end() -> Check {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let cells = vec![
        AblationCell {
            clustering: true,
            classifier: ClassifierKind::Amil,
        },
        AblationCell {
            clustering: false,
            classifier: ClassifierKind::Amil,
        },
    ];
    let mut summary = Vec::new();
    for seed in [1u64, 2, 3] {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = e2e_config(tmp.path(), seed, cells.clone());
        let rows = pool.install(|| -> Result<_, String> {
            pipeline::run_synth(&cfg, &tmp.path().join("features")).map_err(|e| e.to_string())?;
            pipeline::run_cluster(&cfg).map_err(|e| e.to_string())?;
            pipeline::run_eval(&cfg).map_err(|e| e.to_string())
        })?;
        let acc = |i: usize| {
            rows[i]
                .result
                .as_ref()
                .map(|m| m.accuracy)
                .map_err(|e| e.to_string())
        };
        let (on, off) = (acc(0)?, acc(1)?);
        summary.push(format!("seed {seed}: {on:.3} vs {off:.3}"));
        ensure(on >= 0.90 && on >= off, || {
            format!("seed {seed}: clustering+AMIL {on:.4}, no-clustering AMIL {off:.4}")
        })?;
    }
    Ok(summary.join("; "))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Check {
    let mut runs = Vec::new();
    for threads in [1, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| e.to_string())?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = e2e_config(tmp.path(), 7, full_grid());
        cfg.k = 6;
        cfg.train.epochs = 5;
        cfg.synth.n_slides = 24;
        cfg.synth.patches_per_slide = 80;
        pool.install(|| -> Result<(), String> {
            pipeline::run_synth(&cfg, &tmp.path().join("features")).map_err(|e| e.to_string())?;
            pipeline::run_cluster(&cfg).map_err(|e| e.to_string())?;
            pipeline::run_train(&cfg).map_err(|e| e.to_string())?;
            pipeline::run_eval(&cfg).map_err(|e| e.to_string())?;
            Ok(())
        })?;
        let work = tmp.path().join("work");
        runs.push((
            read_dir_bytes(&work.join("bags")),
            std::fs::read(work.join("model.ckpt")).unwrap(),
            std::fs::read(work.join("results.csv")).unwrap(),
        ));
    }
    ensure(runs[0].0 == runs[1].0, || "bags differ".into())?;
    ensure(runs[0].1 == runs[1].1, || "checkpoints differ".into())?;
    ensure(runs[0].2 == runs[1].2, || "results CSVs differ".into())?;
    Ok(format!(
        "{} bag files, checkpoint and results identical across 1 and 4 threads",
        runs[0].0.len()
    ))
}

fn disks(centres: &[(usize, usize)]) -> RgbImage {
    let mut img = RgbImage::filled(512, 512, [255, 255, 255]);
    for &(cx, cy) in centres {
        for y in cy - 8..=cy + 8 {
            for x in cx - 8..=cx + 8 {
                if x.abs_diff(cx).pow(2) + y.abs_diff(cy).pow(2) <= 64 {
                    img.set_pixel(x, y, [80, 40, 120]);
                }
            }
        }
    }
    img
}

fn nucleus_filter() -> Check {
    let twelve: Vec<(usize, usize)> = (0..12)
        .map(|i| (60 + (i % 4) * 120, 80 + (i / 4) * 150))
        .collect();
    let mut eleven = twelve.clone();
    eleven[1] = (eleven[0].0 + 10, eleven[0].1);
    let cfg = NucleiConfig::default();
    let counts = [
        count_nuclei(&disks(&[]), &cfg),
        count_nuclei(&disks(&twelve), &cfg),
        count_nuclei(&disks(&eleven), &cfg),
    ];
    ensure(counts == [0, 12, 11], || {
        format!("counts {counts:?}, constructed 0/12/11")
    })?;

    let record = |i: usize, count: usize| PatchRecord {
        nucleus_count: count,
        tissue_fraction: 1.0,
        ..PatchRecord::at(0, i)
    };
    let mut r = rng(106);
    for _ in 0..200 {
        let cs: Vec<usize> = (0..r.random_range(1..30))
            .map(|_| r.random_range(0..30))
            .collect();
        let records: Vec<PatchRecord> = cs.iter().enumerate().map(|(i, &c)| record(i, c)).collect();
        let want: Vec<usize> = (0..cs.len()).filter(|&i| cs[i] >= 10).collect();
        match filter_patches(&records, &FilterCriteria::default()) {
            Ok(kept) => {
                let got: Vec<usize> = kept.iter().map(|p| p.col).collect();
                ensure(got == want, || {
                    format!("counts {cs:?}: kept {got:?}, expected {want:?}")
                })?;
            }
            Err(_) => ensure(want.is_empty(), || format!("counts {cs:?}: filter failed"))?,
        }
    }
    let fixed: Vec<PatchRecord> = [0, 9, 10, 250]
        .iter()
        .enumerate()
        .map(|(i, &c)| record(i, c))
        .collect();
    let kept: Vec<usize> = filter_patches(&fixed, &FilterCriteria::default())
        .unwrap()
        .iter()
        .map(|p| p.col)
        .collect();
    ensure(kept == [2, 3], || format!("[0, 9, 10, 250] kept {kept:?}"))?;
    Ok("counts 0/12/11; every count < 10 dropped over 200 random slides".into())
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Option<Duration>, fn() -> Check)> = vec![
        (
            "permutation invariance",
            Some(Duration::from_secs(10)),
            permutation_invariance,
        ),
        (
            "gradient correctness",
            Some(Duration::from_secs(30)),
            gradient_correctness,
        ),
        (
            "k-means oracle equivalence",
            Some(Duration::from_secs(60)),
            kmeans_oracle,
        ),
        ("Lloyd monotonicity", None, lloyd_monotonicity),
        ("elbow detector", None, elbow_detector),
        ("augmentation statistics", None, augmentation_statistics),
        ("metrics oracle", None, metrics_oracle),
        (
            "end-to-end synthetic benchmark",
            Some(Duration::from_secs(300)),
            end_to_end,
        ),
        ("determinism", None, determinism),
        ("nucleus filter", None, nucleus_filter),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let result = match (result, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!(
                "took {:.1} s, budget {} s",
                elapsed.as_secs_f64(),
                b.as_secs()
            )),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2} s)", elapsed.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({:.2} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
