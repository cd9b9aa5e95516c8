use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub max_iters: usize,
    /// Stop once the relative WCSS improvement of an iteration drops below this.
    pub tol: f64,
    /// Independent k-means++ initialisations; the lowest final WCSS wins.
    pub restarts: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            tol: 1e-6,
            restarts: 8,
        }
    }
}

/// A fitted k-means partition of one feature matrix.
///
/// Clusters are stored in canonical order: descending size, ties broken by
/// lexicographic centroid order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major. Row `j` is the mean of the points assigned to `j`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
    pub seed: u64,
    /// WCSS after every centroid update of the winning restart.
    pub history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    fn canonicalize(&mut self) {
        let sizes = self.cluster_sizes();
        let mut order: Vec<usize> = (0..self.k).collect();
        order.sort_by(|&a, &b| {
            sizes[b]
                .cmp(&sizes[a])
                .then_with(|| lex_cmp(self.centroid(a), self.centroid(b)))
                .then(a.cmp(&b))
        });
        let mut relabel = vec![0; self.k];
        for (new, &old) in order.iter().enumerate() {
            relabel[old] = new;
        }
        let mut centroids = Vec::with_capacity(self.centroids.len());
        for &old in &order {
            centroids.extend_from_slice(self.centroid(old));
        }
        self.centroids = centroids;
        for a in &mut self.assignments {
            *a = relabel[*a];
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Feature rows widened to `f64` once so every distance accumulates in 64 bits.
pub(crate) struct Points {
    pub n: usize,
    pub dim: usize,
    pub x: Vec<f64>,
}

impl Points {
    pub fn new(features: &FeatureMatrix) -> Self {
        Self {
            n: features.n_patches(),
            dim: features.dim(),
            x: features.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of one Lloyd run from a given initialisation.
#[derive(Debug, Clone)]
pub(crate) struct LloydRun {
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

struct Lloyd<'a> {
    pts: &'a Points,
    k: usize,
    centroids: Vec<f64>,
    assign: Vec<usize>,
}

impl Lloyd<'_> {
    fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.pts.dim..(j + 1) * self.pts.dim]
    }

    /// Move each point to a strictly closer centroid, if any. The first pass
    /// (no current assignment) takes the nearest centroid, lowest index on ties.
    fn assign(&mut self, first: bool) -> bool {
        let mut changed = false;
        for i in 0..self.pts.n {
            let x = self.pts.row(i);
            let (mut best, mut best_d) = if first {
                (usize::MAX, f64::INFINITY)
            } else {
                let cur = self.assign[i];
                (cur, sq_dist(x, self.centroid(cur)))
            };
            for j in 0..self.k {
                let d = sq_dist(x, self.centroid(j));
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            if best != self.assign[i] {
                self.assign[i] = best;
                changed = true;
            }
        }
        changed
    }

    /// Give every empty cluster the point farthest from its own centroid
    /// (taken from a cluster that can spare it).
    fn repair_empty(&mut self) -> bool {
        let mut sizes = vec![0usize; self.k];
        for &a in &self.assign {
            sizes[a] += 1;
        }
        let mut repaired = false;
        for j in 0..self.k {
            if sizes[j] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = f64::NEG_INFINITY;
            for i in 0..self.pts.n {
                let a = self.assign[i];
                if sizes[a] < 2 {
                    continue;
                }
                let d = sq_dist(self.pts.row(i), self.centroid(a));
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
            let i = far.expect("k <= n guarantees a donor cluster");
            sizes[self.assign[i]] -= 1;
            sizes[j] = 1;
            self.assign[i] = j;
            let dim = self.pts.dim;
            let row = self.pts.row(i).to_vec();
            self.centroids[j * dim..(j + 1) * dim].copy_from_slice(&row);
            repaired = true;
        }
        repaired
    }

    fn update_means(&mut self) {
        let dim = self.pts.dim;
        let mut sums = vec![0.0; self.k * dim];
        let mut counts = vec![0usize; self.k];
        for i in 0..self.pts.n {
            let a = self.assign[i];
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(self.pts.row(i)) {
                *s += v;
            }
        }
        for j in 0..self.k {
            let c = counts[j] as f64;
            for s in &mut sums[j * dim..(j + 1) * dim] {
                *s /= c;
            }
        }
        self.centroids = sums;
    }

    /// One sweep of Hartigan single-point transfers: move a point to another
    /// cluster whenever that lowers the exact WCSS, updating both means in
    /// place. Lloyd fixed points can still admit such moves.
    fn transfer(&mut self) -> bool {
        let dim = self.pts.dim;
        let mut counts = vec![0usize; self.k];
        for &a in &self.assign {
            counts[a] += 1;
        }
        let mut moved = false;
        for i in 0..self.pts.n {
            let a = self.assign[i];
            if counts[a] < 2 {
                continue;
            }
            let x = self.pts.row(i);
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(x, self.centroid(a));
            let mut best = None;
            let mut best_add = removal;
            for j in (0..self.k).filter(|&j| j != a) {
                let nj = counts[j] as f64;
                let add = nj / (nj + 1.0) * sq_dist(x, self.centroid(j));
                if add < best_add {
                    best = Some(j);
                    best_add = add;
                }
            }
            let Some(b) = best else { continue };
            // Ignore gains lost in rounding so the sweep cannot cycle.
            if removal - best_add <= 1e-12 * removal {
                continue;
            }
            let nb = counts[b] as f64;
            for d in 0..dim {
                let ca = &mut self.centroids[a * dim + d];
                *ca = (*ca * na - x[d]) / (na - 1.0);
                let cb = &mut self.centroids[b * dim + d];
                *cb = (*cb * nb + x[d]) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            self.assign[i] = b;
            moved = true;
        }
        moved
    }

    fn cost(&self) -> f64 {
        (0..self.pts.n)
            .map(|i| sq_dist(self.pts.row(i), self.centroid(self.assign[i])))
            .sum()
    }
}

pub(crate) fn lloyd(pts: &Points, k: usize, init: Vec<f64>, cfg: &KmeansConfig) -> LloydRun {
    let mut state = Lloyd {
        pts,
        k,
        centroids: init,
        assign: vec![usize::MAX; pts.n],
    };
    state.assign(true);
    state.repair_empty();
    state.update_means();
    let mut wcss = state.cost();
    let mut history = vec![wcss];
    let mut iterations = 1;
    loop {
        while iterations < cfg.max_iters && wcss > 0.0 {
            let moved = state.assign(false);
            let repaired = state.repair_empty();
            if !moved && !repaired {
                break;
            }
            state.update_means();
            let next = state.cost();
            history.push(next);
            iterations += 1;
            let improvement = (wcss - next) / wcss;
            wcss = next;
            if improvement < cfg.tol {
                break;
            }
        }
        if iterations >= cfg.max_iters || wcss == 0.0 {
            break;
        }
        let saved = (state.assign.clone(), state.centroids.clone());
        if !state.transfer() {
            break;
        }
        state.update_means();
        let next = state.cost();
        if next >= wcss {
            (state.assign, state.centroids) = saved;
            break;
        }
        history.push(next);
        iterations += 1;
        wcss = next;
    }
    LloydRun {
        centroids: state.centroids,
        assignments: state.assign,
        wcss,
        iterations,
        history,
    }
}

/// k-means++ seeding: first centre uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen centre.
pub(crate) fn kmeans_plus_plus(pts: &Points, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * pts.dim);
    let first = rng.random_range(0..pts.n);
    centroids.extend_from_slice(pts.row(first));
    let mut d2: Vec<f64> = (0..pts.n)
        .map(|i| sq_dist(pts.row(i), pts.row(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `acc` just short of `target`; fall back to the
            // last point with positive weight.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            rng.random_range(0..pts.n)
        };
        let c = pts.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pts.row(i), &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

fn finish(run: LloydRun, k: usize, dim: usize, seed: u64) -> ClusterModel {
    let mut model = ClusterModel {
        k,
        dim,
        centroids: run.centroids,
        assignments: run.assignments,
        wcss: run.wcss,
        iterations: run.iterations,
        seed,
        history: run.history,
    };
    model.canonicalize();
    model
}

fn best_run(runs: Vec<LloydRun>) -> LloydRun {
    // Lowest WCSS; the earliest restart wins ties.
    let mut best: Option<LloydRun> = None;
    for r in runs {
        if best.as_ref().is_none_or(|b| r.wcss < b.wcss) {
            best = Some(r);
        }
    }
    best.expect("at least one restart")
}

pub(crate) fn fit_points(
    pts: &Points,
    k: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<ClusterModel> {
    check_k(k, pts.n)?;
    let restarts = cfg.restarts.max(1);
    let runs: Vec<LloydRun> = (0..restarts as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_index(seed, r));
            let init = kmeans_plus_plus(pts, k, &mut rng);
            lloyd(pts, k, init, cfg)
        })
        .collect();
    Ok(finish(best_run(runs), k, pts.dim, seed))
}

/// Lloyd's k-means with k-means++ restarts, each run polished by Hartigan
/// transfers. Deterministic for a given seed.
pub fn kmeans_fit(
    features: &FeatureMatrix,
    k: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<ClusterModel> {
    fit_points(&Points::new(features), k, seed, cfg)
}

/// Run Lloyd iterations from explicit starting centroids (`k × dim`, row-major).
pub fn kmeans_from(
    features: &FeatureMatrix,
    init_centroids: &[f64],
    cfg: &KmeansConfig,
) -> Result<ClusterModel> {
    let pts = Points::new(features);
    if init_centroids.is_empty() || !init_centroids.len().is_multiple_of(pts.dim) {
        return Err(Error::DimMismatch {
            context: "initial centroids".into(),
            expected: pts.dim,
            found: init_centroids.len(),
        });
    }
    let k = init_centroids.len() / pts.dim;
    check_k(k, pts.n)?;
    Ok(finish(
        lloyd(&pts, k, init_centroids.to_vec(), cfg),
        k,
        pts.dim,
        0,
    ))
}

/// WCSS for each `k` in `k_min..=k_max`.
///
/// Each `k` is fit cold from the shared seed and also warm-started from the
/// previous `k`'s solution plus its farthest point; the better of the two is
/// kept, so the curve never increases with `k`.
pub fn wcss_curve(
    features: &FeatureMatrix,
    k_min: usize,
    k_max: usize,
    seed: u64,
    cfg: &KmeansConfig,
) -> Result<Vec<(usize, f64)>> {
    let pts = Points::new(features);
    if k_min > k_max {
        return Err(Error::InvalidArgument(format!(
            "k_min {k_min} exceeds k_max {k_max}"
        )));
    }
    check_k(k_min, pts.n)?;
    check_k(k_max, pts.n)?;
    let mut curve = Vec::with_capacity(k_max - k_min + 1);
    let mut prev: Option<ClusterModel> = None;
    for k in k_min..=k_max {
        let cold = fit_points(&pts, k, seed, cfg)?;
        let model = match prev {
            Some(p) => {
                let far = (0..pts.n)
                    .map(|i| (i, sq_dist(pts.row(i), p.centroid(p.assignments[i]))))
                    .fold((0, f64::NEG_INFINITY), |best, (i, d)| {
                        if d > best.1 {
                            (i, d)
                        } else {
                            best
                        }
                    });
                let mut init = p.centroids.clone();
                init.extend_from_slice(pts.row(far.0));
                let warm = finish(lloyd(&pts, k, init, cfg), k, pts.dim, seed);
                if warm.wcss < cold.wcss {
                    warm
                } else {
                    cold
                }
            }
            None => cold,
        };
        curve.push((k, model.wcss));
        prev = Some(model);
    }
    Ok(curve)
}
