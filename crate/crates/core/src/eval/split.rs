use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::seed::{derive_index, rng};

pub const SPLITS_FILE: &str = "splits.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn partition_of(&self, slide_id: &str) -> Option<Partition> {
        let has = |v: &Vec<String>| v.iter().any(|s| s == slide_id);
        if has(&self.train) {
            Some(Partition::Train)
        } else if has(&self.val) {
            Some(Partition::Val)
        } else if has(&self.test) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

fn floor_count(x: f64) -> usize {
    // Products like 0.85 · 50 land a hair off the integer; nudge first.
    (x + 1e-9).floor() as usize
}

/// Split `n` slides of one class into three parts, each the floor or ceiling
/// of its share. Leftover slides go where the running cohort-level totals
/// (`allocated`, against `targets`) are furthest behind.
fn apportion(n: usize, ratios: [f64; 3], targets: [usize; 3], allocated: [usize; 3]) -> [usize; 3] {
    let mut parts = [0usize; 3];
    let mut fracs = [0f64; 3];
    for i in 0..3 {
        let share = n as f64 * ratios[i];
        parts[i] = floor_count(share);
        fracs[i] = share - parts[i] as f64;
    }
    let mut left = n.saturating_sub(parts.iter().sum());
    let mut order: Vec<usize> = (0..3).filter(|&i| fracs[i] > 1e-9).collect();
    let deficit = |i: usize| targets[i] as i64 - (allocated[i] + parts[i]) as i64;
    order.sort_by(|&a, &b| {
        deficit(b)
            .cmp(&deficit(a))
            .then(fracs[b].total_cmp(&fracs[a]))
            .then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts
}

/// Stratified, seed-deterministic train/val/test split.
///
/// Every class contributes the floor or ceiling of its share to each part,
/// and rounding slack is steered so that the cohort-level sizes match the
/// rounded ratios where possible (100 slides at 0.70/0.15/0.15 → 70/15/15).
pub fn split_cohort(
    labels: &BTreeMap<String, usize>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitSpec> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be >= 0 and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, &label) in labels {
        by_class.entry(label).or_default().push(id.clone());
    }
    if let Some((&class, ids)) = by_class.iter().find(|(_, ids)| ids.len() < 2) {
        return Err(Error::ClassTooSmall {
            class,
            count: ids.len(),
        });
    }

    let mut split = SplitSpec {
        ratios,
        seed,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut cum = 0usize;
    let mut allocated = [0usize; 3];
    for (&class, ids) in &by_class {
        let mut ids = ids.clone();
        ids.shuffle(&mut rng(derive_index(seed, class as u64)));
        cum += ids.len();
        let targets = ratios.map(|r| (cum as f64 * r + 0.5 + 1e-9).floor() as usize);
        let [n_train, n_val, _] = apportion(ids.len(), ratios, targets, allocated);
        for (a, p) in allocated
            .iter_mut()
            .zip([n_train, n_val, ids.len() - n_train - n_val])
        {
            *a += p;
        }
        split.train.extend_from_slice(&ids[..n_train]);
        split.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        split.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

/// Check that the three partitions are disjoint and cover `labels` exactly.
pub fn check_split(split: &SplitSpec, labels: &BTreeMap<String, usize>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "slide {id} appears in more than one split"
            )));
        }
        if !labels.contains_key(id) {
            return Err(Error::MissingLabel {
                slide_id: id.clone(),
            });
        }
    }
    if seen.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "split covers {} of {} slides",
            seen.len(),
            labels.len()
        )));
    }
    Ok(())
}
