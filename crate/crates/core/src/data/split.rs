use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::schema::TableDataset;
use crate::error::{Error, Result};
use crate::rng;

/// One shuffle of the 30/10/30/30 train/val/test/holdout protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRepeat {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl SplitRepeat {
    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.train, &self.val, &self.test, &self.holdout]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_repeats: usize,
    pub n_rows: usize,
    pub stratified: bool,
    /// Set when stratification was requested but could not be honoured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub repeats: Vec<SplitRepeat>,
}

/// Split sizes `[train, val, test, holdout]` for `n` rows.
pub fn split_sizes(n: usize) -> [usize; 4] {
    let dev = (0.4 * n as f64).round() as usize;
    let test = (0.3 * n as f64).round() as usize;
    let holdout = n - dev - test;
    let train = (0.75 * dev as f64).round() as usize;
    [train, dev - train, test, holdout]
}

/// Builds `n_repeats` independent shuffles. Stratification applies when the
/// target column is categorical and every class has at least `n_repeats`
/// members; otherwise the plan falls back to plain shuffling and records why.
pub fn make_splits(ds: &TableDataset, n_repeats: usize, seed: u64, stratify: bool) -> Result<SplitPlan> {
    let n = ds.n_rows();
    if n < 10 {
        return Err(Error::Split(format!("need at least 10 rows, got {n}")));
    }
    if n_repeats == 0 {
        return Err(Error::Split("n_repeats must be positive".into()));
    }
    let sizes = split_sizes(n);
    if sizes.contains(&0) {
        return Err(Error::Split(format!("{n} rows cannot populate all four splits: {sizes:?}")));
    }

    let mut warning = None;
    let classes = if stratify {
        let target = ds.target_index();
        let col = &ds.schema[target];
        if !col.is_categorical() {
            warning = Some("target is numerical; stratification skipped".to_string());
            None
        } else {
            let mut members = vec![Vec::new(); col.cardinality()];
            let mut missing = Vec::new();
            for (i, &v) in ds.values.column(target).iter().enumerate() {
                if v.is_nan() {
                    missing.push(i);
                } else {
                    members[v as usize].push(i);
                }
            }
            if !missing.is_empty() {
                members.push(missing);
            }
            members.retain(|m| !m.is_empty());
            if members.iter().any(|m| m.len() < n_repeats) {
                warning = Some(format!(
                    "a class has fewer than {n_repeats} members; stratification skipped"
                ));
                None
            } else {
                Some(members)
            }
        }
    } else {
        None
    };

    let repeats = (0..n_repeats)
        .map(|r| {
            let mut rng = rng::rng_from(seed, &[0x5911, r as u64]);
            match &classes {
                Some(members) => stratified_repeat(members, n, sizes, &mut rng),
                None => {
                    let mut perm: Vec<usize> = (0..n).collect();
                    perm.shuffle(&mut rng);
                    cut(&perm, sizes)
                }
            }
        })
        .collect();

    Ok(SplitPlan {
        seed,
        n_repeats,
        n_rows: n,
        stratified: classes.is_some(),
        warning,
        repeats,
    })
}

fn cut(perm: &[usize], sizes: [usize; 4]) -> SplitRepeat {
    let mut parts = Vec::with_capacity(4);
    let mut start = 0;
    for s in sizes {
        parts.push(perm[start..start + s].to_vec());
        start += s;
    }
    let holdout = parts.pop().unwrap();
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    SplitRepeat { train, val, test, holdout }
}

/// Allocates each class's members to the four splits so that split totals
/// are exact and every (class, split) count is the floor or ceiling of its
/// proportional share.
fn stratified_repeat(members: &[Vec<usize>], n: usize, sizes: [usize; 4], rng: &mut rng::Rng) -> SplitRepeat {
    let k = members.len();
    let mut alloc = vec![[0usize; 4]; k];
    let mut row_extra = vec![0usize; k];
    let mut col_extra = sizes;
    for (c, m) in members.iter().enumerate() {
        for s in 0..4 {
            alloc[c][s] = m.len() * sizes[s] / n;
            col_extra[s] -= alloc[c][s];
        }
        row_extra[c] = m.len() - alloc[c].iter().sum::<usize>();
    }
    // Gale-Ryser greedy: classes needing the most extra slots go first, each
    // taking one extra from the splits with the largest remaining deficit.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| row_extra[b].cmp(&row_extra[a]).then(a.cmp(&b)));
    for c in order {
        let mut splits: Vec<usize> = (0..4).collect();
        splits.sort_by(|&a, &b| col_extra[b].cmp(&col_extra[a]).then(a.cmp(&b)));
        for &s in splits.iter().take(row_extra[c]) {
            debug_assert!(col_extra[s] > 0);
            alloc[c][s] += 1;
            col_extra[s] -= 1;
        }
    }

    let mut out: [Vec<usize>; 4] = Default::default();
    for (c, m) in members.iter().enumerate() {
        let mut shuffled = m.clone();
        shuffled.shuffle(rng);
        let mut start = 0;
        for s in 0..4 {
            out[s].extend_from_slice(&shuffled[start..start + alloc[c][s]]);
            start += alloc[c][s];
        }
    }
    for part in out.iter_mut() {
        part.shuffle(rng);
    }
    let [train, val, test, holdout] = out;
    SplitRepeat { train, val, test, holdout }
}

pub fn write_split_plan(path: &Path, plan: &SplitPlan) -> Result<()> {
    let text = serde_json::to_string_pretty(plan)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split_plan(path: &Path) -> Result<SplitPlan> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
