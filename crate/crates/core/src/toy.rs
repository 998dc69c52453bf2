//! Seeded synthetic mixed-type tables for smoke runs, demos and benches.

use ndarray::Array2;

use crate::data::{FeatureSchema, TableDataset};
use crate::rng;

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// A correlated mixed-type table with 4 numerical and 2 categorical columns
/// (the last column is a binary target). `variant` perturbs the generating
/// coefficients so different variants are different "datasets".
pub fn mixed_table(n_rows: usize, variant: u64, seed: u64) -> TableDataset {
    let mut r = rng::rng_from(seed, &[0x70e, variant]);
    let v = variant as f64;
    let slope = 0.8 - 0.3 * (v % 3.0);
    let shift = 0.5 * (v % 2.0);
    let mut values = Array2::zeros((n_rows, 6));
    for i in 0..n_rows {
        let a = rng::normal(&mut r);
        let b = slope * a + 0.6 * rng::normal(&mut r);
        let c = if a < -0.4 { 0.0 } else if a < 0.5 { 1.0 } else { 2.0 };
        let d = (0.5 * rng::normal(&mut r) + shift).exp();
        let e = 3.0 * b + d + rng::normal(&mut r);
        let y = if b + 0.5 * c - 0.5 + 0.3 * rng::normal(&mut r) > 0.0 { 1.0 } else { 0.0 };
        values.row_mut(i).assign(&ndarray::arr1(&[a, b, c, d, e, y]));
    }
    let schema = vec![
        FeatureSchema::numerical("a"),
        FeatureSchema::numerical("b"),
        FeatureSchema::categorical("c", labels("c", 3)),
        FeatureSchema::numerical("d"),
        FeatureSchema::numerical("e"),
        FeatureSchema::categorical("y", labels("y", 2)),
    ];
    TableDataset::new(values, schema).expect("valid toy table")
}

/// Same generator with a different column count: `n_num` numericals and one
/// binary target.
pub fn numeric_table(n_rows: usize, n_num: usize, seed: u64) -> TableDataset {
    let mut r = rng::rng_from(seed, &[0x70f, n_num as u64]);
    let mut values = Array2::zeros((n_rows, n_num + 1));
    for i in 0..n_rows {
        let base = rng::normal(&mut r);
        let mut s = 0.0;
        for j in 0..n_num {
            let v = 0.7 * base + 0.7 * rng::normal(&mut r) + j as f64;
            s += v;
            values[[i, j]] = v;
        }
        values[[i, n_num]] = if s > n_num as f64 * (n_num as f64 - 1.0) / 2.0 { 1.0 } else { 0.0 };
    }
    let mut schema: Vec<FeatureSchema> = (0..n_num).map(|j| FeatureSchema::numerical(format!("x{j}"))).collect();
    schema.push(FeatureSchema::categorical("target", labels("t", 2)));
    TableDataset::new(values, schema).expect("valid toy table")
}
