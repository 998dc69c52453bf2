#![allow(dead_code)]

use ndarray::Array2;
use tabgen_core::config::RunConfig;
use tabgen_core::data::{FeatureSchema, TableDataset};
use tabgen_core::pipeline::{prepare_datasets, FrozenFrontEnd, PreparedDataset};
use tabgen_core::toy;

/// Small architecture for desk-scale runs.
pub fn toy_config(rounds: usize, steps: usize) -> RunConfig {
    RunConfig {
        latent_dim: 16,
        encoder_depth: 2,
        encoder_heads: 2,
        diffusion_layers: 2,
        diffusion_heads: 2,
        decoder_layers: 2,
        decoder_heads: 2,
        rounds,
        diffusion_steps_per_dataset: steps,
        decoder_steps_per_dataset: steps,
        batch_size: 128,
        ..RunConfig::default()
    }
}

pub fn prepared(cfg: &RunConfig, tables: Vec<(&str, TableDataset)>) -> (FrozenFrontEnd, Vec<PreparedDataset>) {
    let front = FrozenFrontEnd::from_config(cfg).unwrap();
    let raw: Vec<(String, TableDataset)> = tables.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let prep = prepare_datasets(&raw, cfg, &front, None).unwrap();
    (front, prep)
}

pub fn two_toys() -> Vec<(&'static str, TableDataset)> {
    vec![("alpha", toy::mixed_table(300, 1, 11)), ("beta", toy::numeric_table(300, 3, 12))]
}

/// Numerical column plus categoricals with cardinalities 2 and 5.
pub fn cards_2_5(n: usize) -> TableDataset {
    let mut v = Array2::zeros((n, 3));
    for i in 0..n {
        v[[i, 0]] = (i as f64 * 0.37).sin();
        v[[i, 1]] = (i % 2) as f64;
        v[[i, 2]] = (i % 5) as f64;
    }
    let labels = |p: &str, c: usize| (0..c).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    TableDataset::new(
        v,
        vec![
            FeatureSchema::numerical("x"),
            FeatureSchema::categorical("b", labels("b", 2)),
            FeatureSchema::categorical("f", labels("f", 5)),
        ],
    )
    .unwrap()
}

pub fn assert_schema_valid(t: &TableDataset) {
    for (j, f) in t.schema.iter().enumerate() {
        for &v in t.values.column(j) {
            assert!(v.is_finite(), "non-finite value in {}", f.name);
            if f.is_categorical() {
                assert!(v >= 0.0 && (v as usize) < f.cardinality() && v.fract() == 0.0, "bad code {v} in {}", f.name);
            }
        }
    }
}
