use ndarray::Array2;
use proptest::prelude::*;

use tabgen_core::data::{fit_preprocess, FeatureSchema, TableDataset};
use tabgen_core::eval::{evaluate, overfit_report, shape_score, trend_score};
use tabgen_core::{rng, toy};

fn random_table(n: usize, seed: u64) -> TableDataset {
    let mut r = rng::rng_from(seed, &[]);
    let mut values = Array2::zeros((n, 4));
    for i in 0..n {
        values[[i, 0]] = rng::normal(&mut r);
        values[[i, 1]] = (rng::normal(&mut r) * 3.0).round();
        values[[i, 2]] = (i * 7 + seed as usize) as f64 % 3.0;
        values[[i, 3]] = (rng::normal(&mut r) > 0.0) as u8 as f64;
    }
    let schema = vec![
        FeatureSchema::numerical("x"),
        FeatureSchema::numerical("z"),
        FeatureSchema::categorical("c", vec!["p".into(), "q".into(), "r".into()]),
        FeatureSchema::categorical("y", vec!["no".into(), "yes".into()]),
    ];
    TableDataset::new(values, schema).unwrap()
}

fn reversed(ds: &TableDataset) -> TableDataset {
    let rows: Vec<usize> = (0..ds.n_rows()).rev().collect();
    ds.select_rows(&rows)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_are_bounded_and_finite(n in 5usize..60, m in 5usize..60, a in 0u64..1000, b in 0u64..1000) {
        let train = random_table(n, a);
        let synth = random_table(m, b);
        let state = fit_preprocess(&train).unwrap();
        let rep = evaluate(&train, &synth, &state, None).unwrap();
        for (name, v) in rep.flat() {
            prop_assert!(v.is_finite(), "{name} = {v}");
        }
        for v in [rep.shape, rep.trend, rep.dcr_score, rep.authenticity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(rep.dcr_raw >= 0.0);
    }

    #[test]
    fn synthetic_row_order_does_not_matter(n in 5usize..50, a in 0u64..1000, b in 0u64..1000) {
        let train = random_table(n, a);
        let synth = random_table(n, b);
        let state = fit_preprocess(&train).unwrap();
        let x = evaluate(&train, &synth, &state, None).unwrap();
        let y = evaluate(&train, &reversed(&synth), &state, None).unwrap();
        prop_assert!((x.shape - y.shape).abs() < 1e-12);
        prop_assert!((x.trend - y.trend).abs() < 1e-12);
        prop_assert!((x.dcr_raw - y.dcr_raw).abs() < 1e-12);
        prop_assert!((x.authenticity - y.authenticity).abs() < 1e-12);
    }
}

#[test]
fn holdout_as_synthetic_raises_no_flags() {
    let train = toy::mixed_table(300, 0, 1);
    let holdout = toy::mixed_table(300, 0, 2);
    let state = fit_preprocess(&train).unwrap();
    let rep = overfit_report(&train, &holdout, &holdout, &state).unwrap();
    assert!(!rep.flags.any(), "{:?}", rep.flags);
}

#[test]
fn training_copy_raises_every_flag() {
    let train = toy::mixed_table(300, 0, 1);
    let holdout = toy::mixed_table(300, 0, 2);
    let state = fit_preprocess(&train).unwrap();
    let rep = overfit_report(&train, &holdout, &train, &state).unwrap();
    assert!(rep.flags.all(), "{:?}", rep.flags);
    assert_eq!(rep.synthetic.dcr_raw, 0.0);
}

/// Shuffling every column independently keeps the marginals but destroys
/// the dependence between them.
#[test]
fn independent_column_shuffles_hurt_trend_only() {
    let real = toy::mixed_table(600, 1, 3);
    let mut shuffled = real.clone();
    let mut r = rng::rng_from(9, &[]);
    for j in 0..real.n_features() {
        let mut col: Vec<f64> = real.values.column(j).to_vec();
        rand::seq::SliceRandom::shuffle(col.as_mut_slice(), &mut r);
        for (i, v) in col.into_iter().enumerate() {
            shuffled.values[[i, j]] = v;
        }
    }
    let shape = shape_score(&real, &shuffled).unwrap().0;
    let trend = trend_score(&real, &shuffled).unwrap().0;
    assert_eq!(shape, 1.0);
    assert!(trend < 0.95, "trend {trend}");
}
