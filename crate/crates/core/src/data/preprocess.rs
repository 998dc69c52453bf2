use serde::{Deserialize, Serialize};

use super::schema::{FeatureKind, FeatureSchema, TableDataset};
use crate::error::{Error, Result};

/// Added to the variance before taking the square root.
pub const STD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericalState {
    pub column: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalState {
    pub column: usize,
    pub mode: usize,
    pub labels: Vec<String>,
}

/// Statistics fitted on a training split: Z-score parameters for numerical
/// columns (the mean doubles as imputation value) and the imputation mode plus
/// label map for categorical columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub schema: Vec<FeatureSchema>,
    pub numerical: Vec<NumericalState>,
    pub categorical: Vec<CategoricalState>,
}

impl PreprocessState {
    pub fn numerical_for(&self, column: usize) -> Option<&NumericalState> {
        self.numerical.iter().find(|s| s.column == column)
    }

    fn check_compatible(&self, ds: &TableDataset) -> Result<()> {
        if ds.schema != self.schema {
            return Err(Error::Schema(
                "dataset schema differs from the one preprocessing was fitted on".into(),
            ));
        }
        Ok(())
    }

    /// Standardizes a single numerical cell without imputation.
    pub fn standardize(&self, column: usize, v: f64) -> f64 {
        match self.numerical_for(column) {
            Some(s) => (v - s.mean) / s.std,
            None => v,
        }
    }
}

/// Population statistics over non-missing cells.
pub fn fit_preprocess(ds: &TableDataset) -> Result<PreprocessState> {
    let mut numerical = Vec::new();
    let mut categorical = Vec::new();
    for (j, col) in ds.schema.iter().enumerate() {
        let present: Vec<f64> = ds
            .values
            .column(j)
            .iter()
            .copied()
            .filter(|v| !v.is_nan())
            .collect();
        if present.is_empty() {
            return Err(Error::Preprocess {
                column: col.name.clone(),
                message: "every cell is missing".into(),
            });
        }
        match col.kind {
            FeatureKind::Numerical => {
                let n = present.len() as f64;
                let mean = present.iter().sum::<f64>() / n;
                let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                numerical.push(NumericalState {
                    column: j,
                    mean,
                    std: (var + STD_EPS).sqrt(),
                });
            }
            FeatureKind::Categorical => {
                let mut counts = vec![0usize; col.cardinality()];
                for v in &present {
                    counts[*v as usize] += 1;
                }
                // lowest code wins ties
                let mode = counts
                    .iter()
                    .enumerate()
                    .fold((0, 0), |best, (c, &n)| if n > best.1 { (c, n) } else { best })
                    .0;
                categorical.push(CategoricalState {
                    column: j,
                    mode,
                    labels: col.categories.clone(),
                });
            }
        }
    }
    Ok(PreprocessState {
        schema: ds.schema.clone(),
        numerical,
        categorical,
    })
}

/// Imputes missing cells, then Z-scores numerical columns. Categorical codes
/// pass through unchanged.
pub fn transform(ds: &TableDataset, state: &PreprocessState) -> Result<TableDataset> {
    state.check_compatible(ds)?;
    let mut out = ds.clone();
    for s in &state.numerical {
        for v in out.values.column_mut(s.column) {
            let x = if v.is_nan() { s.mean } else { *v };
            *v = (x - s.mean) / s.std;
        }
    }
    for s in &state.categorical {
        for v in out.values.column_mut(s.column) {
            if v.is_nan() {
                *v = s.mode as f64;
            }
        }
    }
    Ok(out)
}

/// Maps Z-scored numericals back to original units and checks that every
/// categorical code names a known label.
pub fn inverse_transform(ds: &TableDataset, state: &PreprocessState) -> Result<TableDataset> {
    if ds.schema.len() != state.schema.len() {
        return Err(Error::Schema(format!(
            "expected {} columns, got {}",
            state.schema.len(),
            ds.schema.len()
        )));
    }
    let mut values = ds.values.clone();
    for s in &state.numerical {
        for v in values.column_mut(s.column) {
            *v = *v * s.std + s.mean;
        }
    }
    for s in &state.categorical {
        for (i, &v) in values.column(s.column).iter().enumerate() {
            if v.is_nan() || v < 0.0 || v.fract() != 0.0 || v as usize >= s.labels.len() {
                return Err(Error::Decode(format!(
                    "row {i}, column `{}`: code {v} has no label",
                    state.schema[s.column].name
                )));
            }
        }
    }
    Ok(TableDataset {
        values,
        schema: state.schema.clone(),
    })
}
