use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numerical,
    Categorical,
}

/// One column's type information. Categorical columns carry their raw labels
/// in code order, so code `c` means `categories[c]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl FeatureSchema {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
            categories: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, categories: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            categories,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }

    /// Number of categories; zero for numerical columns.
    pub fn cardinality(&self) -> usize {
        match self.kind {
            FeatureKind::Numerical => 0,
            FeatureKind::Categorical => self.categories.len(),
        }
    }
}

/// An `N x (D+1)` table whose last column is the target.
///
/// Numerical cells are reals, categorical cells are ordinal codes stored as
/// `f64`. Missing cells are `NaN` until imputed by [`super::transform`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableDataset {
    pub values: Array2<f64>,
    pub schema: Vec<FeatureSchema>,
}

impl TableDataset {
    pub fn new(values: Array2<f64>, schema: Vec<FeatureSchema>) -> Result<Self> {
        let ds = Self { values, schema };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        validate_schema(&self.schema)?;
        if self.values.nrows() == 0 {
            return Err(Error::Schema("table has no rows".into()));
        }
        if self.values.ncols() != self.schema.len() {
            return Err(Error::Schema(format!(
                "table has {} columns but schema lists {}",
                self.values.ncols(),
                self.schema.len()
            )));
        }
        for (j, col) in self.schema.iter().enumerate() {
            if !col.is_categorical() {
                continue;
            }
            let card = col.cardinality() as f64;
            for (i, &v) in self.values.column(j).iter().enumerate() {
                if v.is_nan() {
                    continue;
                }
                if v < 0.0 || v >= card || v.fract() != 0.0 {
                    return Err(Error::Schema(format!(
                        "row {i}, column `{}`: code {v} outside [0, {card})",
                        col.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    /// Column count including the target (`D + 1`).
    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn target_index(&self) -> usize {
        self.schema.len() - 1
    }

    pub fn select_rows(&self, rows: &[usize]) -> TableDataset {
        TableDataset {
            values: self.values.select(Axis(0), rows),
            schema: self.schema.clone(),
        }
    }

    pub fn numerical_columns(&self) -> Vec<usize> {
        columns_of_kind(&self.schema, FeatureKind::Numerical)
    }

    pub fn categorical_columns(&self) -> Vec<usize> {
        columns_of_kind(&self.schema, FeatureKind::Categorical)
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }
}

pub(crate) fn columns_of_kind(schema: &[FeatureSchema], kind: FeatureKind) -> Vec<usize> {
    schema
        .iter()
        .enumerate()
        .filter(|(_, c)| c.kind == kind)
        .map(|(j, _)| j)
        .collect()
}

pub(crate) fn validate_schema(schema: &[FeatureSchema]) -> Result<()> {
    if schema.len() < 2 {
        return Err(Error::Schema(format!(
            "need at least one feature plus the target, got {} column(s)",
            schema.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for col in schema {
        if !seen.insert(col.name.as_str()) {
            return Err(Error::Schema(format!("duplicate column name `{}`", col.name)));
        }
        match col.kind {
            FeatureKind::Categorical if col.categories.is_empty() => {
                return Err(Error::Schema(format!(
                    "categorical column `{}` has no categories",
                    col.name
                )))
            }
            FeatureKind::Numerical if !col.categories.is_empty() => {
                return Err(Error::Schema(format!(
                    "numerical column `{}` lists categories",
                    col.name
                )))
            }
            _ => {}
        }
    }
    Ok(())
}
