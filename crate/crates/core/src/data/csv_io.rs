use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::schema::{validate_schema, FeatureKind, FeatureSchema, TableDataset};
use crate::error::{Error, Result};

/// Numeric columns with at most this many distinct values (and at least one
/// repeated value) are inferred as categorical.
pub const CATEGORICAL_MAX_DISTINCT: usize = 20;

/// On-disk schema sidecar: `{"columns": [{"name", "kind", "categories"}]}`.
#[derive(Debug, Serialize, Deserialize)]
struct SchemaFile {
    columns: Vec<FeatureSchema>,
}

pub fn read_schema(path: &Path) -> Result<Vec<FeatureSchema>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SchemaFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    validate_schema(&file.columns)?;
    Ok(file.columns)
}

pub fn write_schema(path: &Path, schema: &[FeatureSchema]) -> Result<()> {
    let file = SchemaFile {
        columns: schema.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a CSV file; the schema comes from `schema_path` when given,
/// otherwise it is inferred from the cells.
pub fn load_csv(path: &Path, schema_path: Option<&Path>) -> Result<TableDataset> {
    let schema = schema_path.map(read_schema).transpose()?;
    let (header, rows) = read_cells(path)?;
    build_dataset(header, rows, schema)
}

/// Reads a CSV file against a known schema, e.g. synthetic output checked
/// against the schema of the real data.
pub fn load_csv_with_schema(path: &Path, schema: &[FeatureSchema]) -> Result<TableDataset> {
    let (header, rows) = read_cells(path)?;
    build_dataset(header, rows, Some(schema.to_vec()))
}

fn read_cells(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: "empty file".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(e, i + 1))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row: i + 1,
                column: rec.len().min(header.len()),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(|c| c.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "no data rows".into(),
        });
    }
    Ok((header, rows))
}

fn csv_error(e: csv::Error, row: usize) -> Error {
    let (row, column) = match e.position() {
        Some(p) => (p.record() as usize, 0),
        None => (row, 0),
    };
    Error::Parse {
        row,
        column,
        message: e.to_string(),
    }
}

fn build_dataset(
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    schema: Option<Vec<FeatureSchema>>,
) -> Result<TableDataset> {
    let schema = match schema {
        Some(s) => {
            let names: Vec<&str> = s.iter().map(|c| c.name.as_str()).collect();
            if names != header.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(Error::Schema(format!(
                    "CSV header {header:?} does not match schema columns {names:?}"
                )));
            }
            s
        }
        None => infer_schema(&header, &rows),
    };
    let n = rows.len();
    let d = schema.len();
    let mut values = Array2::<f64>::zeros((n, d));
    for (j, col) in schema.iter().enumerate() {
        let lookup: HashMap<&str, usize> = col
            .categories
            .iter()
            .enumerate()
            .map(|(c, l)| (l.as_str(), c))
            .collect();
        for (i, row) in rows.iter().enumerate() {
            let cell = row[j].as_str();
            values[[i, j]] = if cell.is_empty() {
                f64::NAN
            } else {
                match col.kind {
                    FeatureKind::Numerical => parse_number(cell).ok_or_else(|| Error::Parse {
                        row: i + 1,
                        column: j,
                        message: format!("`{cell}` is not a number in numerical column `{}`", col.name),
                    })?,
                    FeatureKind::Categorical => match lookup.get(cell) {
                        Some(&c) => c as f64,
                        None => {
                            return Err(Error::Schema(format!(
                                "row {}, column `{}`: label `{cell}` not among declared categories",
                                i + 1,
                                col.name
                            )))
                        }
                    },
                }
            };
        }
    }
    TableDataset::new(values, schema)
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn infer_schema(header: &[String], rows: &[Vec<String>]) -> Vec<FeatureSchema> {
    header
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let cells: Vec<&str> = rows
                .iter()
                .map(|r| r[j].as_str())
                .filter(|c| !c.is_empty())
                .collect();
            let all_numeric = cells.iter().all(|c| parse_number(c).is_some());
            let distinct: BTreeSet<&str> = cells.iter().copied().collect();
            let categorical = !all_numeric
                || (distinct.len() <= CATEGORICAL_MAX_DISTINCT && distinct.len() < cells.len());
            if categorical && !cells.is_empty() {
                FeatureSchema::categorical(name.clone(), ordered_labels(distinct, all_numeric))
            } else {
                FeatureSchema::numerical(name.clone())
            }
        })
        .collect()
}

/// Numeric labels sort by value, everything else lexicographically.
fn ordered_labels(distinct: BTreeSet<&str>, numeric: bool) -> Vec<String> {
    let mut labels: Vec<&str> = distinct.into_iter().collect();
    if numeric {
        labels.sort_by(|a, b| {
            let (x, y) = (parse_number(a).unwrap(), parse_number(b).unwrap());
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    }
    labels.into_iter().map(str::to_string).collect()
}

/// Writes a table with raw labels for categorical columns. Missing cells are
/// written as empty strings.
pub fn write_csv(path: &Path, ds: &TableDataset) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let err = |e: csv::Error| Error::Serde(e.to_string());
    wtr.write_record(ds.schema.iter().map(|c| c.name.as_str()))
        .map_err(err)?;
    for row in ds.values.rows() {
        let cells: Vec<String> = row
            .iter()
            .zip(&ds.schema)
            .map(|(&v, col)| {
                if v.is_nan() {
                    String::new()
                } else if col.is_categorical() {
                    col.categories[v as usize].clone()
                } else {
                    format_number(v)
                }
            })
            .collect();
        wtr.write_record(&cells).map_err(err)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn format_number(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v}")
}
