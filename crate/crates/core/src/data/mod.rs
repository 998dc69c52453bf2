//! Tabular datasets: schema, CSV ingestion, preprocessing and the
//! repeated-shuffle splitting protocol.

mod csv_io;
mod preprocess;
mod schema;
mod split;

pub use csv_io::{load_csv, load_csv_with_schema, read_schema, write_csv, write_schema};
pub use preprocess::{fit_preprocess, inverse_transform, transform, CategoricalState, NumericalState, PreprocessState, STD_EPS};
pub use schema::{FeatureKind, FeatureSchema, TableDataset};
pub use split::{make_splits, read_split_plan, write_split_plan, SplitPlan, SplitRepeat};
