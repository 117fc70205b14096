//! Observational datasets, CSV ingestion, splitting, standardization and the
//! built-in data-generating processes with oracle potential outcomes.

pub mod csv_io;
pub mod dataset;
pub mod dgp;
pub mod scale;

pub use csv_io::{load_csv, load_oracle_csv, write_csv, write_oracle_csv, CsvSchema};
pub use dataset::{split, split_indices, Dataset, Oracle};
pub use dgp::{
    generate, generate_constant_oracle, generate_gaussian_oracle, generate_ihdp_b, generate_synthetic, DgpKind, DgpSpec,
};
pub use scale::{DataScaler, Standardizer};
