//! Configuration, snapshots, CSV series and the run/resume/diagnose entry
//! points.

pub mod config;
pub mod criteria;
pub mod runner;
pub mod series;
pub mod snapshot;

pub use config::{load_config, parse_config, InitialConfig, Mode, OutputConfig, RunConfig};
pub use criteria::{CriterionResult, Status};
pub use runner::{check_kernel, diagnose, resume, run, DiagnoseOptions, DiagnoseReport, RunSummary};
pub use series::{read_series, SeriesWriter};
pub use snapshot::{read_snapshot, write_snapshot, Snapshot, SnapshotHeader, SnapshotMeta};
