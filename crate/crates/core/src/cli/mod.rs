//! Config-driven experiment runners behind the `resiter` binary. Every runner
//! writes into a run directory and returns a structured result; the binary
//! only parses arguments and maps errors to exit codes.

mod config;
mod gradcheck;
mod runs;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{Error, Result};

pub use config::{DataConfig, DataSource, ExperimentConfig, IdxPaths, ProbeSettings, Splits};
pub use gradcheck::{
    block_input_gradcheck, dense_config, gradcheck_models, model_param_gradcheck, run_gradcheck, CheckResult,
    GradcheckOptions, GradcheckReport, ParamCheck, GRADIENT_TOLERANCE, STEP_IDENTITY_TOLERANCE, TAYLOR_MIN_FRACTION,
    TAYLOR_MIN_SLOPE,
};
pub use runs::{
    collect_probes, run_drop_scan, run_probe, run_share_train, run_train, run_unroll, unroll_rows, MetricsRow,
    ProbeOutcome, RunSummary, UnrollRow,
};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "RESITER_OUT";
/// Output root when neither flag, config nor environment names one.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const UNROLL_SCHEMA_VERSION: u32 = 1;

/// `--out`, then the config's `output_dir`, then the environment, then `runs`.
pub fn resolve_output_root(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: csv: {other:?}", path.display())),
    }
}

/// Writes `rows` with a header row, replacing any existing file.
pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends `rows`, writing the header only when the file is new or empty.
pub(crate) fn append_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
