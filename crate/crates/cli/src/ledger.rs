//! Append-only CSV record of evaluation and training results.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 6] = ["timestamp", "config_hash", "command", "spec", "metric", "value"];

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub config_hash: String,
    pub command: String,
    /// Attack spec for `eval`, schedule for `train`.
    pub spec: String,
    pub metric: String,
    pub value: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(massweights::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Appends `rows` under an exclusive lock, writing the header first when
/// the file is new or empty.
pub fn append(path: &Path, rows: &[LedgerRow]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    file.lock().map_err(|e| io_err(path, e))?;
    let empty = file.metadata().map_err(|e| io_err(path, e))?.len() == 0;

    let stamp = OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .map_err(|e| CliError::Input(format!("timestamp: {e}")))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Input(format!("ledger row: {e}"));
    if empty {
        w.write_record(HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record([
            stamp.as_str(),
            &r.config_hash,
            &r.command,
            &r.spec,
            &r.metric,
            &r.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Input(format!("ledger row: {e}")))?;
    // One write per append so concurrent readers never see half a batch.
    file.write_all(&bytes).map_err(|e| io_err(path, e))?;
    file.sync_data().map_err(|e| io_err(path, e))?;
    file.unlock().map_err(|e| io_err(path, e))
}
