//! Loader for XJTU-SY-format CSV files: a header row naming the horizontal
//! and vertical acceleration columns, then one sample per row, one file per
//! sampling minute.

use super::{Channel, DataError, RawRecord};
use std::path::Path;

/// Samples per channel in a conforming XJTU-SY minute file. Deviations are
/// reported as warnings, not errors.
pub const XJTU_SAMPLES_PER_FILE: usize = 32768;

/// A loaded record plus any conformance warnings.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub record: RawRecord,
    pub warnings: Vec<String>,
}

/// Read one channel of an XJTU-SY CSV file.
///
/// The header must contain a column whose name mentions the requested
/// channel (the dataset ships `Horizontal_vibration_signals` /
/// `Vertical_vibration_signals`; matching is case-insensitive on the
/// direction word). `sample_rate` comes from configuration — the files
/// carry no rate information and the paper's printed rate is an erratum.
pub fn load_xjtu_csv(
    path: &Path,
    channel: Channel,
    sample_rate: f64,
) -> Result<LoadedRecord, DataError> {
    assert!(sample_rate > 0.0, "sample_rate must be positive");
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(&display, 0, e))?;

    let needle = channel.to_string();
    let headers = reader.headers().map_err(|e| csv_error(&display, 0, e))?;
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(DataError::ParseError {
            path: display,
            row: 0,
            detail: "empty file (no header row)".to_string(),
        });
    }
    let column = headers
        .iter()
        .position(|h| h.to_ascii_lowercase().contains(&needle))
        .ok_or_else(|| DataError::MissingColumn {
            path: display.clone(),
            channel: needle.clone(),
        })?;

    let mut samples = Vec::with_capacity(XJTU_SAMPLES_PER_FILE);
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 2; // 1-based, counting the header
        let row = row.map_err(|e| csv_error(&display, row_no, e))?;
        let cell = row.get(column).ok_or_else(|| DataError::ParseError {
            path: display.clone(),
            row: row_no,
            detail: format!("row has {} columns, need {}", row.len(), column + 1),
        })?;
        let value: f64 = cell.trim().parse().map_err(|_| DataError::ParseError {
            path: display.clone(),
            row: row_no,
            detail: format!("non-numeric cell {cell:?}"),
        })?;
        samples.push(value);
    }
    if samples.is_empty() {
        return Err(DataError::ParseError {
            path: display,
            row: 1,
            detail: "header only, no samples".to_string(),
        });
    }

    let mut warnings = Vec::new();
    if samples.len() != XJTU_SAMPLES_PER_FILE {
        warnings.push(format!(
            "{display}: {} samples, XJTU-SY layout has {XJTU_SAMPLES_PER_FILE} per channel",
            samples.len()
        ));
    }

    Ok(LoadedRecord {
        record: RawRecord {
            samples,
            channel,
            sample_rate,
            source_path: display,
            minute_index: minute_index_from_path(path),
        },
        warnings,
    })
}

/// XJTU-SY names files by minute ordinal (`1.csv`, `2.csv`, ...); anything
/// else gets index 0.
fn minute_index_from_path(path: &Path) -> u32 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn csv_error(path: &str, row: usize, e: csv::Error) -> DataError {
    if let csv::ErrorKind::Io(io) = e.into_kind() {
        DataError::Io(io)
    } else {
        DataError::ParseError {
            path: path.to_string(),
            row,
            detail: "malformed CSV".to_string(),
        }
    }
}
