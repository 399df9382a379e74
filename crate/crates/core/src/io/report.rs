//! CSV tables and JSON summaries.

use std::path::Path;

use serde::Serialize;

use crate::io::IoError;

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| IoError::Invalid(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| IoError::Invalid(format!("csv: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), IoError> {
    crate::io::write_file(path, &csv_bytes(rows)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    crate::io::write_file(path, text.as_bytes())
}
