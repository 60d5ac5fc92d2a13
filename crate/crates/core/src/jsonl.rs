//! JSON-lines file helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: display.clone(),
            line: i + 1,
            source,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let display = path.display().to_string();
    let file =
        File::create(path).map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("serializable record");
        writeln!(w, "{line}").map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    }
    w.flush().map_err(|source| JsonlError::Io { path: display, source })
}
