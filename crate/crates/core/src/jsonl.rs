use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

/// Parse newline-delimited JSON, yielding each record with its 1-based line
/// number. Blank lines are skipped.
pub(crate) fn read_jsonl<T, F>(path: &Path, mut each: F) -> Result<()>
where
    T: DeserializeOwned,
    F: FnMut(usize, T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| Error::format(&name, i + 1, e.to_string()))?;
        each(i + 1, rec)?;
    }
    Ok(())
}
