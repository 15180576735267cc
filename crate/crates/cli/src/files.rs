//! Reading contests and tallies, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ballotaudit_core::contest::{read_contest_csv, Contest};
use ballotaudit_core::discrepancy::{read_tallies_csv, HandTally};
use ballotaudit_core::AuditError;

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Audit {
        path: PathBuf,
        #[source]
        source: AuditError,
    },
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read(path: &Path) -> Result<String, FileError> {
    fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.to_owned(),
        source,
    })
}

fn audit_err(path: &Path) -> impl FnOnce(AuditError) -> FileError + '_ {
    move |source| FileError::Audit {
        path: path.to_owned(),
        source,
    }
}

/// A JSON contest document, or a CSV with the id (default: file stem) and `f`
/// given separately.
pub fn read_contest(path: &Path, contest_id: Option<&str>, f: u64) -> Result<Contest, FileError> {
    let text = read(path)?;
    if is_json(path) {
        return Contest::from_json(&text).map_err(audit_err(path));
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("contest");
    read_contest_csv(text.as_bytes(), contest_id.unwrap_or(stem), f).map_err(audit_err(path))
}

/// Hand tallies as a JSON array or as CSV.
pub fn read_tallies(path: &Path, contest: &Contest) -> Result<Vec<HandTally>, FileError> {
    let text = read(path)?;
    if is_json(path) {
        serde_json::from_str(&text)
            .map_err(|e| AuditError::InvalidInput(format!("tallies: {e}")))
            .map_err(audit_err(path))
    } else {
        read_tallies_csv(text.as_bytes(), contest).map_err(audit_err(path))
    }
}

/// Writes `contents` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), FileError> {
    let io_err = |source| FileError::Io {
        path: path.to_owned(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents.as_bytes()).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
