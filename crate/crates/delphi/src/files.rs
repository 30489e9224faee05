//! Versioned on-disk formats.
//!
//! Every file starts with a schema tag line so readers can refuse data they
//! do not understand:
//! - line-delimited JSON files open with `{"schema":"delphi/<name>/v1"}`;
//! - CSV files open with `# schema: delphi/<name>/v1` followed by a header.
//!
//! Writes are atomic (temp file + rename) so interrupted runs never leave a
//! half-written artifact behind.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const QUESTIONS_SCHEMA: &str = "delphi/questions/v1";
pub const MARKETS_SCHEMA: &str = "delphi/markets/v1";
pub const FORECASTS_SCHEMA: &str = "delphi/forecasts/v1";
pub const FLAGS_SCHEMA: &str = "delphi/flags/v1";
pub const SCRIPT_SCHEMA: &str = "delphi/script/v1";
pub const PAIRS_SCHEMA: &str = "delphi/pairs/v1";
pub const SWEEP_SCHEMA: &str = "delphi/sweep/v1";

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is empty: expected a schema tag line")]
    MissingSchemaTag { path: PathBuf },
    #[error("{path}: schema is {found:?}, expected {expected:?}")]
    WrongSchema {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> FileError {
    FileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaTag {
    schema: String,
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FileError> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Serialize items as tagged line-delimited JSON.
pub fn jsonl_bytes<T: Serialize>(schema: &str, items: &[T]) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&SchemaTag {
            schema: schema.to_string(),
        })
        .expect("schema tag serializes"),
    );
    out.push('\n');
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("jsonl item serializes"));
        out.push('\n');
    }
    out.into_bytes()
}

/// Write a tagged line-delimited JSON file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, items: &[T]) -> Result<(), FileError> {
    write_atomic(path, &jsonl_bytes(schema, items))
}

/// Read a tagged line-delimited JSON file, validating the schema tag.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<Vec<T>, FileError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, tag_line) = lines.next().ok_or_else(|| FileError::MissingSchemaTag {
        path: path.to_path_buf(),
    })?;
    let tag: SchemaTag = serde_json::from_str(tag_line).map_err(|e| FileError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: format!("bad schema tag: {e}"),
    })?;
    if tag.schema != expected {
        return Err(FileError::WrongSchema {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: tag.schema,
        });
    }
    let mut items = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| FileError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Render a tagged CSV: `# schema: …`, a header row, then data rows.
pub fn csv_bytes(schema: &str, header: &str, rows: &[String]) -> Vec<u8> {
    let mut out = format!("# schema: {schema}\n{header}\n");
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    out.into_bytes()
}

/// Parse a tagged CSV, returning data rows split on commas. Quoting is not
/// supported: these files carry only numbers and identifiers.
pub fn read_csv(path: &Path, expected: &str) -> Result<Vec<Vec<String>>, FileError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, tag_line) = lines.next().ok_or_else(|| FileError::MissingSchemaTag {
        path: path.to_path_buf(),
    })?;
    let found = tag_line
        .strip_prefix("# schema:")
        .map(str::trim)
        .ok_or_else(|| FileError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "expected `# schema: …` tag line".to_string(),
        })?;
    if found != expected {
        return Err(FileError::WrongSchema {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    // Skip the header row.
    let _ = lines.next();
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(_, l)| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect())
}

/// Write `(forecast, outcome)` calibration pairs.
pub fn write_pairs_csv(path: &Path, pairs: &[(f64, f64)]) -> Result<(), FileError> {
    let rows: Vec<String> = pairs
        .iter()
        .map(|(p, o)| format!("{p},{o}"))
        .collect();
    write_atomic(path, &csv_bytes(PAIRS_SCHEMA, "forecast,outcome", &rows))
}

/// Read `(forecast, outcome)` calibration pairs.
pub fn read_pairs_csv(path: &Path) -> Result<Vec<(f64, f64)>, FileError> {
    let rows = read_csv(path, PAIRS_SCHEMA)?;
    let mut pairs = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 2 {
            return Err(FileError::Parse {
                path: path.to_path_buf(),
                line: i + 3,
                message: format!("expected 2 columns, got {}", row.len()),
            });
        }
        let p: f64 = row[0].parse().map_err(|e| FileError::Parse {
            path: path.to_path_buf(),
            line: i + 3,
            message: format!("bad forecast: {e}"),
        })?;
        let o: f64 = row[1].parse().map_err(|e| FileError::Parse {
            path: path.to_path_buf(),
            line: i + 3,
            message: format!("bad outcome: {e}"),
        })?;
        pairs.push((p, o));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: String,
        v: f64,
    }

    #[test]
    fn jsonl_round_trips_with_schema_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![
            Row { id: "a".into(), v: 0.5 },
            Row { id: "b".into(), v: 0.25 },
        ];
        write_jsonl(&path, "delphi/test/v1", &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"schema\":\"delphi/test/v1\"}\n"));
        let back: Vec<Row> = read_jsonl(&path, "delphi/test/v1").unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn wrong_schema_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        write_jsonl(&path, "delphi/test/v1", &[Row { id: "a".into(), v: 1.0 }]).unwrap();
        let err = read_jsonl::<Row>(&path, "delphi/test/v2").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("delphi/test/v1") && msg.contains("delphi/test/v2"), "{msg}");
    }

    #[test]
    fn empty_file_reports_missing_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            read_jsonl::<Row>(&path, "delphi/test/v1"),
            Err(FileError::MissingSchemaTag { .. })
        ));
    }

    #[test]
    fn bad_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        fs::write(&path, "{\"schema\":\"delphi/test/v1\"}\n{\"id\":\"a\",\"v\":1.0}\nnot json\n")
            .unwrap();
        match read_jsonl::<Row>(&path, "delphi/test/v1") {
            Err(FileError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn pairs_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.csv");
        let pairs = vec![(0.25, 1.0), (0.75, 0.0)];
        write_pairs_csv(&path, &pairs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema: delphi/pairs/v1\nforecast,outcome\n"));
        assert_eq!(read_pairs_csv(&path).unwrap(), pairs);
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "two");
        // No temp litter left behind.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
