// SPDX-License-Identifier: Apache-2.0
//! Versioned JSON envelopes for every file the CLI reads or writes.
//!
//! A file is `{"version": 1, "kind": ..., "data": ...}`. Output is written
//! with sorted keys so that identical objects give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub const VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write `{path}`: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("`{path}` is not JSON: {source}")]
    Syntax { path: PathBuf, source: serde_json::Error },
    #[error("`{path}` has no schema version")]
    MissingVersion { path: PathBuf },
    #[error("`{path}` has schema version {found}, expected {VERSION}")]
    Version { path: PathBuf, found: Value },
    #[error("`{path}` holds a `{found}`, expected a `{expected}`")]
    Kind { path: PathBuf, found: String, expected: &'static str },
    #[error("`{path}` at `{at}`: {message}")]
    Field { path: PathBuf, at: String, message: String },
}

/// Wrap `data` in an envelope and render it canonically.
///
/// # Errors
/// Serialization failures, which only arise from non-finite numbers.
pub fn render<T: Serialize>(kind: &str, data: &T) -> Result<String, serde_json::Error> {
    // `Value` maps keep keys sorted
    let v = serde_json::json!({ "version": VERSION, "kind": kind, "data": serde_json::to_value(data)? });
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Write an envelope to `path`, or to stdout for `None` or `-`.
///
/// # Errors
/// IO failures.
pub fn store<T: Serialize>(path: Option<&Path>, kind: &str, data: &T) -> Result<(), SchemaError> {
    let target = path.unwrap_or(Path::new("-"));
    let text = render(kind, data).map_err(|e| SchemaError::Write {
        path: target.to_path_buf(),
        source: std::io::Error::other(e),
    })?;
    if target == Path::new("-") {
        print!("{text}");
        Ok(())
    } else {
        fs::write(target, text).map_err(|source| SchemaError::Write { path: target.to_path_buf(), source })
    }
}

/// Parse an envelope from text, checking version and kind.
///
/// # Errors
/// Syntax, version, kind or field errors; field errors carry a JSON path.
pub fn parse<T: DeserializeOwned>(path: &Path, text: &str, kind: &'static str) -> Result<T, SchemaError> {
    let mut v: Value =
        serde_json::from_str(text).map_err(|source| SchemaError::Syntax { path: path.to_path_buf(), source })?;
    match v.get("version") {
        None => return Err(SchemaError::MissingVersion { path: path.to_path_buf() }),
        Some(found) if found.as_u64() != Some(VERSION) => {
            return Err(SchemaError::Version { path: path.to_path_buf(), found: found.clone() })
        }
        Some(_) => {}
    }
    let found = v.get("kind").and_then(Value::as_str).unwrap_or("").to_string();
    if found != kind {
        return Err(SchemaError::Kind { path: path.to_path_buf(), found, expected: kind });
    }
    let data = v.get_mut("data").map(Value::take).unwrap_or(Value::Null);
    serde_path_to_error::deserialize(data).map_err(|e| SchemaError::Field {
        path: path.to_path_buf(),
        at: format!("data.{}", e.path()),
        message: e.into_inner().to_string(),
    })
}

/// Read and parse an envelope.
///
/// # Errors
/// As [`parse`], plus IO failures.
pub fn load<T: DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T, SchemaError> {
    let text = fs::read_to_string(path).map_err(|source| SchemaError::Read { path: path.to_path_buf(), source })?;
    parse(path, &text, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_and_kind_are_checked() {
        let p = Path::new("x.json");
        let e = parse::<Vec<u8>>(p, r#"{"kind":"bytes","data":[]}"#, "bytes").unwrap_err();
        assert!(matches!(e, SchemaError::MissingVersion { .. }));
        let e = parse::<Vec<u8>>(p, r#"{"version":2,"kind":"bytes","data":[]}"#, "bytes").unwrap_err();
        assert!(matches!(e, SchemaError::Version { .. }));
        let e = parse::<Vec<u8>>(p, r#"{"version":1,"kind":"other","data":[]}"#, "bytes").unwrap_err();
        assert!(matches!(e, SchemaError::Kind { .. }));
        let ok: Vec<u8> = parse(p, &render("bytes", &vec![1u8, 2]).unwrap(), "bytes").unwrap();
        assert_eq!(ok, vec![1, 2]);
    }

    #[test]
    fn field_errors_point_into_the_data() {
        let e = parse::<Vec<Vec<u8>>>(Path::new("x"), r#"{"version":1,"kind":"k","data":[[1],[2,"a"]]}"#, "k").unwrap_err();
        match e {
            SchemaError::Field { at, .. } => assert_eq!(at, "data.[1][1]"),
            other => panic!("{other}"),
        }
    }
}
