//! Shared pieces of the plain-text file formats.
//!
//! Floats are written with Rust's shortest round-trip representation, so
//! parsing a written value gives back the identical bits and writing it again
//! gives back the identical text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn fmt_row(row: &[f64]) -> String {
    let mut s = String::with_capacity(row.len() * 20);
    for (i, x) in row.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

pub(crate) fn parse_row(line: &str, expected: usize, path: &str, what: &str) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::bad_format(path, format!("{what}: bad number {t:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != expected {
        return Err(Error::bad_format(
            path,
            format!("{what}: expected {expected} values, found {}", vals.len()),
        ));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("values in file"));
    }
    Ok(vals)
}

pub(crate) fn parse_usize(tok: Option<&str>, path: &str, what: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::bad_format(path, format!("missing or invalid {what}")))
}

/// Checks `"<MAGIC> 1 ..."` and returns the remaining header tokens.
pub(crate) fn check_header<'a>(line: Option<&'a str>, magic: &str, path: &str) -> Result<Vec<&'a str>> {
    let line = line.ok_or_else(|| Error::bad_format(path, "empty file"))?;
    let mut toks = line.split_whitespace();
    if toks.next() != Some(magic) {
        return Err(Error::bad_format(path, format!("expected magic {magic}")));
    }
    match toks.next() {
        Some("1") => Ok(toks.collect()),
        Some(v) => Err(Error::bad_format(path, format!("unsupported version {v}"))),
        None => Err(Error::bad_format(path, "missing version")),
    }
}

pub(crate) fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
