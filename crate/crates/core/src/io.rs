//! File output helpers: atomic writes, CSV formatting, checkpoint hashing.
//!
//! CSV files use a header row, `.` as the decimal point, and shortest
//! round-trip float formatting, so every file re-parses to the exact values
//! that were written.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "out".into())
        )),
        None => Path::new(&format!(
            ".{}.tmp",
            path.to_string_lossy()
        ))
        .to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Shortest-round-trip decimal formatting for one float.
pub fn fmt_f64(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Render rows as CSV with the given header.
pub fn csv_document(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parse a CSV document written by [`csv_document`]: returns `(header,
/// rows)`. No quoting is supported; the toolkit never writes quoted fields.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty CSV document".into()))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::Data(format!(
                "CSV row {} has {} fields, header has {}",
                i + 2,
                fields.len(),
                header.len()
            )));
        }
        rows.push(fields);
    }
    Ok((header, rows))
}

pub fn parse_f64(field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::Data(format!("bad float '{field}': {e}")))
}

/// Hex SHA-256 of a file, recorded in sidecars to tie artifacts to the
/// checkpoint they were computed from.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -0.0, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s}");
        }
    }

    #[test]
    fn csv_round_trips() {
        let header = vec!["a".to_string(), "b".to_string()];
        let rows = vec![
            vec![fmt_f64(1.5), fmt_f64(-2.25)],
            vec![fmt_f64(0.1), fmt_f64(1e-9)],
        ];
        let doc = csv_document(&header, &rows);
        let (h, r) = parse_csv(&doc).unwrap();
        assert_eq!(h, header);
        assert_eq!(r, rows);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No temp file left behind.
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
