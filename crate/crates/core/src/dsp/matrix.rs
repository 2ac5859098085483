//! Plain-text float matrices: a `rows cols` header, then one row per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn format_matrix(rows: usize, cols: usize, values: &[f32]) -> Result<String> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", values.len())));
    }
    let mut out = format!("{rows} {cols}\n");
    for r in 0..rows {
        for (c, v) in values[r * cols..(r + 1) * cols].iter().enumerate() {
            if c > 0 {
                out.push(' ');
            }
            // shortest representation that round-trips
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_matrix(text: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let parse_err = |line: usize, message: String| Error::Parse { line: line + 1, message };
    let (hl, header) = lines.next().ok_or_else(|| parse_err(0, "empty matrix file".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(hl, format!("bad header token {t:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(hl, "header must be `rows cols`".into()));
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (ln, line) in lines {
        let row: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(ln, format!("bad value {t:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(parse_err(ln, format!("expected {cols} values, found {}", row.len())));
        }
        values.extend(row);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Shape(format!("header says {rows} rows, found {seen}")));
    }
    Ok((rows, cols, values))
}

pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    fs::write(path, format_matrix(rows, cols, values)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    parse_matrix(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let v = vec![0.1f32, -1e-10, 3.4028235e38, -23.025851, 0.0, 1.0 / 3.0];
        let text = format_matrix(2, 3, &v).unwrap();
        assert_eq!(parse_matrix(&text).unwrap(), (2, 3, v));
    }

    #[test]
    fn malformed() {
        assert!(parse_matrix("").is_err());
        assert!(parse_matrix("2 2\n1 2\n3\n").is_err());
        assert!(parse_matrix("2 2\n1 2\n").is_err());
        assert!(format_matrix(2, 2, &[1.0]).is_err());
    }
}
