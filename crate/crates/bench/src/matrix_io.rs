//! Plain-text matrices: a `rows cols` header line, then one line per row
//! of whitespace-separated values in shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::{BenchError, Result};

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{}", m[(i, j)]).expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    out
}

pub fn parse_matrix(text: &str, origin: &str) -> Result<DMatrix<f64>> {
    let bad = |reason: String| BenchError::Matrix {
        path: origin.to_string(),
        reason,
    };
    let mut tokens = text.split_whitespace();
    let mut dim = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| bad(format!("missing {what} in header")))?
            .parse()
            .map_err(|e| bad(format!("bad {what}: {e}")))
    };
    let rows = dim("row count")?;
    let cols = dim("column count")?;
    let values = tokens
        .map(|t| t.parse::<f64>().map_err(|e| bad(format!("bad value '{t}': {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != rows * cols {
        return Err(bad(format!(
            "expected {} values for {rows}x{cols}, found {}",
            rows * cols,
            values.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    std::fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Matrix {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_matrix(&text, &path.display().to_string())
}
