//! Plot-ready trace files.
//!
//! ```text
//! # deepo-trace v1
//! # algorithm deepo
//! # key value ...          (metadata, one entry per line)
//! k,rel_err,J,J_obj,proj_grad_norm,null_norm,eta,K_0_0,K_0_1,...
//! 0,9.5e-2,...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const TRACE_MAGIC: &str = "# deepo-trace v1";

/// Columns every trace starts with, in order.
pub const TRACE_COLUMNS: [&str; 7] = ["k", "rel_err", "J", "J_obj", "proj_grad_norm", "null_norm", "eta"];

#[derive(Clone, Debug, PartialEq)]
pub struct TraceFile {
    pub metadata: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl TraceFile {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            metadata: BTreeMap::new(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingTrace(format!("trace metadata has no '{key}'")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key)?;
        v.parse().map_err(|_| Error::Parse {
            line: 0,
            message: format!("metadata '{key}' is not a number: {v}"),
        })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingTrace(format!("trace has no column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    /// Gain stored in the `K_i_j` columns of row `row`.
    pub fn gain_at(&self, row: usize, m: usize, n: usize) -> Result<DMatrix<f64>> {
        let r = self
            .rows
            .get(row)
            .ok_or_else(|| Error::MissingTrace(format!("trace has no row {row}")))?;
        let mut k = DMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let name = format!("K_{i}_{j}");
                let idx = self
                    .columns
                    .iter()
                    .position(|c| *c == name)
                    .ok_or_else(|| Error::MissingTrace(format!("trace has no column '{name}'")))?;
                k[(i, j)] = r[idx];
            }
        }
        Ok(k)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRACE_MAGIC}");
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k} {v}");
        }
        let _ = writeln!(out, "{}", self.columns.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{}", *v as u64) } else { format!("{v:.17e}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == TRACE_MAGIC => {}
            _ => return Err(parse_err(1, format!("expected '{TRACE_MAGIC}'"))),
        }
        let mut metadata = BTreeMap::new();
        let mut columns = None;
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if columns.is_some() {
                    return Err(parse_err(i + 1, "metadata after the column header".into()));
                }
                let rest = rest.trim();
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                metadata.insert(k.to_string(), v.trim().to_string());
                continue;
            }
            match &columns {
                None => {
                    let cols: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
                    if cols.len() < TRACE_COLUMNS.len() || cols.iter().zip(TRACE_COLUMNS).any(|(a, b)| a != b) {
                        return Err(parse_err(i + 1, format!("column header must start with {}", TRACE_COLUMNS.join(","))));
                    }
                    columns = Some(cols);
                }
                Some(cols) => {
                    let row: Vec<f64> = line
                        .split(',')
                        .map(|c| c.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| parse_err(i + 1, format!("bad number: {e}")))?;
                    if row.len() != cols.len() {
                        return Err(parse_err(i + 1, format!("expected {} fields, found {}", cols.len(), row.len())));
                    }
                    if row[0] != rows.len() as f64 {
                        return Err(parse_err(i + 1, format!("expected k = {}", rows.len())));
                    }
                    rows.push(row);
                }
            }
        }
        let columns = columns.ok_or_else(|| parse_err(0, "missing column header".into()))?;
        if rows.is_empty() {
            return Err(Error::MissingTrace("trace has no rows".into()));
        }
        Ok(Self { metadata, columns, rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingTrace(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

/// Least-squares fit `ln y = intercept + slope k`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct LogLinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of points used.
    pub points: usize,
    pub first_k: usize,
}

/// Values of the relative error at or below this are treated as round-off
/// and excluded from rate fits.
pub const FIT_FLOOR: f64 = 1e-10;

/// Fits the tail of a decaying sequence: the second half of the prefix that
/// stays above `floor`. `None` with fewer than three points.
pub fn tail_log_linear_fit(values: &[f64], floor: f64) -> Option<LogLinearFit> {
    let end = values.iter().position(|v| !(*v > floor)).unwrap_or(values.len());
    let start = end / 2;
    let ks: Vec<f64> = (start..end).map(|k| k as f64).collect();
    let ys: Vec<f64> = values[start..end].iter().map(|v| v.ln()).collect();
    let mut fit = log_linear_fit(&ks, &ys)?;
    fit.first_k = start;
    Some(fit)
}

fn log_linear_fit(x: &[f64], y: &[f64]) -> Option<LogLinearFit> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Some(LogLinearFit {
        slope,
        intercept,
        r_squared,
        points: n,
        first_k: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_geometric_sequence_fits_perfectly() {
        let v: Vec<f64> = (0..100).map(|k| 0.5 * 0.9f64.powi(k)).collect();
        let fit = tail_log_linear_fit(&v, 1e-300).unwrap();
        assert!((fit.slope - 0.9f64.ln()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(fit.first_k, 50);
    }

    #[test]
    fn fit_stops_at_floor() {
        let mut v: Vec<f64> = (0..40).map(|k| 0.8f64.powi(k)).collect();
        v.extend([1e-15, -1e-16, 2e-15]);
        let fit = tail_log_linear_fit(&v, 1e-10).unwrap();
        assert_eq!(fit.first_k + fit.points, 40);
        assert!(tail_log_linear_fit(&[1.0, 0.5], 1e-10).is_none());
    }

    #[test]
    fn header_checked() {
        let mut t = TraceFile::new(TRACE_COLUMNS.iter().map(|s| s.to_string()).collect());
        t.set("algorithm", "deepo");
        t.rows.push(vec![0.0, 0.1, 5.0, 5.0, 1.0, 0.0, 2e-3]);
        let text = t.to_text();
        assert_eq!(TraceFile::from_text(&text).unwrap(), t);
        assert!(TraceFile::from_text(&text.replace("rel_err", "err")).is_err());
        assert!(TraceFile::from_text(&text.replace(TRACE_MAGIC, "# other")).is_err());
        assert!(TraceFile::from_text(&format!("{text}1,0.1\n")).is_err());
    }
}
