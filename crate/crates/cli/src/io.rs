//! CSV datasets and plain file helpers.
//!
//! A dataset file has a header row `x1,…,xm` followed by `y` or `y1,…,yk`; every cell is a
//! finite decimal and row order is preserved.

use std::fs;
use std::path::Path;

use gkdr_emulation::Dataset;
use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

/// Inputs and (possibly absent) responses read from a dataset file.
pub struct Table {
    pub inputs: DMatrix<f64>,
    pub responses: Option<DMatrix<f64>>,
}

impl Table {
    pub fn into_dataset(self, path: &Path) -> CliResult<Dataset> {
        let responses = self
            .responses
            .ok_or_else(|| CliError::parse(path, "no response column (expected a header ending in y or y1..yk)"))?;
        Ok(Dataset::new(self.inputs, responses)?)
    }
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn read_records(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_text(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::parse(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::parse(path, e))?;
        let row = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    CliError::parse(path, format!("row {} column {}: '{cell}' is not a number", line + 2, col + 1))
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(CliError::parse(path, format!("row {} column {}: value is not finite", line + 2, col + 1)))
                }
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::parse(path, "no data rows"));
    }
    Ok((header, rows))
}

fn to_matrix(rows: &[Vec<f64>], cols: std::ops::Range<usize>) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| rows[i][cols.start + j])
}

fn numbered(header: &[String], prefix: &str) -> bool {
    header.iter().enumerate().all(|(i, h)| *h == format!("{prefix}{}", i + 1))
}

/// Reads a dataset file; the response columns may be omitted (prediction inputs).
pub fn read_table(path: &Path) -> CliResult<Table> {
    let (header, rows) = read_records(path)?;
    let m = header.iter().take_while(|h| h.starts_with('x')).count();
    if m == 0 {
        return Err(CliError::parse(path, "header must start with input columns x1,…,xm"));
    }
    if !numbered(&header[..m], "x") {
        return Err(CliError::parse(path, "input columns must be named x1,…,xm in order"));
    }
    let rest = &header[m..];
    let k = rest.len();
    if k > 0 && !(rest == ["y"] || numbered(rest, "y")) {
        return Err(CliError::parse(path, "response columns must be named y or y1,…,yk"));
    }
    let inputs = to_matrix(&rows, 0..m);
    let responses = (k > 0).then(|| to_matrix(&rows, m..m + k));
    Ok(Table { inputs, responses })
}

/// Reads a dataset file that must carry responses.
pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    read_table(path)?.into_dataset(path)
}

/// Reads a numeric matrix with an arbitrary header row (e.g. a gradient file).
pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let (header, rows) = read_records(path)?;
    Ok(to_matrix(&rows, 0..header.len()))
}

/// Shortest decimal that parses back to the same `f64`.
/// Shortest representation that parses back to the same value; exponent form outside
/// `[1e-5, 1e16)` so tiny variances do not print as long runs of zeros.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn write_columns(path: &Path, header: &[String], columns: &[&DMatrix<f64>]) -> CliResult<()> {
    let n = columns.first().map_or(0, |c| c.nrows());
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let io_err = |e: csv::Error| CliError::parse(path, e);
    writer.write_record(header).map_err(io_err)?;
    for i in 0..n {
        let record: Vec<String> =
            columns.iter().flat_map(|c| c.row(i).iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>()).collect();
        writer.write_record(&record).map_err(io_err)?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::parse(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_dataset(path: &Path, inputs: &DMatrix<f64>, responses: &DMatrix<f64>) -> CliResult<()> {
    let mut header: Vec<String> = (1..=inputs.ncols()).map(|j| format!("x{j}")).collect();
    if responses.ncols() == 1 {
        header.push("y".into());
    } else {
        header.extend((1..=responses.ncols()).map(|j| format!("y{j}")));
    }
    write_columns(path, &header, &[inputs, responses])
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::parse(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::parse(path, e))
}
