//! On-disk formats.
//!
//! Tabular CSV: comma separated, optional header row, integer class label in
//! the last column. In binary mode every attribute must be 0 or 1; in numeric
//! mode each attribute is discretized into equal-width bins indexed `1..=bins`.
//!
//! Genome text: one record per line, `SEQUENCE<TAB>LABEL`, sequence of length
//! 20 over `ACGT`, label 0 or 1. Nucleotides are encoded `A,C,G,T -> 1,2,3,4`.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, Result};
use crate::autodiff::Tensor;

pub const NUCLEOTIDES: [char; 4] = ['A', 'C', 'G', 'T'];
pub const GENOME_LENGTH: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CsvMode {
    #[default]
    Binary,
    /// Equal-width discretization with the given bin count.
    Numeric { bins: usize },
    /// Values kept as read.
    Raw,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_csv(path: &Path, mode: CsvMode) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_csv(file, mode)
}

pub fn read_csv<R: Read>(reader: R, mode: CsvMode) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut names = None;
    let mut width = None;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if i == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            names = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(rec.len());
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(DataError::Parse {
                line,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        if w < 2 {
            return Err(DataError::Parse {
                line,
                message: "need at least one attribute and a label".into(),
            });
        }
        for (j, field) in rec.iter().take(w - 1).enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                line,
                message: format!("column {j}: {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    message: format!("column {j}: non-finite value"),
                });
            }
            if mode == CsvMode::Binary && v != 0.0 && v != 1.0 {
                return Err(DataError::Parse {
                    line,
                    message: format!("column {j}: {field:?} is not binary"),
                });
            }
            rows.push(v);
        }
        let label = &rec[w - 1];
        let y: usize = label.parse().map_err(|_| DataError::Parse {
            line,
            message: format!("label {label:?} is not a non-negative integer"),
        })?;
        labels.push(y);
    }
    let n = labels.len();
    if n == 0 {
        return Err(DataError::Invalid("no data rows".into()));
    }
    let d = rows.len() / n;
    if let CsvMode::Numeric { bins } = mode {
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|r| rows[r * d + j]).collect();
            for (r, v) in discretize_equal_width(&col, bins)?.into_iter().enumerate() {
                rows[r * d + j] = v;
            }
        }
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let x = Tensor::matrix(n, d, rows).map_err(|e| DataError::Invalid(e.to_string()))?;
    let ds = Dataset::new(x, labels, classes)?;
    Ok(match names {
        Some(mut names) => {
            names.pop();
            ds.with_attribute_names(names)
        }
        None => ds,
    })
}

/// Writes attributes then label. A header is emitted when the dataset has
/// attribute names.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| DataError::Invalid(e.to_string());
    if let Some(names) = ds.attribute_names() {
        let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
        header.push("label");
        w.write_record(&header).map_err(wrap)?;
    }
    for r in 0..ds.len() {
        let mut fields: Vec<String> = ds.x().row_slice(r).iter().map(|v| v.to_string()).collect();
        fields.push(ds.labels()[r].to_string());
        w.write_record(&fields).map_err(wrap)?;
    }
    w.flush().map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(())
}

/// Maps each value to its 1-based equal-width bin over `[min, max]`.
pub fn discretize_equal_width(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(DataError::Invalid("bin count must be at least 1".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    Ok(values
        .iter()
        .map(|&v| {
            if width <= 0.0 {
                1.0
            } else {
                (((v - lo) / width).floor() as usize).min(bins - 1) as f64 + 1.0
            }
        })
        .collect())
}

pub fn load_genome(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    parse_genome(BufReader::new(file))
}

pub fn parse_genome<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (seq, label) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: line_no,
            message: "expected SEQUENCE<TAB>LABEL".into(),
        })?;
        let seq = seq.trim();
        if seq.chars().count() != GENOME_LENGTH {
            return Err(DataError::Parse {
                line: line_no,
                message: format!(
                    "sequence length {} != {GENOME_LENGTH}",
                    seq.chars().count()
                ),
            });
        }
        for (pos, c) in seq.chars().enumerate() {
            let code = NUCLEOTIDES
                .iter()
                .position(|&n| n == c.to_ascii_uppercase())
                .ok_or(DataError::Nucleotide {
                    line: line_no,
                    position: pos,
                    found: c,
                })?;
            rows.push(code as f64 + 1.0);
        }
        let y = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("label {other:?} not in {{0, 1}}"),
                })
            }
        };
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("no sequences".into()));
    }
    let x = Tensor::matrix(labels.len(), GENOME_LENGTH, rows)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(x, labels, 2)
}

pub fn write_genome<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let wrap = |e: std::io::Error| DataError::Invalid(e.to_string());
    for r in 0..ds.len() {
        let seq: String = ds
            .x()
            .row_slice(r)
            .iter()
            .map(|&v| {
                let k = v as usize;
                if v.fract() != 0.0 || !(1..=4).contains(&k) {
                    Err(DataError::Invalid(format!("row {r}: {v} is not a nucleotide code")))
                } else {
                    Ok(NUCLEOTIDES[k - 1])
                }
            })
            .collect::<Result<_>>()?;
        writeln!(w, "{seq}\t{}", ds.labels()[r]).map_err(wrap)?;
    }
    Ok(())
}
