//! Datasets, sensitive-attribute codebooks, candidate enumeration, splits,
//! loaders and synthetic generators.

mod loaders;
mod split;
mod stats;
mod synth;

pub use loaders::{
    discretize_equal_width, load_csv, load_genome, parse_genome, read_csv, write_csv,
    write_genome, CsvMode, NUCLEOTIDES,
};
pub use split::{split, SplitSpec, Splits};
pub use stats::{attr_variance, cramers_v};
pub use synth::{synth_genome, synth_purchase_like, GenomeSpec, SynthSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, position {position}: invalid nucleotide {found:?}")]
    Nucleotide {
        line: usize,
        position: usize,
        found: char,
    },
    #[error("need {needed} rows, only {available} available")]
    InsufficientRows { needed: usize, available: usize },
    #[error("attribute {attribute}: marginal {value} outside (0, 1)")]
    InfeasibleMarginal { attribute: usize, value: f64 },
    #[error("column {column}: value {value} not in codebook")]
    NotInCodebook { column: usize, value: f64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Labelled records. Row width is `d + 1`: `d` non-sensitive attributes plus
/// the sensitive one, wherever it sits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    attribute_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if !x.is_matrix() || x.rows() == 0 {
            return Err(DataError::Invalid("dataset needs at least one row".into()));
        }
        if x.rows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} rows but {} labels",
                x.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            x,
            labels,
            num_classes,
            attribute_names: None,
        })
    }

    pub fn with_attribute_names(mut self, names: Vec<String>) -> Self {
        self.attribute_names = Some(names);
        self
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn attribute_names(&self) -> Option<&[String]> {
        self.attribute_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of attributes per row.
    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.x.at(r, i)).collect()
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let mut ds = Dataset::new(
            self.x.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )?;
        ds.attribute_names = self.attribute_names.clone();
        Ok(ds)
    }

    /// Copy with column `i` replaced by `values`.
    pub fn with_column(&self, i: usize, values: &[f64]) -> Dataset {
        let mut x = self.x.clone();
        let w = x.cols();
        for (r, &v) in values.iter().enumerate() {
            x.data_mut()[r * w + i] = v;
        }
        Dataset {
            x,
            ..self.clone()
        }
    }

    /// Concatenates the rows of several datasets with identical widths.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Invalid("nothing to concatenate".into()))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut classes = 0;
        for p in parts {
            if p.width() != first.width() {
                return Err(DataError::Invalid("width mismatch in concat".into()));
            }
            rows.extend_from_slice(p.x.data());
            labels.extend_from_slice(&p.labels);
            classes = classes.max(p.num_classes);
        }
        let x = Tensor::matrix(labels.len(), first.width(), rows)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        Dataset::new(x, labels, classes)
    }
}

/// Ordered raw values a sensitive attribute can take. Attribute indices are
/// 1-based: index `k` denotes `values[k - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCodebook {
    column: usize,
    values: Vec<f64>,
}

impl AttributeCodebook {
    /// Values must be finite, distinct and strictly increasing.
    pub fn new(column: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DataError::Invalid("empty codebook".into()));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid(format!(
                "codebook values must be finite and strictly increasing: {values:?}"
            )));
        }
        Ok(Self { column, values })
    }

    /// `{0, 1}`
    pub fn binary(column: usize) -> Self {
        Self {
            column,
            values: vec![0.0, 1.0],
        }
    }

    /// `{A, C, G, T}` encoded as `{1, 2, 3, 4}`.
    pub fn nucleotide(column: usize) -> Self {
        Self {
            column,
            values: vec![1.0, 2.0, 3.0, 4.0],
        }
    }

    /// Sorted distinct values present in the column.
    pub fn infer(ds: &Dataset, column: usize) -> Result<Self> {
        let mut vals = ds.column(column);
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        Self::new(column, vals)
    }

    pub fn column(&self) -> usize {
        self.column
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    /// Raw value for a 1-based index.
    pub fn value(&self, index: usize) -> f64 {
        self.values[index - 1]
    }

    /// 1-based index of a raw value.
    pub fn index_of(&self, raw: f64) -> Option<usize> {
        self.values.iter().position(|&v| v == raw).map(|p| p + 1)
    }

    /// 1-based ground-truth indices for the codebook column of `ds`.
    pub fn truth_indices(&self, ds: &Dataset) -> Result<Vec<usize>> {
        ds.column(self.column)
            .into_iter()
            .map(|v| {
                self.index_of(v).ok_or(DataError::NotInCodebook {
                    column: self.column,
                    value: v,
                })
            })
            .collect()
    }

    /// Linear interpolation of a real index `a` in `[1, K]` to raw space,
    /// returned as `(slope, intercept)` of the segment containing `a`.
    pub fn interpolation(&self, a: f64) -> (f64, f64) {
        let k = self.k();
        if k == 1 {
            return (0.0, self.values[0]);
        }
        let seg = (a.floor().max(1.0) as usize).min(k - 1);
        let (lo, hi) = (self.values[seg - 1], self.values[seg]);
        let slope = hi - lo;
        (slope, lo - slope * seg as f64)
    }

    pub fn to_raw(&self, a: f64) -> f64 {
        let (s, c) = self.interpolation(a);
        s * a + c
    }
}

/// Records with the sensitive column removed.
///
/// Attack code receives only this type, so it cannot observe the true
/// sensitive values.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedRecords {
    x_ns: Tensor,
    column: usize,
}

impl MaskedRecords {
    pub fn from_dataset(ds: &Dataset, column: usize) -> Result<Self> {
        Self::from_matrix(ds.x(), column)
    }

    pub fn from_matrix(x: &Tensor, column: usize) -> Result<Self> {
        let w = x.cols();
        if column >= w {
            return Err(DataError::Invalid(format!(
                "sensitive column {column} outside width {w}"
            )));
        }
        let m = x.rows();
        let mut data = Vec::with_capacity(m * (w - 1));
        for r in 0..m {
            let row = x.row_slice(r);
            data.extend_from_slice(&row[..column]);
            data.extend_from_slice(&row[column + 1..]);
        }
        let x_ns = Tensor::matrix(m, w - 1, data).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Self { x_ns, column })
    }

    pub fn len(&self) -> usize {
        self.x_ns.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self) -> usize {
        self.column
    }

    /// Full record width including the sensitive column.
    pub fn width(&self) -> usize {
        self.x_ns.cols() + 1
    }

    /// Non-sensitive attributes before the sensitive column `[N x i]`.
    pub fn left(&self) -> Tensor {
        self.x_ns.slice_cols(0, self.column)
    }

    /// Non-sensitive attributes after the sensitive column.
    pub fn right(&self) -> Tensor {
        self.x_ns.slice_cols(self.column, self.x_ns.cols() - self.column)
    }

    pub fn non_sensitive(&self) -> &Tensor {
        &self.x_ns
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.x_ns.row_slice(r)
    }

    pub fn subset(&self, idx: &[usize]) -> MaskedRecords {
        MaskedRecords {
            x_ns: self.x_ns.select_rows(idx),
            column: self.column,
        }
    }

    /// Reinserts a sensitive column of raw values.
    pub fn fill(&self, raw: &[f64]) -> Tensor {
        let (m, w) = (self.len(), self.width());
        let mut data = Vec::with_capacity(m * w);
        for (r, &v) in raw.iter().enumerate().take(m) {
            let row = self.row(r);
            data.extend_from_slice(&row[..self.column]);
            data.push(v);
            data.extend_from_slice(&row[self.column..]);
        }
        Tensor::matrix(m, w, data).expect("fill shape")
    }

    pub fn candidates(&self, r: usize, codebook: &AttributeCodebook) -> CandidateSet {
        enumerate_candidates(self.row(r), codebook)
    }
}

/// The `K` completions of one masked record.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// `[K x (d + 1)]`, row `k` carries codebook index `k + 1`.
    pub rows: Tensor,
    pub column: usize,
}

impl CandidateSet {
    pub fn k(&self) -> usize {
        self.rows.rows()
    }

    /// Candidate for a 1-based attribute index.
    pub fn select(&self, index: usize) -> &[f64] {
        self.rows.row_slice(index - 1)
    }
}

/// Substitutes every codebook value into the masked record.
pub fn enumerate_candidates(masked_row: &[f64], codebook: &AttributeCodebook) -> CandidateSet {
    let column = codebook.column();
    let w = masked_row.len() + 1;
    let mut data = Vec::with_capacity(codebook.k() * w);
    for &v in codebook.values() {
        data.extend_from_slice(&masked_row[..column]);
        data.push(v);
        data.extend_from_slice(&masked_row[column..]);
    }
    CandidateSet {
        rows: Tensor::matrix(codebook.k(), w, data).expect("candidate shape"),
        column,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ds() -> Dataset {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        Dataset::new(x, vec![0, 1, 0], 2).unwrap()
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 2]);
        assert!(Dataset::new(x.clone(), vec![0, 2], 2).is_err());
        assert!(Dataset::new(x, vec![0], 2).is_err());
        assert!(Dataset::new(Tensor::zeros(&[0, 2]), vec![], 2).is_err());
    }

    #[test]
    fn binary_candidates() {
        let m = MaskedRecords::from_dataset(&ds(), 1).unwrap();
        let c = m.candidates(0, &AttributeCodebook::binary(1));
        assert_eq!(c.k(), 2);
        assert_eq!(c.select(1), &[1.0, 0.0, 1.0]);
        assert_eq!(c.select(2), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn genome_candidates() {
        let c = enumerate_candidates(&[1.0, 2.0], &AttributeCodebook::nucleotide(0));
        assert_eq!(c.k(), 4);
        for k in 1..=4 {
            assert_eq!(c.select(k), &[k as f64, 1.0, 2.0]);
        }
    }

    #[test]
    fn masked_fill_restores_dataset() {
        let d = ds();
        let m = MaskedRecords::from_dataset(&d, 2).unwrap();
        assert_eq!(m.fill(&d.column(2)), *d.x());
        assert_eq!(m.left().cols() + m.right().cols(), 2);
    }

    #[test]
    fn codebook_rules() {
        assert!(AttributeCodebook::new(0, vec![1.0, 1.0]).is_err());
        let cb = AttributeCodebook::infer(&ds(), 0).unwrap();
        assert_eq!(cb.values(), &[0.0, 1.0]);
        assert_eq!(cb.truth_indices(&ds()).unwrap(), vec![2, 1, 2]);
        let nb = AttributeCodebook::new(0, vec![0.0, 1.0, 5.0]).unwrap();
        assert_eq!(nb.to_raw(1.0), 0.0);
        assert_eq!(nb.to_raw(1.5), 0.5);
        assert_eq!(nb.to_raw(2.5), 3.0);
        assert_eq!(nb.to_raw(3.0), 5.0);
    }

    proptest! {
        #[test]
        fn selecting_truth_reproduces_record(
            row in proptest::collection::vec(0u8..4, 5),
            column in 0usize..5,
        ) {
            let row: Vec<f64> = row.into_iter().map(|v| f64::from(v) + 1.0).collect();
            let x = Tensor::row(&row);
            let d = Dataset::new(x, vec![0], 1).unwrap();
            let cb = AttributeCodebook::nucleotide(column);
            let m = MaskedRecords::from_dataset(&d, column).unwrap();
            let c = m.candidates(0, &cb);
            let truth = cb.truth_indices(&d).unwrap()[0];
            prop_assert_eq!(c.select(truth), &row[..]);
            for k in 1..=4 {
                for j in (0..5).filter(|&j| j != column) {
                    prop_assert_eq!(c.select(k)[j], row[j]);
                }
            }
        }
    }
}
