use std::collections::BTreeMap;

use super::Dataset;

/// Population variance of column `i`.
pub fn attr_variance(ds: &Dataset, i: usize) -> f64 {
    let col = ds.column(i);
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Cramer's V between column `i` (as categories) and the label. Zero when
/// either variable takes a single value.
pub fn cramers_v(ds: &Dataset, i: usize) -> f64 {
    let col = ds.column(i);
    let mut rows: BTreeMap<u64, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&v, &y) in col.iter().zip(ds.labels()) {
        let next = rows.len();
        rows.entry(v.to_bits()).or_insert(next);
        let next = cols.len();
        cols.entry(y).or_insert(next);
    }
    let (r, c) = (rows.len(), cols.len());
    if r < 2 || c < 2 {
        return 0.0;
    }
    let mut table = vec![0.0; r * c];
    for (&v, y) in col.iter().zip(ds.labels()) {
        table[rows[&v.to_bits()] * c + cols[y]] += 1.0;
    }
    let n = col.len() as f64;
    let row_tot: Vec<f64> = (0..r).map(|a| (0..c).map(|b| table[a * c + b]).sum()).collect();
    let col_tot: Vec<f64> = (0..c).map(|b| (0..r).map(|a| table[a * c + b]).sum()).collect();
    let mut chi2 = 0.0;
    for a in 0..r {
        for b in 0..c {
            let e = row_tot[a] * col_tot[b] / n;
            chi2 += (table[a * c + b] - e).powi(2) / e;
        }
    }
    let v = (chi2 / (n * (r.min(c) - 1) as f64)).sqrt();
    v.clamp(0.0, 1.0)
}
