//! Synthetic generators standing in for the binary purchase-style and
//! splice-site genome corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::autodiff::Tensor;

/// Binary attributes with exact per-attribute marginals and a label driven
/// by a weighted score over the attributes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    /// Attributes per record, sensitive one included.
    pub attributes: usize,
    pub classes: usize,
    /// `P(x_j = 1)` per attribute. A single entry applies to all attributes.
    pub marginals: Vec<f64>,
    /// Label influence per attribute. A single entry applies to all.
    pub label_weights: Vec<f64>,
    /// Std of the Gaussian noise added to each class score.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            attributes: 16,
            classes: 2,
            marginals: vec![0.5],
            label_weights: vec![1.0],
            label_noise: 0.5,
            seed: 0,
        }
    }
}

fn per_attribute(v: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; d]),
        n if n == d => Ok(v.to_vec()),
        n => Err(DataError::Invalid(format!(
            "{what}: {n} entries for {d} attributes"
        ))),
    }
}

pub fn synth_purchase_like(spec: &SynthSpec) -> Result<Dataset> {
    let d = spec.attributes;
    if d < 2 || spec.classes < 2 || spec.n == 0 {
        return Err(DataError::Invalid(format!(
            "need n >= 1, at least 2 attributes and 2 classes (n={}, d={d}, C={})",
            spec.n, spec.classes
        )));
    }
    let marginals = per_attribute(&spec.marginals, d, "marginals")?;
    if let Some((j, &p)) = marginals
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > 0.0 && p < 1.0))
    {
        return Err(DataError::InfeasibleMarginal {
            attribute: j,
            value: p,
        });
    }
    let weights = per_attribute(&spec.label_weights, d, "label weights")?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;

    // Each column gets exactly round(p n) ones at independently permuted rows.
    let mut x = vec![0.0; n * d];
    let mut perm: Vec<usize> = (0..n).collect();
    for (j, &p) in marginals.iter().enumerate() {
        perm.shuffle(&mut rng);
        let ones = (p * n as f64).round() as usize;
        for &r in &perm[..ones] {
            x[r * d + j] = 1.0;
        }
    }

    // Class prototypes of random signs; with two classes they are opposite.
    let c = spec.classes;
    let mut proto = vec![0.0; c * d];
    for j in 0..d {
        for k in 0..c {
            proto[k * d + j] = if c == 2 && k == 1 {
                -proto[j]
            } else if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            };
        }
    }
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..c {
            let mut s = 0.0;
            for j in 0..d {
                s += weights[j] * proto[k * d + j] * (x[r * d + j] - marginals[j]);
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            s += spec.label_noise * z;
            if s > best.0 {
                best = (s, k);
            }
        }
        labels.push(best.1);
    }
    let x = Tensor::matrix(n, d, x).map_err(|e| DataError::Invalid(e.to_string()))?;
    let names = (0..d).map(|j| format!("a{j}")).collect();
    Ok(Dataset::new(x, labels, c)?.with_attribute_names(names))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeSpec {
    pub n: usize,
    /// Negatives per positive.
    pub negative_ratio: usize,
    pub seed: u64,
}

impl Default for GenomeSpec {
    fn default() -> Self {
        Self {
            n: 1100,
            negative_ratio: 10,
            seed: 0,
        }
    }
}

/// Length-20 sequences encoded `1..=4`. Positives carry a `GT` donor motif at
/// positions 10-11 and a purine bias right before it; negatives are uniform.
pub fn synth_genome(spec: &GenomeSpec) -> Result<Dataset> {
    if spec.n < 2 {
        return Err(DataError::Invalid("genome generator needs n >= 2".into()));
    }
    let len = super::loaders::GENOME_LENGTH;
    let n_pos = ((spec.n as f64) / (spec.negative_ratio as f64 + 1.0)).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let mut x = vec![0.0; spec.n * len];
    let mut labels = vec![0; spec.n];
    for (slot, &r) in order.iter().enumerate() {
        let positive = slot < n_pos;
        labels[r] = usize::from(positive);
        for p in 0..len {
            let mut code = rng.random_range(1..=4u8);
            if positive {
                match p {
                    10 => code = 3,
                    11 => code = 4,
                    9 if rng.random::<f64>() < 0.7 => code = if rng.random() { 1 } else { 3 },
                    _ => {}
                }
            }
            x[r * len + p] = f64::from(code);
        }
    }
    let x = Tensor::matrix(spec.n, len, x).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(x, labels, 2)
}
