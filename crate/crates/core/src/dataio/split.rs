use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub public_frac: f64,
    /// Fraction of the non-public rows used for training; the rest is test.
    pub train_frac: f64,
    pub victim_size: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            public_frac: 0.10,
            train_frac: 0.8,
            victim_size: 50,
            seed: 0,
        }
    }
}

/// Disjoint row-index sets. `victim` is a prefix of `train`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub public: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub victim: Vec<usize>,
}

impl Splits {
    /// Training rows outside the victim's data.
    pub fn train_pool(&self) -> &[usize] {
        &self.train[self.victim.len()..]
    }

    /// `count` disjoint groups of `size` rows drawn from the non-victim
    /// training pool.
    pub fn other_participants(&self, count: usize, size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let pool = self.train_pool();
        let needed = count * size;
        if needed > pool.len() {
            return Err(DataError::InsufficientRows {
                needed,
                available: pool.len(),
            });
        }
        let mut pool = pool.to_vec();
        pool.shuffle(&mut seeded_stream(seed, PARTICIPANT_STREAM));
        Ok(pool.chunks(size.max(1)).take(count).map(<[usize]>::to_vec).collect())
    }
}

// Generators share the experiment seed, so index shuffles draw from their
// own streams to stay uncorrelated with the data.
const SPLIT_STREAM: u64 = 0x51;
const PARTICIPANT_STREAM: u64 = 0x52;

fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn split(n: usize, spec: &SplitSpec) -> Result<Splits> {
    if !(0.0..1.0).contains(&spec.public_frac) || !(0.0..=1.0).contains(&spec.train_frac) {
        return Err(DataError::Invalid(format!(
            "split fractions out of range: public {} train {}",
            spec.public_frac, spec.train_frac
        )));
    }
    let n_public = (spec.public_frac * n as f64).round() as usize;
    let rest = n - n_public;
    let n_train = (spec.train_frac * rest as f64).round() as usize;
    if spec.victim_size > n_train || spec.victim_size == 0 {
        return Err(DataError::InsufficientRows {
            needed: spec.victim_size.max(1),
            available: n_train,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_stream(spec.seed, SPLIT_STREAM));
    let public = idx[..n_public].to_vec();
    let train = idx[n_public..n_public + n_train].to_vec();
    let test = idx[n_public + n_train..].to_vec();
    let victim = train[..spec.victim_size].to_vec();
    Ok(Splits {
        public,
        train,
        test,
        victim,
    })
}
