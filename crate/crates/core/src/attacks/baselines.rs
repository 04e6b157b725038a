use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttackError, AttackResult, Result};
use crate::dataio::MaskedRecords;
use crate::nnmodel::{
    infer, predict, train, MlpConfig, ParamVector, TrainConfig, TrainOptimizer,
};

/// Uniform guesses in `1..=k`.
pub fn random_guess(k: usize, n: usize, seed: u64) -> AttackResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7a);
    let preds = (0..n).map(|_| rng.random_range(1..=k)).collect();
    let mut res = AttackResult::new("random", preds);
    res.config = serde_json::json!({ "k": k, "seed": seed });
    res
}

/// Attribute frequencies with add-one smoothing, from 1-based indices.
pub fn smoothed_prior(indices: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![1.0; k];
    for &i in indices {
        counts[i - 1] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicModelConfig {
    pub hidden_dims: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for PublicModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            train: TrainConfig {
                epochs: 300,
                batch: 0,
                lr: 0.01,
                optimizer: TrainOptimizer::Adam,
                seed: 0,
            },
        }
    }
}

/// Trains a classifier from non-sensitive attributes to the attribute index
/// on the public split and applies it to the targets.
pub fn public_model_attack(
    public: &MaskedRecords,
    public_truth: &[usize],
    k: usize,
    targets: &MaskedRecords,
    cfg: &PublicModelConfig,
) -> Result<AttackResult> {
    let start = Instant::now();
    if public.is_empty() {
        return Err(AttackError::Problem("public set is empty".into()));
    }
    if public_truth.len() != public.len() {
        return Err(AttackError::Problem(format!(
            "public set has {} rows but {} attribute values",
            public.len(),
            public_truth.len()
        )));
    }
    if let Some(bad) = public_truth.iter().find(|&&i| i == 0 || i > k) {
        return Err(AttackError::Problem(format!("attribute index {bad} outside 1..={k}")));
    }
    if public.width() != targets.width() {
        return Err(AttackError::Problem("public and target widths differ".into()));
    }
    let x = public.non_sensitive();
    let mcfg = MlpConfig::new(x.cols(), cfg.hidden_dims.clone(), k, cfg.train.seed);
    let init = ParamVector::init(&mcfg)?;
    let labels: Vec<usize> = public_truth.iter().map(|i| i - 1).collect();
    let model = train(&init, x, &labels, &cfg.train)?;
    let preds = predict(&model, targets.non_sensitive())?;
    let probs = infer(&model, targets.non_sensitive())?.probs;
    let mut res = AttackResult::new("public", preds.into_iter().map(|p| p + 1).collect());
    res.soft = (0..probs.rows()).map(|r| probs.row_slice(r).to_vec()).collect();
    res.config = serde_json::json!({ "public_size": public.len(), "model": cfg });
    res.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_seeded_and_in_range() {
        let a = random_guess(4, 100, 9);
        assert_eq!(a.predictions, random_guess(4, 100, 9).predictions);
        assert!(a.predictions.iter().all(|&p| (1..=4).contains(&p)));
    }

    #[test]
    fn prior_smoothing() {
        assert_eq!(smoothed_prior(&[1, 1, 2], 2), vec![0.6, 0.4]);
        assert_eq!(smoothed_prior(&[], 4), vec![0.25; 4]);
    }
}
