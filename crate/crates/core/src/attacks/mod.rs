//! Attribute reconstruction attacks against a recorded victim.
//!
//! Every attack receives the victim's records as [`MaskedRecords`], which do
//! not contain the sensitive column. Ground truth only enters through
//! [`AttackResult::score`].
//!
//! Attribute indices are 1-based throughout (`1..=K`), matching
//! [`AttributeCodebook`].

mod baselines;
mod matching;
mod stats;

pub use baselines::{public_model_attack, random_guess, smoothed_prior, PublicModelConfig};
pub use matching::{
    cos_matching, l2_matching, matching_objective, relax_attribute, run_matching,
    virtual_gradient, virtual_input, MatchingObjective, ObjectiveValue,
};
pub use stats::{
    decide, last_layer_grad_norms, majority_vote, stats_attack, statistic_matrices, Heuristic,
    RecordStatistics, StatisticKind,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::dataio::{AttributeCodebook, DataError, MaskedRecords};
use crate::fedsim::{EpochWindow, FedError, SnapshotStore};
use crate::nnmodel::{AdamConfig, ModelError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error("objective became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid attack problem: {0}")]
    Problem(String),
    #[error("round {0} missing from the snapshot store")]
    MissingCheckpoint(usize),
}

impl From<AutodiffError> for AttackError {
    fn from(e: AutodiffError) -> Self {
        AttackError::Model(ModelError::Autodiff(e))
    }
}

impl From<crate::nnmodel::OptimError> for AttackError {
    fn from(e: crate::nnmodel::OptimError) -> Self {
        AttackError::Model(ModelError::Optim(e))
    }
}

pub type Result<T> = std::result::Result<T, AttackError>;

/// What the attacker knows about the victim's labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LabelInfo {
    Known { labels: Vec<usize> },
    /// Labels are optimized jointly; initialized from `prior` when given.
    Unknown { prior: Option<Vec<f64>> },
}

impl LabelInfo {
    pub fn known(&self) -> Option<&[usize]> {
        match self {
            LabelInfo::Known { labels } => Some(labels),
            LabelInfo::Unknown { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Softmax temperature.
    pub gamma: f64,
    /// When set, one run per temperature; the run with the best objective wins.
    pub gamma_grid: Option<Vec<f64>>,
    pub iterations: usize,
    /// Stop once the best objective improved by less than `tolerance` over
    /// the last `patience` iterations.
    pub patience: usize,
    pub tolerance: f64,
    pub adam: AdamConfig,
    /// Add Gumbel noise to the logits before the tempered softmax.
    pub gumbel_noise: bool,
    /// Keep one trace entry every this many iterations.
    pub trace_every: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            gamma_grid: None,
            iterations: 2000,
            patience: 50,
            tolerance: 1e-7,
            adam: AdamConfig::default(),
            gumbel_noise: false,
            trace_every: 10,
            seed: 0,
        }
    }
}

pub const DEFAULT_GAMMA_GRID: [f64; 4] = [0.1, 0.5, 1.0, 5.0];

/// Inputs of a gradient-matching attack.
#[derive(Clone, Debug)]
pub struct AttackProblem<'a> {
    pub records: &'a MaskedRecords,
    pub labels: LabelInfo,
    pub codebook: &'a AttributeCodebook,
    pub store: &'a SnapshotStore,
    pub window: EpochWindow,
    /// Attribute prior over the `K` codebook entries.
    pub prior: Option<Vec<f64>>,
    pub config: AttackConfig,
}

impl AttackProblem<'_> {
    pub fn validate(&self) -> Result<()> {
        let n = self.records.len();
        let k = self.codebook.k();
        if self.window.rounds.is_empty() {
            return Err(AttackError::Problem("empty epoch window".into()));
        }
        for &r in &self.window.rounds {
            if self.store.round(r).is_none() {
                return Err(AttackError::MissingCheckpoint(r));
            }
        }
        if self.records.column() != self.codebook.column() {
            return Err(AttackError::Problem(format!(
                "records mask column {}, codebook describes column {}",
                self.records.column(),
                self.codebook.column()
            )));
        }
        if self.records.width() != self.store.model.input_dim {
            return Err(AttackError::Problem(format!(
                "record width {} != model input {}",
                self.records.width(),
                self.store.model.input_dim
            )));
        }
        if let LabelInfo::Known { labels } = &self.labels {
            if labels.len() != n {
                return Err(AttackError::Problem(format!(
                    "{} labels for {n} records",
                    labels.len()
                )));
            }
        }
        let classes = self.store.model.num_classes;
        if let LabelInfo::Unknown { prior: Some(p) } = &self.labels {
            check_distribution(p, classes, "label prior")?;
        }
        if let Some(p) = &self.prior {
            check_distribution(p, k, "attribute prior")?;
        }
        let gammas = self.gammas();
        if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(AttackError::Problem(format!("temperatures must be positive: {gammas:?}")));
        }
        Ok(())
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.config
            .gamma_grid
            .clone()
            .unwrap_or_else(|| vec![self.config.gamma])
    }
}

fn check_distribution(p: &[f64], k: usize, what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.len() != k || p.iter().any(|v| !(*v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(AttackError::Problem(format!(
            "{what} must be {k} positive entries summing to 1, got {p:?}"
        )));
    }
    Ok(())
}

/// Serialized outcome of one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: String,
    pub config: serde_json::Value,
    /// 1-based predicted attribute index per record.
    pub predictions: Vec<usize>,
    /// Per-record distribution over the `K` indices, when the method has one.
    pub soft: Vec<Vec<f64>>,
    /// Best objective reached, for optimizing attacks.
    pub objective: Option<f64>,
    pub gamma: Option<f64>,
    pub iterations: usize,
    /// `(iteration, objective)` pairs, decimated.
    pub trace: Vec<(usize, f64)>,
    pub accuracy: Option<f64>,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
}

impl AttackResult {
    pub fn new(method: &str, predictions: Vec<usize>) -> Self {
        Self {
            method: method.to_string(),
            config: serde_json::Value::Null,
            predictions,
            soft: Vec::new(),
            objective: None,
            gamma: None,
            iterations: 0,
            trace: Vec::new(),
            accuracy: None,
            wall_time_secs: 0.0,
            warnings: Vec::new(),
        }
    }

    /// Fills in `accuracy` against 1-based ground-truth indices.
    pub fn score(&mut self, truth: &[usize]) -> f64 {
        let acc = crate::nnmodel::accuracy(&self.predictions, truth);
        self.accuracy = Some(acc);
        acc
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &AttackResult) -> bool {
        let strip = |r: &AttackResult| AttackResult {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}
