//! FedAvg simulation with a server that records the victim's per-round
//! starting model and epoch gradient, optionally isolating the victim.

mod store;

pub use store::{Manifest, ManifestRound, StoreError, MANIFEST_FILE, MANIFEST_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::Dataset;
use crate::nnmodel::{local_epoch, MlpConfig, ModelError, ParamVector, Targets};

pub const MAX_ROUNDS: usize = 100;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("training diverged in round {round}: {source}")]
    Diverged { round: usize, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("window {window} needs {needed} rounds, store has {available}")]
    WindowTooLong {
        window: String,
        needed: usize,
        available: usize,
    },
    #[error("unknown window {0:?}")]
    UnknownWindow(String),
}

pub type Result<T> = std::result::Result<T, FedError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub participants: usize,
    /// Serve the victim its own model every round.
    pub isolate: bool,
    pub rounds: usize,
    /// Local minibatch size; 0 means a single full batch.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            participants: 1,
            isolate: true,
            rounds: MAX_ROUNDS,
            batch: 0,
            lr: 0.01,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(FedError::Config("need at least one participant".into()));
        }
        if self.rounds == 0 || self.rounds > MAX_ROUNDS {
            return Err(FedError::Config(format!(
                "rounds must be in 1..={MAX_ROUNDS}, got {}",
                self.rounds
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FedError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// The victim's state for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSnapshot {
    /// 1-based round number.
    pub round: usize,
    /// Model the victim started the round with.
    pub params: ParamVector,
    /// Epoch gradient `(w_start - w_end) / lr`, accumulated over minibatches.
    pub gradient: Vec<f64>,
}

impl GradientSnapshot {
    /// Victim model at the end of its local epoch.
    pub fn end_params(&self, lr: f64) -> ParamVector {
        let flat: Vec<f64> = self
            .params
            .flatten()
            .iter()
            .zip(&self.gradient)
            .map(|(w, g)| w - lr * g)
            .collect();
        ParamVector::from_flat(&self.params.dims(), &flat).expect("snapshot layout")
    }
}

/// Append-only record of the victim's rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotStore {
    pub model: MlpConfig,
    pub lr: f64,
    snapshots: Vec<GradientSnapshot>,
}

impl SnapshotStore {
    pub fn new(model: MlpConfig, lr: f64) -> Self {
        Self {
            model,
            lr,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, snap: GradientSnapshot) -> Result<()> {
        let expected = self.model.param_count();
        if snap.gradient.len() != expected || snap.params.len() != expected {
            return Err(FedError::Config(format!(
                "snapshot has {} entries, model has {expected}",
                snap.gradient.len()
            )));
        }
        if let Some(last) = self.snapshots.last() {
            if snap.round <= last.round {
                return Err(FedError::Config(format!(
                    "round {} not after {}",
                    snap.round, last.round
                )));
            }
        }
        self.snapshots.push(snap);
        Ok(())
    }

    pub fn snapshots(&self) -> &[GradientSnapshot] {
        &self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn round(&self, round: usize) -> Option<&GradientSnapshot> {
        self.snapshots.iter().find(|s| s.round == round)
    }

    /// Snapshots of the given rounds, in that order.
    pub fn select(&self, window: &EpochWindow) -> Vec<&GradientSnapshot> {
        window.rounds.iter().filter_map(|&r| self.round(r)).collect()
    }

    /// Store with every gradient multiplied by `c`.
    pub fn scaled(&self, c: f64) -> SnapshotStore {
        let mut out = self.clone();
        for s in &mut out.snapshots {
            for g in &mut s.gradient {
                *g *= c;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowName {
    Pre1,
    Pre2,
    Pre5,
    Gap10,
    Last5,
    /// Every recorded round.
    All,
}

impl WindowName {
    pub const STANDARD: [WindowName; 5] = [
        WindowName::Pre1,
        WindowName::Pre2,
        WindowName::Pre5,
        WindowName::Gap10,
        WindowName::Last5,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WindowName::Pre1 => "pre1",
            WindowName::Pre2 => "pre2",
            WindowName::Pre5 => "pre5",
            WindowName::Gap10 => "gap10",
            WindowName::Last5 => "last5",
            WindowName::All => "all",
        }
    }

    /// Fewest recorded rounds the window can be resolved against.
    pub fn min_rounds(self) -> usize {
        match self {
            WindowName::Pre1 | WindowName::All => 1,
            WindowName::Pre2 => 2,
            WindowName::Pre5 | WindowName::Last5 => 5,
            WindowName::Gap10 => 50,
        }
    }
}

impl std::fmt::Display for WindowName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for WindowName {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pre1" => WindowName::Pre1,
            "pre2" => WindowName::Pre2,
            "pre5" => WindowName::Pre5,
            "gap10" => WindowName::Gap10,
            "last5" => WindowName::Last5,
            "all" => WindowName::All,
            other => return Err(FedError::UnknownWindow(other.to_string())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochWindow {
    pub name: WindowName,
    /// 1-based rounds.
    pub rounds: Vec<usize>,
}

pub fn resolve_window(store: &SnapshotStore, name: WindowName) -> Result<EpochWindow> {
    let available = store.snapshots.last().map_or(0, |s| s.round);
    let rounds: Vec<usize> = match name {
        WindowName::Pre1 => vec![1],
        WindowName::Pre2 => vec![1, 2],
        WindowName::Pre5 => (1..=5).collect(),
        WindowName::Gap10 => (1..=5).map(|i| 10 * i).collect(),
        WindowName::Last5 if available >= 5 => (available - 4..=available).collect(),
        WindowName::Last5 => vec![5],
        WindowName::All => store.snapshots.iter().map(|s| s.round).collect(),
    };
    let needed = rounds.iter().copied().max().unwrap_or(1);
    if rounds.is_empty() || rounds.iter().any(|&r| store.round(r).is_none()) {
        return Err(FedError::WindowTooLong {
            window: name.to_string(),
            needed,
            available,
        });
    }
    Ok(EpochWindow { name, rounds })
}

/// Result of a recorded federation.
#[derive(Clone, Debug)]
pub struct Federation {
    pub store: SnapshotStore,
    /// Aggregate broadcast after the last round.
    pub global: ParamVector,
}

fn participant_seed(seed: u64, round: usize, participant: usize) -> u64 {
    // splitmix64 over the packed triple
    let mut z = seed
        ^ (round as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (participant as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Weighted FedAvg. Each coordinate's weighted terms are summed in sorted
/// order, so the result does not depend on participant order.
pub fn fedavg(models: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| FedError::Config("nothing to aggregate".into()))?;
    let total: usize = sizes.iter().sum();
    let flats: Vec<Vec<f64>> = models.iter().map(ParamVector::flatten).collect();
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    let mut out = Vec::with_capacity(first.len());
    let mut terms = vec![0.0; models.len()];
    for i in 0..first.len() {
        for (p, f) in flats.iter().enumerate() {
            terms[p] = weights[p] * f[i];
        }
        terms.sort_by(f64::total_cmp);
        out.push(terms[1..].iter().fold(terms[0], |a, b| a + b));
    }
    Ok(ParamVector::from_flat(&first.dims(), &out)?)
}

/// Runs `cfg.rounds` rounds of FedAvg with one local epoch per round.
pub fn run_federation(
    cfg: &FedConfig,
    model: &MlpConfig,
    participants: &[Dataset],
    victim: usize,
) -> Result<Federation> {
    cfg.validate()?;
    model.validate()?;
    if participants.len() != cfg.participants {
        return Err(FedError::Config(format!(
            "config declares {} participants, {} datasets given",
            cfg.participants,
            participants.len()
        )));
    }
    if victim >= participants.len() {
        return Err(FedError::Config(format!("victim index {victim} out of range")));
    }
    let sizes: Vec<usize> = participants.iter().map(Dataset::len).collect();
    let targets: Vec<Targets> = participants
        .iter()
        .map(|d| Targets::Hard(d.labels().to_vec()))
        .collect();
    let mut global = ParamVector::init(model)?;
    let mut victim_model = global.clone();
    let mut store = SnapshotStore::new(model.clone(), cfg.lr);
    for round in 1..=cfg.rounds {
        let outcomes = (0..participants.len())
            .into_par_iter()
            .map(|p| {
                let start = if cfg.isolate && p == victim {
                    &victim_model
                } else {
                    &global
                };
                let mut rng = ChaCha8Rng::seed_from_u64(participant_seed(cfg.seed, round, p));
                local_epoch(
                    start,
                    participants[p].x(),
                    &targets[p],
                    cfg.batch,
                    cfg.lr,
                    &mut rng,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|source| FedError::Diverged { round, source })?;
        let start = if cfg.isolate { &victim_model } else { &global };
        store.push(GradientSnapshot {
            round,
            params: start.clone(),
            gradient: outcomes[victim].gradient.clone(),
        })?;
        let updated: Vec<ParamVector> = outcomes.into_iter().map(|o| o.params).collect();
        let next = fedavg(&updated, &sizes)?;
        if !next.is_finite() {
            return Err(FedError::Diverged {
                round,
                source: ModelError::Config("non-finite aggregate".into()),
            });
        }
        if cfg.isolate {
            victim_model = updated[victim].clone();
        } else {
            victim_model = next.clone();
        }
        global = next;
    }
    Ok(Federation { store, global })
}
