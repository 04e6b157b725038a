//! Experiment configuration, read from TOML.
//!
//! ```toml
//! version = 1
//! name = "planted"
//! seed = 0
//! repetitions = 3
//!
//! [dataset]
//! kind = "synthetic"          # synthetic | synthetic-genome | csv | genome
//! n = 2000
//! attributes = 16
//! classes = 2
//! sensitive_column = 0
//!
//! [split]
//! victim_size = 50
//!
//! [model]
//! hidden = [128]
//!
//! [federation]
//! participants = 1
//! isolate = true
//! rounds = 100
//! batch = 0                   # 0 = the victim's whole data
//!
//! [attack]
//! methods = ["cos", "l2", "stats", "random", "public"]
//! windows = ["pre1", "pre2", "pre5", "gap10", "last5"]
//! membership = "known"
//! prior = "known"
//! label = "known"
//!
//! [grid]                      # optional sweeps, cartesian product
//! batch = [8, 32, 0]
//! ```

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::PublicModelConfig;
use crate::dataio::{CsvMode, SplitSpec};
use crate::fedsim::{WindowName, MAX_ROUNDS};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knowledge {
    Known,
    Unknown,
}

impl Knowledge {
    pub fn is_known(self) -> bool {
        self == Knowledge::Known
    }
}

impl std::fmt::Display for Knowledge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Knowledge::Known => "known",
            Knowledge::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cos,
    L2,
    Stats,
    Random,
    Public,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default = "default_attributes")]
        attributes: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_marginals")]
        marginals: Vec<f64>,
        #[serde(default = "default_weights")]
        label_weights: Vec<f64>,
        #[serde(default = "default_noise")]
        label_noise: f64,
        #[serde(default)]
        sensitive_column: usize,
    },
    SyntheticGenome {
        #[serde(default = "default_genome_n")]
        n: usize,
        #[serde(default = "default_ratio")]
        negative_ratio: usize,
        #[serde(default)]
        sensitive_column: usize,
    },
    Csv {
        path: PathBuf,
        /// Equal-width bins for numeric attributes; binary data when absent.
        #[serde(default)]
        bins: Option<usize>,
        #[serde(default)]
        sensitive_column: usize,
    },
    Genome {
        path: PathBuf,
        #[serde(default)]
        sensitive_column: usize,
    },
}

fn default_n() -> usize {
    2000
}
fn default_attributes() -> usize {
    16
}
fn default_classes() -> usize {
    2
}
fn default_marginals() -> Vec<f64> {
    vec![0.5]
}
fn default_weights() -> Vec<f64> {
    vec![1.0]
}
fn default_noise() -> f64 {
    0.5
}
fn default_genome_n() -> usize {
    2200
}
fn default_ratio() -> usize {
    10
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n: default_n(),
            attributes: default_attributes(),
            classes: default_classes(),
            marginals: default_marginals(),
            label_weights: default_weights(),
            label_noise: default_noise(),
            sensitive_column: 0,
        }
    }
}

impl DatasetSpec {
    pub fn sensitive_column(&self) -> usize {
        match self {
            DatasetSpec::Synthetic {
                sensitive_column, ..
            }
            | DatasetSpec::SyntheticGenome {
                sensitive_column, ..
            }
            | DatasetSpec::Csv {
                sensitive_column, ..
            }
            | DatasetSpec::Genome {
                sensitive_column, ..
            } => *sensitive_column,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DatasetSpec::Synthetic { .. } => "synthetic",
            DatasetSpec::SyntheticGenome { .. } => "synthetic-genome",
            DatasetSpec::Csv { .. } => "csv",
            DatasetSpec::Genome { .. } => "genome",
        }
    }

    pub fn csv_mode(bins: Option<usize>) -> CsvMode {
        match bins {
            Some(bins) => CsvMode::Numeric { bins },
            None => CsvMode::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub public_frac: f64,
    pub train_frac: f64,
    pub victim_size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            public_frac: s.public_frac,
            train_frac: s.train_frac,
            victim_size: s.victim_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub participants: usize,
    pub isolate: bool,
    pub rounds: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            participants: 1,
            isolate: true,
            rounds: MAX_ROUNDS,
            batch: 0,
            lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub methods: Vec<Method>,
    pub windows: Vec<WindowName>,
    pub membership: Knowledge,
    pub prior: Knowledge,
    pub label: Knowledge,
    pub gamma: f64,
    /// Temperatures to search; the run with the best objective is kept.
    pub gamma_grid: Option<Vec<f64>>,
    pub iterations: usize,
    pub gumbel_noise: bool,
    /// Rounds used for membership features.
    pub mia_window: WindowName,
    /// Public-set sizes for the public-model baseline.
    pub public_sizes: Vec<usize>,
    pub public_model: PublicModelConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Cos, Method::Random],
            windows: vec![WindowName::Pre5],
            membership: Knowledge::Known,
            prior: Knowledge::Known,
            label: Knowledge::Known,
            gamma: 1.0,
            gamma_grid: None,
            iterations: 2000,
            gumbel_noise: false,
            mia_window: WindowName::All,
            public_sizes: vec![100],
            public_model: PublicModelConfig::default(),
        }
    }
}

/// Axes swept by [`ExperimentConfig::expand`]. Empty lists leave the base
/// value in place.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub batch: Vec<usize>,
    pub victim_size: Vec<usize>,
    pub hidden: Vec<Vec<usize>>,
    pub isolate: Vec<bool>,
    pub participants: Vec<usize>,
    pub membership: Vec<Knowledge>,
    pub prior: Vec<Knowledge>,
    pub label: Vec<Knowledge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default, skip_serializing_if = "grid_is_empty")]
    pub grid: GridSection,
}

fn grid_is_empty(g: &GridSection) -> bool {
    *g == GridSection::default()
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_name() -> String {
    "experiment".into()
}
fn default_repetitions() -> usize {
    3
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            name: default_name(),
            seed: 0,
            repetitions: default_repetitions(),
            dataset: DatasetSpec::default(),
            split: SplitConfig::default(),
            model: ModelSection::default(),
            federation: FederationSection::default(),
            attack: AttackSection::default(),
            grid: GridSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every flag combination before any compute.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.repetitions == 0 {
            return Err(config_err("repetitions must be at least 1"));
        }
        let a = &self.attack;
        if a.methods.is_empty() {
            return Err(config_err("no attack methods selected"));
        }
        if a.methods.contains(&Method::Stats) && !a.label.is_known() {
            return Err(config_err(
                "the stats attack requires the true label to be known (label = \"known\")",
            ));
        }
        let matching = a.methods.iter().any(|m| matches!(m, Method::Cos | Method::L2));
        if matching && a.windows.is_empty() {
            return Err(config_err("matching attacks need at least one window"));
        }
        if !a.membership.is_known() && !a.label.is_known() {
            return Err(config_err(
                "membership inference needs the labels of the candidate pool (label = \"known\")",
            ));
        }
        if !(a.gamma > 0.0) || a.gamma_grid.iter().flatten().any(|g| !(*g > 0.0)) {
            return Err(config_err("temperatures must be positive"));
        }
        if a.iterations == 0 {
            return Err(config_err("iterations must be at least 1"));
        }
        let f = &self.federation;
        if f.rounds == 0 || f.rounds > MAX_ROUNDS {
            return Err(config_err(format!("rounds must be in 1..={MAX_ROUNDS}")));
        }
        if matching || a.methods.contains(&Method::Stats) || !a.membership.is_known() {
            let mut windows = a.windows.clone();
            windows.push(a.mia_window);
            if let Some(w) = windows.iter().find(|w| w.min_rounds() > f.rounds) {
                return Err(config_err(format!(
                    "window {w} needs at least {} rounds, federation runs {}",
                    w.min_rounds(),
                    f.rounds
                )));
            }
        }
        if f.participants == 0 {
            return Err(config_err("participants must be at least 1"));
        }
        if !(f.lr > 0.0) {
            return Err(config_err("learning rate must be positive"));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("hidden layer sizes must be positive"));
        }
        if self.split.victim_size == 0 {
            return Err(config_err("victim_size must be at least 1"));
        }
        if let DatasetSpec::Synthetic { attributes, sensitive_column, .. } = &self.dataset {
            if sensitive_column >= attributes {
                return Err(config_err("sensitive_column outside the attribute range"));
            }
        }
        if let DatasetSpec::SyntheticGenome { sensitive_column, .. } = &self.dataset {
            if *sensitive_column >= 20 {
                return Err(config_err("sensitive_column outside the sequence"));
            }
        }
        let g = &self.grid;
        if g.hidden.iter().any(|h| h.contains(&0)) || g.victim_size.contains(&0) {
            return Err(config_err("grid values must be positive"));
        }
        if g.participants.contains(&0) {
            return Err(config_err("grid participants must be positive"));
        }
        if g.label.contains(&Knowledge::Unknown) && a.methods.contains(&Method::Stats) {
            return Err(config_err(
                "the stats attack requires the true label to be known (label = \"known\")",
            ));
        }
        Ok(())
    }

    /// Cartesian product of the grid axes, grid removed. The base config is
    /// returned alone when no axis is set.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>, HarnessError> {
        self.validate()?;
        let mut base = self.clone();
        base.grid = GridSection::default();
        let mut out = vec![base];
        let g = &self.grid;
        fn sweep<T: Clone + std::fmt::Debug>(
            out: Vec<ExperimentConfig>,
            values: &[T],
            tag: &str,
            set: impl Fn(&mut ExperimentConfig, &T),
        ) -> Vec<ExperimentConfig> {
            if values.is_empty() {
                return out;
            }
            out.into_iter()
                .flat_map(|c| {
                    values
                        .iter()
                        .map(|v| {
                            let mut c = c.clone();
                            set(&mut c, v);
                            c.name = format!("{}_{tag}{:?}", c.name, v)
                                .replace([' ', '[', ']', ','], "");
                            c
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
        out = sweep(out, &g.batch, "b", |c, v| c.federation.batch = *v);
        out = sweep(out, &g.victim_size, "dv", |c, v| c.split.victim_size = *v);
        out = sweep(out, &g.hidden, "h", |c, v| c.model.hidden = v.clone());
        out = sweep(out, &g.isolate, "iso", |c, v| c.federation.isolate = *v);
        out = sweep(out, &g.participants, "p", |c, v| c.federation.participants = *v);
        out = sweep(out, &g.membership, "mem", |c, v| c.attack.membership = *v);
        out = sweep(out, &g.prior, "prior", |c, v| c.attack.prior = *v);
        out = sweep(out, &g.label, "label", |c, v| c.attack.label = *v);
        for c in &out {
            c.validate()?;
        }
        Ok(out)
    }
}
