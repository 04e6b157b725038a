use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig, Knowledge, Method};
use super::{HarnessError, Result};
use crate::attacks::{
    l2_matching, cos_matching, public_model_attack, random_guess, smoothed_prior, stats_attack,
    AttackConfig, AttackProblem, AttackResult, Heuristic, LabelInfo,
};
use crate::dataio::{
    load_csv, load_genome, split, synth_genome, synth_purchase_like, AttributeCodebook, DataError,
    Dataset, GenomeSpec, MaskedRecords, SplitSpec, SynthSpec,
};
use crate::fedsim::{resolve_window, run_federation, FedConfig, Federation, SnapshotStore, WindowName};
use crate::mia::{classify_membership, fit_gmm, membership_features};
use crate::nnmodel::MlpConfig;

/// One attack outcome from a single repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub repetition: usize,
    pub seed: u64,
    pub method: String,
    pub window: String,
    pub accuracy: f64,
    pub mia_accuracy: Option<f64>,
    pub gamma: Option<f64>,
    /// Records attacked (predicted members when membership is unknown).
    pub targets: usize,
    pub wall_time_secs: f64,
    pub warnings: Vec<String>,
}

/// Aggregate over repetitions for one `(experiment, method, window)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub dataset: String,
    pub method: String,
    pub window: String,
    pub victim_size: usize,
    /// 0 means one full batch.
    pub batch: usize,
    /// Hidden widths joined with `x`.
    pub hidden: String,
    pub isolate: bool,
    pub participants: usize,
    pub membership: Knowledge,
    pub prior: Knowledge,
    pub label: Knowledge,
    pub repetitions: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mia_accuracy: Option<f64>,
    pub gamma: Option<f64>,
    pub wall_time_secs: f64,
    pub seed: u64,
}

impl ResultRow {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &ResultRow) -> bool {
        let strip = |r: &ResultRow| ResultRow {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub configs: Vec<ExperimentConfig>,
    pub rows: Vec<ResultRow>,
    pub runs: Vec<RunRecord>,
}

impl ExperimentOutput {
    fn merge(parts: Vec<ExperimentOutput>) -> ExperimentOutput {
        let mut out = ExperimentOutput {
            configs: Vec::new(),
            rows: Vec::new(),
            runs: Vec::new(),
        };
        for p in parts {
            out.configs.extend(p.configs);
            out.rows.extend(p.rows);
            out.runs.extend(p.runs);
        }
        out
    }

    /// Writes `<stem>.json` (everything) and `<stem>.csv` (rows) into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let io_err = |path: &Path, e: &dyn std::fmt::Display| HarnessError::Output {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| io_err(dir, &e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(self).map_err(|e| io_err(&json, &e))?;
        fs::write(&json, text).map_err(|e| io_err(&json, &e))?;
        let csv = dir.join(format!("{stem}.csv"));
        let file = fs::File::create(&csv).map_err(|e| io_err(&csv, &e))?;
        super::write_rows_csv(&self.rows, file).map_err(|e| io_err(&csv, &e))?;
        Ok((json, csv))
    }
}

fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, AttributeCodebook)> {
    let col = spec.sensitive_column();
    let (ds, codebook) = match spec {
        DatasetSpec::Synthetic {
            n,
            attributes,
            classes,
            marginals,
            label_weights,
            label_noise,
            ..
        } => {
            let ds = synth_purchase_like(&SynthSpec {
                n: *n,
                attributes: *attributes,
                classes: *classes,
                marginals: marginals.clone(),
                label_weights: label_weights.clone(),
                label_noise: *label_noise,
                seed,
            })?;
            (ds, AttributeCodebook::binary(col))
        }
        DatasetSpec::SyntheticGenome { n, negative_ratio, .. } => {
            let ds = synth_genome(&GenomeSpec {
                n: *n,
                negative_ratio: *negative_ratio,
                seed,
            })?;
            (ds, AttributeCodebook::nucleotide(col))
        }
        DatasetSpec::Csv { path, bins, .. } => {
            let ds = load_csv(path, DatasetSpec::csv_mode(*bins))?;
            let cb = match bins {
                Some(b) => AttributeCodebook::new(col, (1..=*b).map(|v| v as f64).collect())?,
                None => AttributeCodebook::binary(col),
            };
            (ds, cb)
        }
        DatasetSpec::Genome { path, .. } => (load_genome(path)?, AttributeCodebook::nucleotide(col)),
    };
    if col >= ds.width() {
        return Err(HarnessError::Config(format!(
            "sensitive_column {col} outside the {} attributes",
            ds.width()
        )));
    }
    Ok((ds, codebook))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct Context<'a> {
    cfg: &'a ExperimentConfig,
    repetition: usize,
    seed: u64,
    mia_accuracy: Option<f64>,
}

impl Context<'_> {
    fn record(&self, window: &str, mut res: AttackResult, truth: &[usize]) -> RunRecord {
        let accuracy = if truth.is_empty() {
            res.warnings.push("no records to attack".into());
            0.0
        } else {
            res.score(truth)
        };
        RunRecord {
            experiment: self.cfg.name.clone(),
            repetition: self.repetition,
            seed: self.seed,
            method: res.method,
            window: window.to_string(),
            accuracy,
            mia_accuracy: self.mia_accuracy,
            gamma: res.gamma,
            targets: truth.len(),
            wall_time_secs: res.wall_time_secs,
            warnings: res.warnings,
        }
    }
}

/// A finished federation plus the data views the attacks draw on.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub seed: u64,
    pub codebook: AttributeCodebook,
    pub store: SnapshotStore,
    /// The victim's training records. The sensitive column is read only for
    /// scoring.
    pub victim: Dataset,
    /// Records the attacker holds in full.
    pub public: Dataset,
    /// Held-out records, never trained on.
    pub test: Dataset,
}

/// Loads the data and runs the federation for one repetition of `cfg`
/// (a single grid point).
pub fn prepare_run(cfg: &ExperimentConfig, repetition: usize) -> Result<PreparedRun> {
    let seed = cfg.seed.wrapping_add(repetition as u64);
    let (ds, codebook) = load_dataset(&cfg.dataset, seed)?;
    let victim_size = cfg.split.victim_size;
    let sp = split(
        ds.len(),
        &SplitSpec {
            public_frac: cfg.split.public_frac,
            train_frac: cfg.split.train_frac,
            victim_size,
            seed,
        },
    )?;

    let fed_cfg = &cfg.federation;
    let victim = ds.subset(&sp.victim)?;
    let mut parts = vec![victim];
    for idx in sp.other_participants(fed_cfg.participants - 1, victim_size, seed)? {
        parts.push(ds.subset(&idx)?);
    }
    let model = MlpConfig::new(ds.width(), cfg.model.hidden.clone(), ds.num_classes(), seed);
    let Federation { store, .. } = run_federation(
        &FedConfig {
            participants: fed_cfg.participants,
            isolate: fed_cfg.isolate,
            rounds: fed_cfg.rounds,
            batch: fed_cfg.batch,
            lr: fed_cfg.lr,
            seed,
        },
        &model,
        &parts,
        0,
    )?;
    Ok(PreparedRun {
        seed,
        codebook,
        store,
        victim: parts.swap_remove(0),
        public: ds.subset(&sp.public)?,
        test: ds.subset(&sp.test)?,
    })
}

fn run_repetition(cfg: &ExperimentConfig, repetition: usize) -> Result<Vec<RunRecord>> {
    run_attacks(cfg, repetition, &prepare_run(cfg, repetition)?)
}

/// Runs every attack configured in `cfg.attack` against a prepared
/// repetition.
pub fn run_attacks(cfg: &ExperimentConfig, repetition: usize, run: &PreparedRun) -> Result<Vec<RunRecord>> {
    let PreparedRun {
        seed,
        codebook,
        store,
        victim,
        public,
        test,
    } = run;
    let seed = *seed;
    let col = codebook.column();
    let k = codebook.k();
    let victim_size = victim.len();

    // Attacker-side knowledge: the public split with its attributes and labels.
    let public_truth = codebook.truth_indices(public)?;
    let public_labels: Vec<usize> = public.labels().iter().map(|y| y + 1).collect();
    let a = &cfg.attack;
    let prior = a.prior.is_known().then(|| smoothed_prior(&public_truth, k));
    let label_prior = a
        .prior
        .is_known()
        .then(|| smoothed_prior(&public_labels, public.num_classes()));

    let mut ctx = Context {
        cfg,
        repetition,
        seed,
        mia_accuracy: None,
    };
    // `None` when membership inference predicted no members.
    let targets: Option<Dataset> = if a.membership.is_known() {
        Some(victim.clone())
    } else {
        if test.len() < victim_size {
            return Err(DataError::InsufficientRows {
                needed: victim_size,
                available: test.len(),
            }
            .into());
        }
        let held_out: Vec<usize> = (0..victim_size).collect();
        let pool = Dataset::concat(&[victim, &test.subset(&held_out)?])?;
        let records = MaskedRecords::from_dataset(&pool, col)?;
        let window = resolve_window(store, a.mia_window)?;
        let features = membership_features(store, &records, pool.labels(), codebook, &window)?;
        let preds = classify_membership(&fit_gmm(&features, seed)?, &features);
        let correct = preds
            .iter()
            .enumerate()
            .filter(|(i, p)| p.member == (*i < victim_size))
            .count();
        ctx.mia_accuracy = Some(correct as f64 / preds.len() as f64);
        let members: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].member).collect();
        if members.is_empty() {
            None
        } else {
            Some(pool.subset(&members)?)
        }
    };
    let (records, truth, labels) = match &targets {
        // Ground truth is read here for scoring only.
        Some(t) => (
            MaskedRecords::from_dataset(t, col)?,
            codebook.truth_indices(t)?,
            t.labels().to_vec(),
        ),
        None => (
            MaskedRecords::from_dataset(victim, col)?.subset(&[]),
            Vec::new(),
            Vec::new(),
        ),
    };

    let attack_cfg = AttackConfig {
        gamma: a.gamma,
        gamma_grid: a.gamma_grid.clone(),
        iterations: a.iterations,
        gumbel_noise: a.gumbel_noise,
        seed,
        ..AttackConfig::default()
    };
    let label_info = if a.label.is_known() {
        LabelInfo::Known {
            labels: labels.clone(),
        }
    } else {
        LabelInfo::Unknown { prior: label_prior }
    };

    let mut out = Vec::new();
    for method in &a.methods {
        match method {
            Method::Cos | Method::L2 => {
                for &w in &a.windows {
                    let name = if *method == Method::Cos { "cos" } else { "l2" };
                    if records.is_empty() {
                        out.push(ctx.record(w.as_str(), AttackResult::new(name, Vec::new()), &truth));
                        continue;
                    }
                    let problem = AttackProblem {
                        records: &records,
                        labels: label_info.clone(),
                        codebook,
                        store,
                        window: resolve_window(store, w)?,
                        prior: prior.clone(),
                        config: attack_cfg.clone(),
                    };
                    let res = if *method == Method::Cos {
                        cos_matching(&problem)?
                    } else {
                        l2_matching(&problem)?
                    };
                    out.push(ctx.record(w.as_str(), res, &truth));
                }
            }
            Method::Stats => {
                if records.is_empty() {
                    for h in Heuristic::ALL {
                        out.push(ctx.record("all", AttackResult::new(h.name(), Vec::new()), &truth));
                    }
                    continue;
                }
                let window = resolve_window(store, WindowName::All)?;
                for res in stats_attack(store, &records, codebook, &labels, &window, &Heuristic::ALL)? {
                    out.push(ctx.record("all", res, &truth));
                }
            }
            Method::Random => {
                let start = Instant::now();
                let mut res = random_guess(k, records.len(), seed);
                res.wall_time_secs = start.elapsed().as_secs_f64();
                out.push(ctx.record("-", res, &truth));
            }
            Method::Public => {
                for &size in &a.public_sizes {
                    if size > public.len() {
                        return Err(DataError::InsufficientRows {
                            needed: size,
                            available: public.len(),
                        }
                        .into());
                    }
                    let idx: Vec<usize> = (0..size).collect();
                    let name = format!("public{size}");
                    if records.is_empty() {
                        out.push(ctx.record("-", AttackResult::new(&name, Vec::new()), &truth));
                        continue;
                    }
                    let pub_records = MaskedRecords::from_dataset(&public.subset(&idx)?, col)?;
                    let mut pm = a.public_model.clone();
                    pm.train.seed = seed;
                    let mut res = public_model_attack(
                        &pub_records,
                        &public_truth[..size],
                        k,
                        &records,
                        &pm,
                    )?;
                    res.method = name;
                    out.push(ctx.record("-", res, &truth));
                }
            }
        }
    }
    Ok(out)
}

fn hidden_label(h: &[usize]) -> String {
    h.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn aggregate(cfg: &ExperimentConfig, runs: &[RunRecord]) -> Vec<ResultRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<&RunRecord>> = HashMap::new();
    for r in runs {
        let key = (r.method.clone(), r.window.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let group = &groups[&key];
            let accs: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&accs);
            let opt_mean = |f: &dyn Fn(&RunRecord) -> Option<f64>| {
                let xs: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
                (!xs.is_empty()).then(|| mean_std(&xs).0)
            };
            ResultRow {
                experiment: cfg.name.clone(),
                dataset: cfg.dataset.label().to_string(),
                method: key.0,
                window: key.1,
                victim_size: cfg.split.victim_size,
                batch: cfg.federation.batch,
                hidden: hidden_label(&cfg.model.hidden),
                isolate: cfg.federation.isolate,
                participants: cfg.federation.participants,
                membership: cfg.attack.membership,
                prior: cfg.attack.prior,
                label: cfg.attack.label,
                repetitions: group.len(),
                accuracy_mean,
                accuracy_std,
                mia_accuracy: opt_mean(&|r| r.mia_accuracy),
                gamma: opt_mean(&|r| r.gamma),
                wall_time_secs: mean_std(&group.iter().map(|r| r.wall_time_secs).collect::<Vec<_>>()).0,
                seed: cfg.seed,
            }
        })
        .collect()
}

fn run_single(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut runs = Vec::new();
    for rep in 0..cfg.repetitions {
        runs.extend(run_repetition(cfg, rep)?);
    }
    Ok(ExperimentOutput {
        configs: vec![cfg.clone()],
        rows: aggregate(cfg, &runs),
        runs,
    })
}

/// Runs every grid point of `cfg` in order, each with `cfg.repetitions`
/// repetitions seeded `seed, seed + 1, ...`. Deterministic for a given config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let configs = cfg.expand()?;
    let parts = configs.iter().map(run_single).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentOutput::merge(parts))
}

/// Like [`run_experiment`] with grid points spread over `jobs` threads. Each
/// grid point's output is also written to `out_dir/<name>.json|csv`.
pub fn run_grid(cfg: &ExperimentConfig, jobs: usize, out_dir: &Path) -> Result<ExperimentOutput> {
    let configs = cfg.expand()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start {jobs} jobs: {e}")))?;
    let parts = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let out = run_single(c)?;
                out.write(out_dir, &c.name)?;
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentOutput::merge(parts))
}
