//! Membership inference from last-layer gradient variance, followed by
//! attribute reconstruction on the predicted members.
//!
//! For each record the `K` candidates are pushed through the victim's
//! recorded models; the per-record feature is the variance over candidates of
//! the last-layer weight-gradient norm, averaged over epochs. A two-component
//! 1-D Gaussian mixture is fitted to the features and the smaller-mean
//! component is taken as the members.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{
    cos_matching, last_layer_grad_norms, AttackConfig, AttackError, AttackProblem, AttackResult,
    LabelInfo,
};
use crate::autodiff::Tensor;
use crate::dataio::{AttributeCodebook, MaskedRecords};
use crate::fedsim::{EpochWindow, SnapshotStore};

pub const VARIANCE_FLOOR: f64 = 1e-9;
pub const MAX_EM_ITERATIONS: usize = 500;
pub const EM_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("need at least 4 features, got {0}")]
    TooFewPoints(usize),
    #[error("all features are identical; no mixture to fit")]
    Degenerate,
    #[error("empty epoch window")]
    EmptyWindow,
    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, MiaError>;

/// Mixture parameters, component order as produced by the fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
}

impl GmmParams {
    /// Index of the member component (smaller mean; first on a tie).
    pub fn member_component(&self) -> usize {
        usize::from(self.means[1] < self.means[0])
    }

    fn log_joint(&self, x: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for c in 0..2 {
            let v = self.variances[c];
            out[c] = self.weights[c].ln()
                - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
                - (x - self.means[c]).powi(2) / (2.0 * v);
        }
        out
    }

    /// Posterior of each component for `x`.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let lj = self.log_joint(x);
        let m = lj[0].max(lj[1]);
        let e = [(lj[0] - m).exp(), (lj[1] - m).exp()];
        let s = e[0] + e[1];
        [e[0] / s, e[1] / s]
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let lj = self.log_joint(x);
                let m = lj[0].max(lj[1]);
                m + ((lj[0] - m).exp() + (lj[1] - m).exp()).ln()
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub params: GmmParams,
    /// Log-likelihood before each EM update and after the last one.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

/// One EM update.
pub fn em_step(params: &GmmParams, xs: &[f64]) -> GmmParams {
    let n = xs.len() as f64;
    let resp: Vec<[f64; 2]> = xs.iter().map(|&x| params.responsibilities(x)).collect();
    let mut out = params.clone();
    for c in 0..2 {
        let nc: f64 = resp.iter().map(|r| r[c]).sum();
        if nc <= 0.0 {
            continue;
        }
        let mean = resp.iter().zip(xs).map(|(r, x)| r[c] * x).sum::<f64>() / nc;
        let var = resp
            .iter()
            .zip(xs)
            .map(|(r, x)| r[c] * (x - mean).powi(2))
            .sum::<f64>()
            / nc;
        out.weights[c] = nc / n;
        out.means[c] = mean;
        out.variances[c] = var.max(VARIANCE_FLOOR);
    }
    out
}

fn kmeanspp_init(xs: &[f64], seed: u64) -> GmmParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = xs[rng.random_range(0..xs.len())];
    let d2: Vec<f64> = xs.iter().map(|x| (x - c0).powi(2)).collect();
    let total: f64 = d2.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut c1 = xs[xs.len() - 1];
    for (x, d) in xs.iter().zip(&d2) {
        if *d > 0.0 && u <= *d {
            c1 = *x;
            break;
        }
        u -= d;
    }
    if c1 == c0 {
        c1 = *xs.iter().find(|&&x| x != c0).expect("non-degenerate");
    }
    let mut groups: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for &x in xs {
        groups[usize::from((x - c1).abs() < (x - c0).abs())].push(x);
    }
    let mut p = GmmParams {
        weights: [0.5; 2],
        means: [c0, c1],
        variances: [VARIANCE_FLOOR; 2],
    };
    for c in 0..2 {
        let g = &groups[c];
        let m = g.iter().sum::<f64>() / g.len() as f64;
        p.weights[c] = g.len() as f64 / xs.len() as f64;
        p.means[c] = m;
        p.variances[c] = (g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g.len() as f64)
            .max(VARIANCE_FLOOR);
    }
    p
}

/// EM from a k-means++ style initialization, until the log-likelihood
/// changes by less than [`EM_TOLERANCE`] or [`MAX_EM_ITERATIONS`] updates.
pub fn fit_gmm(xs: &[f64], seed: u64) -> Result<GmmModel> {
    if xs.len() < 4 {
        return Err(MiaError::TooFewPoints(xs.len()));
    }
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(MiaError::Degenerate);
    }
    let mut params = kmeanspp_init(xs, seed);
    let mut trace = vec![params.log_likelihood(xs)];
    let mut iterations = 0;
    while iterations < MAX_EM_ITERATIONS {
        params = em_step(&params, xs);
        iterations += 1;
        let ll = params.log_likelihood(xs);
        let prev = trace[trace.len() - 1];
        trace.push(ll);
        if (ll - prev).abs() < EM_TOLERANCE {
            break;
        }
    }
    Ok(GmmModel {
        params,
        log_likelihood: trace,
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipPrediction {
    pub member: bool,
    /// Posterior of the member component.
    pub posterior: f64,
}

/// Member iff the member component's posterior is strictly above 1/2.
pub fn classify_membership(model: &GmmModel, xs: &[f64]) -> Vec<MembershipPrediction> {
    let m = model.params.member_component();
    xs.iter()
        .map(|&x| {
            let posterior = model.params.responsibilities(x)[m];
            MembershipPrediction {
                member: posterior > 0.5,
                posterior,
            }
        })
        .collect()
}

/// Per-record variance over the `K` candidates of the last-layer gradient
/// norm, averaged over the window's rounds.
pub fn membership_features(
    store: &SnapshotStore,
    records: &MaskedRecords,
    labels: &[usize],
    codebook: &AttributeCodebook,
    window: &EpochWindow,
) -> Result<Vec<f64>> {
    if window.rounds.is_empty() {
        return Err(MiaError::EmptyWindow);
    }
    if labels.len() != records.len() {
        return Err(AttackError::Problem("label count differs from record count".into()).into());
    }
    let k = codebook.k();
    let w = records.width();
    let mut data = Vec::with_capacity(records.len() * k * w);
    let mut cand_labels = Vec::with_capacity(records.len() * k);
    for (r, &y) in labels.iter().enumerate() {
        data.extend_from_slice(records.candidates(r, codebook).rows.data());
        cand_labels.extend(std::iter::repeat_n(y, k));
    }
    let cands = Tensor::matrix(records.len() * k, w, data).expect("candidate shape");
    let mut feats = vec![0.0; records.len()];
    for &round in &window.rounds {
        let snap = store
            .round(round)
            .ok_or(AttackError::MissingCheckpoint(round))?;
        let norms = last_layer_grad_norms(&snap.params, &cands, &cand_labels)?;
        for (r, f) in feats.iter_mut().enumerate() {
            let g = &norms[r * k..(r + 1) * k];
            let mean = g.iter().sum::<f64>() / k as f64;
            *f += g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64;
        }
    }
    let e = window.rounds.len() as f64;
    Ok(feats.into_iter().map(|f| f / e).collect())
}

/// Membership inference followed by cos-matching on the predicted members.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub features: Vec<f64>,
    pub gmm: GmmModel,
    pub predictions: Vec<MembershipPrediction>,
    /// Pool indices predicted as members, in pool order.
    pub members: Vec<usize>,
    /// Reconstruction for `members`, in the same order.
    pub ara: AttackResult,
}

impl MiaOutcome {
    pub fn membership_accuracy(&self, truth: &[bool]) -> f64 {
        let hits = self
            .predictions
            .iter()
            .zip(truth)
            .filter(|(p, t)| p.member == **t)
            .count();
        hits as f64 / truth.len().max(1) as f64
    }
}

/// Inputs of [`mia_then_ara`]. The pool mixes members and non-members;
/// labels of pool records are known.
#[derive(Clone, Debug)]
pub struct MiaProblem<'a> {
    pub pool: &'a MaskedRecords,
    pub labels: &'a [usize],
    pub codebook: &'a AttributeCodebook,
    pub store: &'a SnapshotStore,
    /// Rounds used for the membership features.
    pub feature_window: EpochWindow,
    /// Rounds matched by the reconstruction.
    pub attack_window: EpochWindow,
    pub prior: Option<Vec<f64>>,
    pub config: AttackConfig,
}

pub fn mia_then_ara(problem: &MiaProblem<'_>) -> Result<MiaOutcome> {
    let features = membership_features(
        problem.store,
        problem.pool,
        problem.labels,
        problem.codebook,
        &problem.feature_window,
    )?;
    let gmm = fit_gmm(&features, problem.config.seed)?;
    let predictions = classify_membership(&gmm, &features);
    let members: Vec<usize> = predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.member)
        .map(|(i, _)| i)
        .collect();
    let ara = if members.is_empty() {
        let mut r = AttackResult::new("cos", Vec::new());
        r.warnings.push("no records predicted as members".into());
        r
    } else {
        let records = problem.pool.subset(&members);
        let sub = AttackProblem {
            records: &records,
            labels: LabelInfo::Known {
                labels: members.iter().map(|&i| problem.labels[i]).collect(),
            },
            codebook: problem.codebook,
            store: problem.store,
            window: problem.attack_window.clone(),
            prior: problem.prior.clone(),
            config: problem.config.clone(),
        };
        cos_matching(&sub)?
    };
    Ok(MiaOutcome {
        features,
        gmm,
        predictions,
        members,
        ara,
    })
}
