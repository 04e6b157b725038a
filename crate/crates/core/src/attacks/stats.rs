//! Statistic-matrix heuristics. For every record, each of the `K`
//! candidates is scored at every recorded epoch with the victim's model, giving
//! one `K x E` matrix per statistic.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{AttackError, AttackResult, Result};
use crate::autodiff::Tensor;
use crate::dataio::{AttributeCodebook, MaskedRecords};
use crate::fedsim::{EpochWindow, SnapshotStore};
use crate::nnmodel::{argmax_rows, infer, Activations, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatisticKind {
    /// 1 when the candidate is predicted as its true label, else 0.
    LabelStatus,
    /// Probability of the true label.
    Probability,
    /// Cross-entropy at the round's starting model.
    LossNorm,
    /// Cross-entropy at the victim's model after the round's update.
    FinalLoss,
    /// Norm of the last-layer weight gradient.
    GradNorm,
    /// Sum of the last-layer weight gradient column of the true label; never
    /// positive for ReLU features.
    GradTrueLabel,
}

impl StatisticKind {
    pub const ALL: [StatisticKind; 6] = [
        StatisticKind::LabelStatus,
        StatisticKind::Probability,
        StatisticKind::LossNorm,
        StatisticKind::FinalLoss,
        StatisticKind::GradNorm,
        StatisticKind::GradTrueLabel,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    /// Most epochs predicted correctly.
    LabelStatus,
    /// Largest probability sum.
    Probability,
    /// Smallest loss sum.
    LossNorm,
    /// Smallest loss at the last epoch.
    FinalLoss,
    /// Largest gradient-norm sum.
    GradNorm,
    /// True-label gradient sum closest to zero.
    GradTrueLabel,
    /// Majority vote over the six above.
    Majority,
}

impl Heuristic {
    pub const ALL: [Heuristic; 7] = [
        Heuristic::LabelStatus,
        Heuristic::Probability,
        Heuristic::LossNorm,
        Heuristic::FinalLoss,
        Heuristic::GradNorm,
        Heuristic::GradTrueLabel,
        Heuristic::Majority,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::LabelStatus => "stats-label",
            Heuristic::Probability => "stats-prob",
            Heuristic::LossNorm => "stats-loss",
            Heuristic::FinalLoss => "stats-final-loss",
            Heuristic::GradNorm => "stats-grad-norm",
            Heuristic::GradTrueLabel => "stats-grad-true",
            Heuristic::Majority => "stats-majority",
        }
    }
}

/// The six `K x E` matrices of one record, in [`StatisticKind::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordStatistics {
    pub matrices: Vec<Tensor>,
}

impl RecordStatistics {
    pub fn get(&self, kind: StatisticKind) -> &Tensor {
        let i = StatisticKind::ALL.iter().position(|&k| k == kind).expect("kind");
        &self.matrices[i]
    }
}

fn candidate_matrix(records: &MaskedRecords, codebook: &AttributeCodebook) -> Tensor {
    let k = codebook.k();
    let w = records.width();
    let mut data = Vec::with_capacity(records.len() * k * w);
    for r in 0..records.len() {
        data.extend_from_slice(records.candidates(r, codebook).rows.data());
    }
    Tensor::matrix(records.len() * k, w, data).expect("candidate shape")
}

fn loss_from_logits(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn grad_norm(act: &Activations, row: usize, y: usize) -> f64 {
    let h: f64 = act.last_hidden.row_slice(row).iter().map(|v| v * v).sum::<f64>().sqrt();
    let e: f64 = act
        .probs
        .row_slice(row)
        .iter()
        .enumerate()
        .map(|(c, p)| (p - if c == y { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        .sqrt();
    h * e
}

/// Norm of the last-layer weight gradient, `||h|| ||p - e_y||`, for each row
/// of `inputs` with the given label per row.
pub fn last_layer_grad_norms(params: &ParamVector, inputs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let act = infer(params, inputs)?;
    Ok(labels.iter().enumerate().map(|(r, &y)| grad_norm(&act, r, y)).collect())
}

/// Statistic matrices for every record over the window's rounds.
pub fn statistic_matrices(
    store: &SnapshotStore,
    records: &MaskedRecords,
    codebook: &AttributeCodebook,
    labels: &[usize],
    window: &EpochWindow,
) -> Result<Vec<RecordStatistics>> {
    if labels.len() != records.len() {
        return Err(AttackError::Problem(format!(
            "{} labels for {} records",
            labels.len(),
            records.len()
        )));
    }
    let k = codebook.k();
    let e = window.rounds.len();
    let cands = candidate_matrix(records, codebook);
    let mut stats: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; k * e]; 6]; records.len()];
    for (col, &round) in window.rounds.iter().enumerate() {
        let snap = store.round(round).ok_or(AttackError::MissingCheckpoint(round))?;
        let act = infer(&snap.params, &cands)?;
        let end = infer(&snap.end_params(store.lr), &cands)?;
        let pred = argmax_rows(&act.logits);
        for (r, &y) in labels.iter().enumerate() {
            for c in 0..k {
                let row = r * k + c;
                let p_y = act.probs.at(row, y);
                let h_sum: f64 = act.last_hidden.row_slice(row).iter().sum();
                let values = [
                    f64::from(u8::from(pred[row] == y)),
                    p_y,
                    loss_from_logits(act.logits.row_slice(row), y),
                    loss_from_logits(end.logits.row_slice(row), y),
                    grad_norm(&act, row, y),
                    (p_y - 1.0) * h_sum,
                ];
                for (s, v) in values.into_iter().enumerate() {
                    stats[r][s][c * e + col] = v;
                }
            }
        }
    }
    Ok(stats
        .into_iter()
        .map(|m| RecordStatistics {
            matrices: m
                .into_iter()
                .map(|d| Tensor::matrix(k, e, d).expect("statistic shape"))
                .collect(),
        })
        .collect())
}

/// 0-based position of the best score; the lowest index wins ties.
fn pick(scores: impl Iterator<Item = f64>, maximize: bool) -> usize {
    let mut best = (0, f64::NAN);
    for (i, s) in scores.enumerate() {
        let better = i == 0 || if maximize { s > best.1 } else { s < best.1 };
        if better {
            best = (i, s);
        }
    }
    best.0
}

fn row_sums(m: &Tensor) -> impl Iterator<Item = f64> + '_ {
    (0..m.rows()).map(|r| m.row_slice(r).iter().sum())
}

/// Most frequent 1-based index; ties go to the lowest index.
pub fn majority_vote(votes: &[usize]) -> usize {
    let max = votes.iter().copied().max().unwrap_or(1);
    let mut counts = vec![0usize; max + 1];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 1;
    for i in 1..=max {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    best
}

/// 1-based prediction of a heuristic for one record.
pub fn decide(h: Heuristic, s: &RecordStatistics) -> usize {
    use StatisticKind as K;
    1 + match h {
        Heuristic::LabelStatus => pick(row_sums(s.get(K::LabelStatus)), true),
        Heuristic::Probability => pick(row_sums(s.get(K::Probability)), true),
        Heuristic::LossNorm => pick(row_sums(s.get(K::LossNorm)), false),
        Heuristic::FinalLoss => {
            let m = s.get(K::FinalLoss);
            let last = m.cols() - 1;
            pick((0..m.rows()).map(|r| m.at(r, last)), false)
        }
        Heuristic::GradNorm => pick(row_sums(s.get(K::GradNorm)), true),
        Heuristic::GradTrueLabel => pick(row_sums(s.get(K::GradTrueLabel)), true),
        Heuristic::Majority => {
            let votes: Vec<usize> = Heuristic::ALL[..6].iter().map(|&h| decide(h, s)).collect();
            return majority_vote(&votes);
        }
    }
}

/// Runs the requested heuristics. The true labels must be known.
pub fn stats_attack(
    store: &SnapshotStore,
    records: &MaskedRecords,
    codebook: &AttributeCodebook,
    labels: &[usize],
    window: &EpochWindow,
    heuristics: &[Heuristic],
) -> Result<Vec<AttackResult>> {
    let start = Instant::now();
    let stats = statistic_matrices(store, records, codebook, labels, window)?;
    let elapsed = start.elapsed().as_secs_f64();
    Ok(heuristics
        .iter()
        .map(|&h| {
            let mut res = AttackResult::new(h.name(), stats.iter().map(|s| decide(h, s)).collect());
            res.config = serde_json::json!({ "heuristic": h, "window": window });
            res.wall_time_secs = elapsed;
            res
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(k: usize, e: usize, fill: f64) -> RecordStatistics {
        RecordStatistics {
            matrices: vec![Tensor::full(&[k, e], fill); 6],
        }
    }

    #[test]
    fn ties_pick_first() {
        let s = fixture(3, 4, 0.5);
        for h in Heuristic::ALL {
            assert_eq!(decide(h, &s), 1, "{h:?}");
        }
    }

    #[test]
    fn vote_arithmetic() {
        assert_eq!(majority_vote(&[1, 1, 2, 1, 2, 1]), 1);
        assert_eq!(majority_vote(&[2, 2, 1, 3, 3, 2]), 2);
        assert_eq!(majority_vote(&[2, 1, 2, 1, 3, 3]), 1);
    }

    #[test]
    fn directions() {
        let m = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let s = RecordStatistics {
            matrices: vec![m; 6],
        };
        assert_eq!(decide(Heuristic::Probability, &s), 1);
        assert_eq!(decide(Heuristic::LossNorm, &s), 3);
        assert_eq!(decide(Heuristic::FinalLoss, &s), 2);
    }
}
