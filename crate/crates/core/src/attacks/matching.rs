//! Gradient matching over relaxed sensitive attributes.
//!
//! Attribute logits `Z [N x K]` are relaxed to a real index
//! `a = softmax(Z / gamma) [1, 2, .., K]^T`, mapped to raw attribute space by
//! piecewise-linear interpolation over the codebook, and spliced into the
//! masked records. The virtual gradient of the mean loss at each recorded
//! model is compared to the recorded epoch gradient, and the comparison is
//! differentiated back to `Z`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttackError, AttackProblem, AttackResult, LabelInfo, Result};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::dataio::{AttributeCodebook, MaskedRecords};
use crate::nnmodel::{
    argmax_rows, cross_entropy, forward, one_hot, softmax_rows, Adam, Lbfgs, LbfgsConfig,
    LbfgsStep, ParamNodes, ParamVector,
};

const COS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingObjective {
    /// Maximize the summed cosine similarity.
    Cosine,
    /// Minimize the summed squared Euclidean distance.
    L2,
}

impl MatchingObjective {
    fn sign(self) -> f64 {
        match self {
            MatchingObjective::Cosine => 1.0,
            MatchingObjective::L2 => -1.0,
        }
    }
}

/// Objective value and its gradient with respect to the optimized logits.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub value: f64,
    pub grad_attr: Tensor,
    pub grad_label: Option<Tensor>,
}

/// `a = softmax(logits / gamma) [1..K]^T`, shape `[N x 1]`.
pub fn relax_attribute(g: &mut Graph, logits: NodeId, gamma: f64) -> Result<NodeId> {
    let k = g.shape(logits)[1];
    let scaled = g.scale(logits, 1.0 / gamma)?;
    let s = g.softmax_rows(scaled)?;
    let idx: Vec<f64> = (1..=k).map(|v| v as f64).collect();
    let idx = g.constant(Tensor::column(&idx));
    Ok(g.matmul(s, idx)?)
}

/// Records with the sensitive column filled by the interpolated raw value
/// of the relaxed index `a [N x 1]`.
pub fn virtual_input(
    g: &mut Graph,
    records: &MaskedRecords,
    codebook: &AttributeCodebook,
    a: NodeId,
) -> Result<NodeId> {
    let left = records.left();
    let right = records.right();
    virtual_input_parts(g, &left, &right, codebook, a)
}

fn virtual_input_parts(
    g: &mut Graph,
    left: &Tensor,
    right: &Tensor,
    codebook: &AttributeCodebook,
    a: NodeId,
) -> Result<NodeId> {
    let (slopes, intercepts): (Vec<f64>, Vec<f64>) = g
        .value(a)
        .data()
        .iter()
        .map(|&v| codebook.interpolation(v))
        .unzip();
    let s = g.constant(Tensor::column(&slopes));
    let c = g.constant(Tensor::column(&intercepts));
    let raw = g.mul(a, s)?;
    let raw = g.add(raw, c)?;
    let mut parts = Vec::with_capacity(3);
    if left.cols() > 0 {
        parts.push(g.constant(left.clone()));
    }
    parts.push(raw);
    if right.cols() > 0 {
        parts.push(g.constant(right.clone()));
    }
    Ok(g.concat_cols(&parts)?)
}

/// Gradient nodes of the mean loss at `params` on `x_prime`, one per
/// parameter tensor in canonical order. They stay differentiable with
/// respect to `x_prime` and `targets`.
pub fn virtual_gradient(
    g: &mut Graph,
    params: &ParamVector,
    x_prime: NodeId,
    targets: NodeId,
) -> Result<Vec<NodeId>> {
    let p = ParamNodes::leaves(g, params);
    let logits = forward(g, &p, x_prime)?;
    let loss = cross_entropy(g, logits, targets)?;
    Ok(g.grad_graph(loss, &p.ids())?)
}

struct RoundData {
    params: ParamVector,
    /// Recorded gradient split per parameter tensor.
    target: Vec<Tensor>,
    target_norm: f64,
}

struct Prepared {
    left: Tensor,
    right: Tensor,
    hard_targets: Option<Tensor>,
    rounds: Vec<RoundData>,
}

fn split_gradient(params: &ParamVector, flat: &[f64]) -> Result<Vec<Tensor>> {
    let pv = ParamVector::from_flat(&params.dims(), flat)?;
    Ok(pv
        .layers()
        .iter()
        .flat_map(|l| [l.weight.clone(), Tensor::row(&l.bias)])
        .collect())
}

fn prepare(problem: &AttackProblem<'_>) -> Result<Prepared> {
    let classes = problem.store.model.num_classes;
    let hard_targets = match &problem.labels {
        LabelInfo::Known { labels } => Some(one_hot(labels, classes)?),
        LabelInfo::Unknown { .. } => None,
    };
    let rounds = problem
        .window
        .rounds
        .iter()
        .map(|&r| {
            let snap = problem
                .store
                .round(r)
                .ok_or(AttackError::MissingCheckpoint(r))?;
            Ok(RoundData {
                params: snap.params.clone(),
                target: split_gradient(&snap.params, &snap.gradient)?,
                target_norm: snap.gradient.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        left: problem.records.left(),
        right: problem.records.right(),
        hard_targets,
        rounds,
    })
}

fn round_objective(
    prep: &Prepared,
    round: &RoundData,
    codebook: &AttributeCodebook,
    kind: MatchingObjective,
    gamma: f64,
    attr_logits: &Tensor,
    label_logits: Option<&Tensor>,
    noise: Option<&Tensor>,
) -> Result<ObjectiveValue> {
    let mut g = Graph::new();
    let z = g.leaf(attr_logits.clone());
    let zin = match noise {
        Some(n) => {
            let n = g.constant(n.clone());
            g.add(z, n)?
        }
        None => z,
    };
    let a = relax_attribute(&mut g, zin, gamma)?;
    let x = virtual_input_parts(&mut g, &prep.left, &prep.right, codebook, a)?;
    let (targets, l) = match (&prep.hard_targets, label_logits) {
        (Some(t), _) => (g.constant(t.clone()), None),
        (None, Some(ll)) => {
            let l = g.leaf(ll.clone());
            (g.softmax_rows(l)?, Some(l))
        }
        (None, None) => {
            return Err(AttackError::Problem("label logits required".into()));
        }
    };
    let grads = virtual_gradient(&mut g, &round.params, x, targets)?;
    let mut acc: Option<NodeId> = None;
    let mut add = |g: &mut Graph, v: NodeId| -> Result<()> {
        acc = Some(match acc {
            None => v,
            Some(prev) => g.add(prev, v)?,
        });
        Ok(())
    };
    let out = match kind {
        MatchingObjective::Cosine => {
            for (gi, ti) in grads.iter().zip(&round.target) {
                let c = g.constant(ti.clone());
                let d = g.dot(*gi, c)?;
                add(&mut g, d)?;
            }
            let num = acc.expect("at least one parameter tensor");
            let mut sq: Option<NodeId> = None;
            for gi in &grads {
                let d = g.dot(*gi, *gi)?;
                sq = Some(match sq {
                    None => d,
                    Some(prev) => g.add(prev, d)?,
                });
            }
            let norm = g.sqrt(sq.expect("at least one parameter tensor"))?;
            let den = g.scale(norm, round.target_norm)?;
            let den = g.add_scalar(den, COS_EPS)?;
            g.div(num, den)?
        }
        MatchingObjective::L2 => {
            for (gi, ti) in grads.iter().zip(&round.target) {
                let c = g.constant(ti.clone());
                let diff = g.sub(*gi, c)?;
                let d = g.dot(diff, diff)?;
                add(&mut g, d)?;
            }
            acc.expect("at least one parameter tensor")
        }
    };
    let value = g.value(out).item();
    let wrt: Vec<NodeId> = std::iter::once(z).chain(l).collect();
    let mut grads = g.grad(out, &wrt)?.into_iter();
    Ok(ObjectiveValue {
        value,
        grad_attr: grads.next().expect("attribute gradient"),
        grad_label: grads.next(),
    })
}

fn objective_with(
    prep: &Prepared,
    problem: &AttackProblem<'_>,
    kind: MatchingObjective,
    gamma: f64,
    attr_logits: &Tensor,
    label_logits: Option<&Tensor>,
    noise: Option<&Tensor>,
) -> Result<ObjectiveValue> {
    let parts = prep
        .rounds
        .par_iter()
        .map(|r| {
            round_objective(
                prep,
                r,
                problem.codebook,
                kind,
                gamma,
                attr_logits,
                label_logits,
                noise,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = parts.into_iter();
    let mut total = it.next().expect("non-empty window");
    for p in it {
        total.value += p.value;
        for (a, b) in total.grad_attr.data_mut().iter_mut().zip(p.grad_attr.data()) {
            *a += b;
        }
        if let (Some(ta), Some(pa)) = (total.grad_label.as_mut(), p.grad_label.as_ref()) {
            for (a, b) in ta.data_mut().iter_mut().zip(pa.data()) {
                *a += b;
            }
        }
    }
    Ok(total)
}

/// Summed objective over the problem's window, with gradients.
pub fn matching_objective(
    problem: &AttackProblem<'_>,
    kind: MatchingObjective,
    gamma: f64,
    attr_logits: &Tensor,
    label_logits: Option<&Tensor>,
) -> Result<ObjectiveValue> {
    problem.validate()?;
    let prep = prepare(problem)?;
    objective_with(&prep, problem, kind, gamma, attr_logits, label_logits, None)
}

fn broadcast_log(n: usize, p: &[f64]) -> Tensor {
    let row: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let data = (0..n).flat_map(|_| row.iter().copied()).collect();
    Tensor::matrix(n, p.len(), data).expect("logit shape")
}

fn standard_normal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * k).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(n, k, data).expect("logit shape")
}

/// Initial attribute and label logits: log of the prior broadcast to every
/// row when a prior is known, standard normal otherwise.
pub(crate) fn initial_logits(problem: &AttackProblem<'_>) -> (Tensor, Option<Tensor>) {
    let n = problem.records.len();
    let k = problem.codebook.k();
    let mut rng = ChaCha8Rng::seed_from_u64(problem.config.seed);
    let attr = match &problem.prior {
        Some(p) => broadcast_log(n, p),
        None => standard_normal(n, k, &mut rng),
    };
    let labels = match &problem.labels {
        LabelInfo::Known { .. } => None,
        LabelInfo::Unknown { prior: Some(p) } => Some(broadcast_log(n, p)),
        LabelInfo::Unknown { prior: None } => Some(standard_normal(
            n,
            problem.store.model.num_classes,
            &mut rng,
        )),
    };
    (attr, labels)
}

fn gumbel(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..n * k)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(n, k, data).expect("noise shape")
}

struct Run {
    best_score: f64,
    best_attr: Tensor,
    iterations: usize,
    trace: Vec<(usize, f64)>,
}

fn pack(attr: &Tensor, label: Option<&Tensor>) -> Vec<f64> {
    let mut v = attr.data().to_vec();
    if let Some(l) = label {
        v.extend_from_slice(l.data());
    }
    v
}

fn unpack(v: &[f64], attr_shape: &[usize], label_shape: Option<&[usize]>) -> (Tensor, Option<Tensor>) {
    let na = attr_shape[0] * attr_shape[1];
    let attr = Tensor::new(attr_shape.to_vec(), v[..na].to_vec()).expect("attr shape");
    let label = label_shape.map(|s| Tensor::new(s.to_vec(), v[na..].to_vec()).expect("label shape"));
    (attr, label)
}

struct Tracker {
    best: f64,
    history: Vec<f64>,
    trace: Vec<(usize, f64)>,
    every: usize,
    patience: usize,
    tolerance: f64,
}

impl Tracker {
    /// Records one evaluation; returns true when the iterate is a new best.
    fn observe(&mut self, it: usize, score: f64, value: f64) -> bool {
        if it.is_multiple_of(self.every.max(1)) {
            self.trace.push((it, value));
        }
        let improved = score > self.best;
        if improved {
            self.best = score;
        }
        self.history.push(self.best);
        improved
    }

    fn stalled(&self) -> bool {
        let h = &self.history;
        h.len() > self.patience && h[h.len() - 1] - h[h.len() - 1 - self.patience] < self.tolerance
    }
}

fn optimize(
    problem: &AttackProblem<'_>,
    prep: &Prepared,
    kind: MatchingObjective,
    gamma: f64,
) -> Result<Run> {
    let cfg = &problem.config;
    let sign = kind.sign();
    let (attr0, label0) = initial_logits(problem);
    let attr_shape = attr0.shape().to_vec();
    let label_shape = label0.as_ref().map(|l| l.shape().to_vec());
    let mut x = pack(&attr0, label0.as_ref());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09_e667_f3bc_c909);
    let (n, k) = (attr_shape[0], attr_shape[1]);
    let draw_noise = |rng: &mut ChaCha8Rng| cfg.gumbel_noise.then(|| gumbel(n, k, rng));
    let eval = |x: &[f64], noise: Option<&Tensor>| -> Result<(f64, Vec<f64>)> {
        let (a, l) = unpack(x, &attr_shape, label_shape.as_deref());
        let o = objective_with(prep, problem, kind, gamma, &a, l.as_ref(), noise)?;
        Ok((o.value, pack(&o.grad_attr, o.grad_label.as_ref())))
    };
    let mut tracker = Tracker {
        best: f64::NEG_INFINITY,
        history: Vec::new(),
        trace: Vec::new(),
        every: cfg.trace_every,
        patience: cfg.patience,
        tolerance: cfg.tolerance,
    };
    let mut best_x = x.clone();
    let mut iterations = 0;
    match kind {
        MatchingObjective::Cosine => {
            let mut adam = Adam::new(x.len(), cfg.adam);
            for it in 0..cfg.iterations.max(1) {
                iterations = it + 1;
                let noise = draw_noise(&mut noise_rng);
                let (value, grad) = eval(&x, noise.as_ref()).map_err(|e| match e {
                    AttackError::Model(_) => AttackError::NonFinite { iteration: it },
                    other => other,
                })?;
                if !value.is_finite() {
                    return Err(AttackError::NonFinite { iteration: it });
                }
                if tracker.observe(it, sign * value, value) {
                    best_x.clone_from(&x);
                }
                if tracker.stalled() || it + 1 == cfg.iterations {
                    break;
                }
                let ascent: Vec<f64> = grad.iter().map(|g| -sign * g).collect();
                adam.step(&mut x, &ascent)
                    .map_err(|_| AttackError::NonFinite { iteration: it })?;
            }
        }
        MatchingObjective::L2 => {
            let mut lbfgs = Lbfgs::new(LbfgsConfig::default());
            let noise = draw_noise(&mut noise_rng);
            let (mut fx, mut gx) = eval(&x, noise.as_ref())?;
            if !fx.is_finite() {
                return Err(AttackError::NonFinite { iteration: 0 });
            }
            tracker.observe(0, -fx, fx);
            best_x.clone_from(&x);
            for it in 1..cfg.iterations.max(1) {
                iterations = it;
                let noise = draw_noise(&mut noise_rng);
                let step = lbfgs
                    .step(&mut x, &mut fx, &mut gx, |v: &[f64]| eval(v, noise.as_ref()))
                    .map_err(|e| match e {
                        AttackError::Model(_) => AttackError::NonFinite { iteration: it },
                        other => other,
                    })?;
                if step == LbfgsStep::LineSearchFailed {
                    break;
                }
                if tracker.observe(it, -fx, fx) {
                    best_x.clone_from(&x);
                }
                if tracker.stalled() {
                    break;
                }
            }
        }
    }
    let (best_attr, _) = unpack(&best_x, &attr_shape, label_shape.as_deref());
    Ok(Run {
        best_score: tracker.best,
        best_attr,
        iterations,
        trace: tracker.trace,
    })
}

/// Runs the matching attack once per temperature and keeps the run with the
/// best objective.
pub fn run_matching(problem: &AttackProblem<'_>, kind: MatchingObjective) -> Result<AttackResult> {
    let start = Instant::now();
    problem.validate()?;
    let prep = prepare(problem)?;
    let mut best: Option<(f64, Run)> = None;
    for gamma in problem.gammas() {
        let run = optimize(problem, &prep, kind, gamma)?;
        if best.as_ref().is_none_or(|(_, b)| run.best_score > b.best_score) {
            best = Some((gamma, run));
        }
    }
    let (gamma, run) = best.expect("at least one temperature");
    let soft = softmax_rows(&run.best_attr.map(|v| v / gamma));
    let predictions = argmax_rows(&soft).into_iter().map(|i| i + 1).collect();
    let method = match kind {
        MatchingObjective::Cosine => "cos",
        MatchingObjective::L2 => "l2",
    };
    let mut result = AttackResult::new(method, predictions);
    result.soft = (0..soft.rows()).map(|r| soft.row_slice(r).to_vec()).collect();
    result.objective = Some(kind.sign() * run.best_score);
    result.gamma = Some(gamma);
    result.iterations = run.iterations;
    result.trace = run.trace;
    result.config = serde_json::json!({
        "objective": kind,
        "window": problem.window,
        "attack": problem.config,
        "label_known": problem.labels.known().is_some(),
        "prior_known": problem.prior.is_some(),
    });
    result.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Maximizes the summed cosine similarity between virtual and recorded
/// gradients with Adam.
pub fn cos_matching(problem: &AttackProblem<'_>) -> Result<AttackResult> {
    run_matching(problem, MatchingObjective::Cosine)
}

/// Minimizes the summed squared distance between virtual and recorded
/// gradients with L-BFGS.
pub fn l2_matching(problem: &AttackProblem<'_>) -> Result<AttackResult> {
    run_matching(problem, MatchingObjective::L2)
}
