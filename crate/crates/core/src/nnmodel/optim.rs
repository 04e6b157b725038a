use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient, optimizer step aborted")]
    Diverged,
    #[error("gradient has {found} entries, parameters have {expected}")]
    Length { expected: usize, found: usize },
}

fn check(params: &[f64], grad: &[f64]) -> Result<(), OptimError> {
    if params.len() != grad.len() {
        return Err(OptimError::Length {
            expected: params.len(),
            found: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::Diverged);
    }
    Ok(())
}

/// Plain SGD: `p -= lr * g`. No momentum, no weight decay.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<(), OptimError> {
    check(params, grad)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Minimizes; negate the gradient to maximize.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), OptimError> {
        check(params, grad)?;
        if self.m.len() != params.len() {
            return Err(OptimError::Length {
                expected: self.m.len(),
                found: params.len(),
            });
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsConfig {
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LbfgsStep {
    /// Step accepted with the given step length.
    Accepted { step: f64 },
    /// No step length satisfied sufficient decrease; the iterate is unchanged.
    LineSearchFailed,
}

/// Limited-memory BFGS with two-loop recursion and Armijo backtracking.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    cfg: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(cfg: LbfgsConfig) -> Self {
        Self {
            cfg,
            s: VecDeque::new(),
            y: VecDeque::new(),
        }
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    /// `-H g` from the stored curvature pairs.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let k = self.s.len();
        let mut q = g.to_vec();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.y[i], &self.s[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = match (self.s.back(), self.y.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0,
        };
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for i in 0..k {
            let beta = rho[i] * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter().map(|v| -v).collect()
    }

    /// One iteration from `(x, fx, gx)`; on acceptance all three are updated.
    pub fn step<E, F>(
        &mut self,
        x: &mut Vec<f64>,
        fx: &mut f64,
        gx: &mut Vec<f64>,
        mut objective: F,
    ) -> Result<LbfgsStep, E>
    where
        E: From<OptimError>,
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    {
        check(x, gx)?;
        let mut d = self.direction(gx);
        let mut slope = dot(gx, &d);
        if slope >= 0.0 || !slope.is_finite() {
            self.s.clear();
            self.y.clear();
            d = gx.iter().map(|g| -g).collect();
            slope = dot(gx, &d);
        }
        let mut alpha = if self.s.is_empty() {
            let gnorm = dot(gx, gx).sqrt();
            if gnorm > 1.0 {
                1.0 / gnorm
            } else {
                1.0
            }
        } else {
            1.0
        };
        for _ in 0..=self.cfg.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (f_new, g_new) = objective(&trial)?;
            if f_new.is_finite() && f_new <= *fx + self.cfg.c1 * alpha * slope {
                if g_new.iter().any(|g| !g.is_finite()) {
                    return Err(OptimError::Diverged.into());
                }
                let s: Vec<f64> = trial.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(gx.iter()).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if self.s.len() == self.cfg.history {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(s);
                    self.y.push_back(y);
                }
                *x = trial;
                *fx = f_new;
                *gx = g_new;
                return Ok(LbfgsStep::Accepted { step: alpha });
            }
            alpha *= self.cfg.backtrack;
        }
        Ok(LbfgsStep::LineSearchFailed)
    }
}
