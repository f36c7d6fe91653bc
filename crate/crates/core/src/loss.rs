//! Outlier-discounted loss terms, their gradients, the per-sample discount
//! store `u`, and the consistency / class-balance regularizers.
//!
//! For a sample with observed label `c`, probabilities `p = f(x, θ)`, discount
//! `u` and soft-label weight `ŷ`:
//!
//! ```text
//! l1 = −ŷ · ln(max(p_c + u, ε))
//! l2 = (p_c + u − 1)² + Σ_{j≠c} p_j²
//! ```
//!
//! `l1` trains θ with `u` held fixed; `l2` trains `u` with θ held fixed.

use serde::{Deserialize, Serialize};

use crate::centroids::SoftLabel;
use crate::error::{Error, Result};
use crate::numerics::{safe_ln, Rng, LOG_EPS};

/// Initial distribution of `u`.
pub const U_INIT_MEAN: f64 = 1e-8;
pub const U_INIT_STD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain cross-entropy: one-hot targets, `u` frozen at zero.
    Ce,
    Ncod,
    /// `Ncod` plus consistency and class-balance regularizers.
    NcodPlus,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Ce => "ce",
            Mode::Ncod => "ncod",
            Mode::NcodPlus => "ncod_plus",
        }
    }
}

/// Per-sample outlier discounts, kept inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UStore {
    u: Vec<f64>,
    pub lr_u: f64,
    pub weight_decay_u: f64,
}

impl UStore {
    /// Draw every `u_i` from `N(1e-8, (1e-9)²)`, clamped to `[0, 1]`.
    pub fn init(n: usize, lr_u: f64, weight_decay_u: f64, rng: &mut Rng) -> Self {
        let u = (0..n)
            .map(|_| (U_INIT_MEAN + U_INIT_STD * rng.standard_normal()).clamp(0.0, 1.0))
            .collect();
        UStore {
            u,
            lr_u,
            weight_decay_u,
        }
    }

    pub fn zeros(n: usize) -> Self {
        UStore {
            u: vec![0.0; n],
            lr_u: 0.0,
            weight_decay_u: 0.0,
        }
    }

    pub fn from_values(u: Vec<f64>, lr_u: f64, weight_decay_u: f64) -> Self {
        UStore {
            u: u.into_iter().map(|x| x.clamp(0.0, 1.0)).collect(),
            lr_u,
            weight_decay_u,
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.u[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.u
    }

    /// One gradient step on `l2` for sample `i`:
    /// `u ← clamp(u − lr_u·(2(p_c + u − 1) + 2·wd·u), 0, 1)`.
    pub fn update(&mut self, i: usize, probs_c: f64) -> Result<()> {
        let len = self.u.len();
        let u = self
            .u
            .get_mut(i)
            .ok_or(Error::IndexOutOfRange { index: i, len })?;
        let grad = 2.0 * (probs_c + *u - 1.0) + 2.0 * self.weight_decay_u * *u;
        *u = (*u - self.lr_u * grad).clamp(0.0, 1.0);
        Ok(())
    }
}

pub fn loss_l1(probs: &[f64], u_i: f64, soft: &SoftLabel) -> f64 {
    if soft.weight == 0.0 {
        return 0.0;
    }
    -soft.weight * safe_ln(probs[soft.class_index] + u_i)
}

/// Gradient of [`loss_l1`] with respect to the pre-softmax logits, `u_i`
/// held constant.
pub fn grad_l1_logits(probs: &[f64], u_i: f64, soft: &SoftLabel) -> Vec<f64> {
    let c = soft.class_index;
    let shifted = probs[c] + u_i;
    if soft.weight == 0.0 || shifted < LOG_EPS {
        // the log clamp is active (or the target is empty): flat loss
        return vec![0.0; probs.len()];
    }
    // With u = 0 and ŷ = 1 the coefficient is exactly 1 and this is p − e_c.
    let coef = soft.weight * (probs[c] / shifted);
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| coef * if j == c { p - 1.0 } else { p })
        .collect()
}

pub fn loss_l2(probs: &[f64], u_i: f64, label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let r = if j == label { p + u_i - 1.0 } else { p };
            r * r
        })
        .sum()
}

/// `∂ l2 / ∂u_i` (without weight decay).
pub fn grad_l2_u(probs_c: f64, u_i: f64) -> f64 {
    2.0 * (probs_c + u_i - 1.0)
}

/// `KL(p_orig ‖ p_aug)` with ε-clamped logs.
pub fn consistency_reg(probs_orig: &[f64], probs_aug: &[f64]) -> f64 {
    probs_orig
        .iter()
        .zip(probs_aug)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &q)| p * (safe_ln(p) - safe_ln(q)))
        .sum()
}

/// Gradient of [`consistency_reg`] with respect to the augmented view's
/// logits; the original view is treated as a constant.
pub fn consistency_grad_logits(probs_orig: &[f64], probs_aug: &[f64]) -> Vec<f64> {
    let live = |q: f64| q > LOG_EPS;
    let mass: f64 = probs_orig
        .iter()
        .zip(probs_aug)
        .filter(|(_, q)| live(**q))
        .map(|(p, _)| p)
        .sum();
    probs_orig
        .iter()
        .zip(probs_aug)
        .map(|(&p, &q)| q * mass - if live(q) { p } else { 0.0 })
        .collect()
}

fn batch_mean(batch_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = batch_probs.first().ok_or(Error::EmptyBatch)?;
    let mut mean = vec![0.0; first.len()];
    for p in batch_probs {
        if p.len() != mean.len() {
            return Err(Error::LengthMismatch {
                left: p.len(),
                right: mean.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    let inv = 1.0 / batch_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// `KL(uniform ‖ mean prediction over the batch)`.
pub fn class_balance_reg(batch_probs: &[Vec<f64>]) -> Result<f64> {
    let mean = batch_mean(batch_probs)?;
    let prior = 1.0 / mean.len() as f64;
    Ok(mean
        .iter()
        .map(|&m| prior * (prior.ln() - safe_ln(m)))
        .sum())
}

/// Per-sample logit gradients of [`class_balance_reg`].
pub fn class_balance_grad_logits(batch_probs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mean = batch_mean(batch_probs)?;
    let classes = mean.len() as f64;
    let inv_batch = 1.0 / batch_probs.len() as f64;
    let w: Vec<f64> = mean
        .iter()
        .map(|&m| {
            if m > LOG_EPS {
                1.0 / (classes * m)
            } else {
                0.0
            }
        })
        .collect();
    Ok(batch_probs
        .iter()
        .map(|p| {
            let s: f64 = w.iter().zip(p).map(|(a, b)| a * b).sum();
            p.iter()
                .zip(&w)
                .map(|(&pk, &wk)| inv_batch * pk * (s - wk))
                .collect()
        })
        .collect())
}

/// Loss components of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub l1: f64,
    pub l2: f64,
    pub l_c: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub l_c: f64,
    pub l_b: f64,
    pub total: f64,
}

/// Batch-mean loss. Only `NcodPlus` applies the regularizer weights.
pub fn total_loss(
    samples: &[SampleLoss],
    l_b: f64,
    lambda_c: f64,
    lambda_b: f64,
    mode: Mode,
) -> LossTerms {
    if samples.is_empty() {
        return LossTerms::default();
    }
    let inv = 1.0 / samples.len() as f64;
    let l1 = samples.iter().map(|s| s.l1).sum::<f64>() * inv;
    let l2 = samples.iter().map(|s| s.l2).sum::<f64>() * inv;
    let (l_c, l_b) = match mode {
        Mode::NcodPlus => (samples.iter().map(|s| s.l_c).sum::<f64>() * inv, l_b),
        _ => (0.0, 0.0),
    };
    let (lambda_c, lambda_b) = match mode {
        Mode::NcodPlus => (lambda_c, lambda_b),
        _ => (0.0, 0.0),
    };
    LossTerms {
        l1,
        l2,
        l_c,
        l_b,
        total: l1 + l2 + lambda_c * l_c + lambda_b * l_b,
    }
}
