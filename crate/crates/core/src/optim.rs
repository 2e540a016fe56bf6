//! Local SGD with an optional quadratic pull toward an anchor.
//!
//! Every proximal-style client objective in this crate has the form
//! `data_loss(m) + 1/2 * sum_k w_k (m_k - a_k)^2` (for the mixture penalty the
//! anchor is the softmax-weighted prototype average at the current iterate).
//! [`StepRule::Explicit`] is plain SGD on the sum. [`StepRule::Implicit`]
//! takes the gradient step on the data term and solves the quadratic part
//! exactly, which stays stable when `lr * w_k` is large.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{check_len, Batch, ParamVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    #[default]
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PullWeight {
    Scalar(f64),
    PerCoord(Vec<f64>),
}

impl PullWeight {
    #[inline]
    pub fn at(&self, k: usize) -> f64 {
        match self {
            PullWeight::Scalar(w) => *w,
            PullWeight::PerCoord(w) => w[k],
        }
    }
}

/// `1/2 * sum_k w_k (m_k - a_k)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPull {
    pub anchor: Vec<f64>,
    pub weight: PullWeight,
}

impl QuadraticPull {
    pub fn value(&self, m: &[f64]) -> f64 {
        0.5 * m
            .iter()
            .zip(&self.anchor)
            .enumerate()
            .map(|(k, (x, a))| self.weight.at(k) * (x - a) * (x - a))
            .sum::<f64>()
    }

    /// Adds the pull gradient `w_k (m_k - a_k)` into `grad`.
    pub fn add_grad(&self, m: &[f64], grad: &mut [f64]) {
        for (k, ((g, x), a)) in grad.iter_mut().zip(m).zip(&self.anchor).enumerate() {
            *g += self.weight.at(k) * (x - a);
        }
    }
}

/// One local step in place. Coordinates in `frozen` are left untouched.
pub fn local_step(
    params: &mut [f64],
    data_grad: &[f64],
    pull: Option<&QuadraticPull>,
    lr: f64,
    rule: StepRule,
    frozen: Option<&Range<usize>>,
) -> Result<()> {
    check_len("gradient", params.len(), data_grad.len())?;
    let skip = |k: usize| frozen.is_some_and(|r| r.contains(&k));
    match pull {
        None => {
            for (k, (p, g)) in params.iter_mut().zip(data_grad).enumerate() {
                if !skip(k) {
                    *p -= lr * g;
                }
            }
        }
        Some(pull) => {
            check_len("pull anchor", params.len(), pull.anchor.len())?;
            for (k, (p, g)) in params.iter_mut().zip(data_grad).enumerate() {
                if skip(k) {
                    continue;
                }
                let w = pull.weight.at(k);
                let a = pull.anchor[k];
                *p = match rule {
                    StepRule::Explicit => *p - lr * (g + w * (*p - a)),
                    StepRule::Implicit => (*p - lr * g + lr * w * a) / (1.0 + lr * w),
                };
            }
        }
    }
    if params.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("local step"))
    }
}

/// Epoch/batch/step-size settings for a run of local SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rule: StepRule,
}

/// One minibatch evaluation of a local objective.
#[derive(Debug, Clone)]
pub struct Objective {
    /// Data term plus penalty.
    pub loss: f64,
    /// Mean cross-entropy of the minibatch.
    pub data_loss: f64,
    pub data_grad: ParamVector,
    pub pull: Option<QuadraticPull>,
}

impl Objective {
    pub fn total_grad(&self, m: &[f64]) -> ParamVector {
        let mut g = self.data_grad.clone();
        if let Some(pull) = &self.pull {
            pull.add_grad(m, &mut g);
        }
        g
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochStats {
    pub steps: usize,
    /// Mean objective over every step.
    pub mean_loss: f64,
    /// Mean cross-entropy over the steps of the final epoch.
    pub last_epoch_data_loss: f64,
}

/// Runs `schedule.epochs` shuffled passes over `indices`, calling
/// `objective` on every minibatch and stepping with [`local_step`].
pub fn run_epochs<F>(
    params: &mut ParamVector,
    data: &LabeledDataset,
    indices: &[usize],
    schedule: &LocalSchedule,
    frozen: Option<&Range<usize>>,
    rng: &mut Rng,
    mut objective: F,
) -> Result<EpochStats>
where
    F: FnMut(&[f64], &Batch, &mut Rng) -> Result<Objective>,
{
    let mut stats = EpochStats::default();
    let mut loss_sum = 0.0;
    for epoch in 0..schedule.epochs {
        let mut last_sum = 0.0;
        let batches = minibatches(indices, schedule.batch_size, rng);
        for idx in &batches {
            let batch = data.batch(idx);
            let obj = objective(params, &batch, rng)?;
            local_step(
                params,
                &obj.data_grad,
                obj.pull.as_ref(),
                schedule.lr,
                schedule.rule,
                frozen,
            )?;
            loss_sum += obj.loss;
            stats.steps += 1;
            if epoch + 1 == schedule.epochs {
                last_sum += obj.data_loss;
            }
        }
        if epoch + 1 == schedule.epochs && !batches.is_empty() {
            stats.last_epoch_data_loss = last_sum / batches.len() as f64;
        }
    }
    if stats.steps > 0 {
        stats.mean_loss = loss_sum / stats.steps as f64;
    }
    Ok(stats)
}
