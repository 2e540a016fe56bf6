use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MixWarmStart;
use crate::niw::NiwHyperParams;
use crate::optim::StepRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Niw,
    Mixture,
    FedAvg,
    FedProx,
    /// FedAvg with the classification head frozen during training.
    FedBabu,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Niw,
        Strategy::Mixture,
        Strategy::FedAvg,
        Strategy::FedProx,
        Strategy::FedBabu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Niw => "niw",
            Strategy::Mixture => "mixture",
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::FedBabu => "fedbabu",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Strategy::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown strategy `{s}`; valid values: {}", valid.join(", ")))
        })
    }
}

/// Where a participant's local iterate starts each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStart {
    #[default]
    FromServer,
    /// The client's own last iterate (server start on first participation).
    Retained,
}

/// Learning rate as a function of the 0-based round index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` once the round reaches each milestone, given as
    /// a fraction of the total rounds.
    StepDecay { milestones: Vec<f64>, factor: f64 },
    /// `lr * (offset + 1) / (offset + sqrt(t + 1))`.
    InverseSqrt { offset: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay {
            milestones: vec![0.5],
            factor: 0.1,
        }
    }
}

/// Settings of a federated run. Defaults are the MNIST benchmark setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedConfig {
    pub num_clients: usize,
    pub fraction: f64,
    pub local_epochs: usize,
    pub rounds: usize,
    pub strategy: Strategy,
    pub p_keep: f64,
    pub epsilon: f64,
    pub sigma_sq: f64,
    pub k: usize,
    pub mu_prox: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    /// Personalization step size; `None` uses `lr`.
    pub personal_lr: Option<f64>,
    pub batch_size: usize,
    /// Freeze the classification head during training. Always on for FedBABU.
    pub body_update: bool,
    pub warm_start: WarmStart,
    pub step_rule: StepRule,
    /// Student-t draws per NIW global prediction.
    pub eval_samples: usize,
    /// Evaluate global accuracy every this many rounds (0: first and last only).
    pub eval_every: usize,
    pub mix_warm_start: MixWarmStart,
    pub prototype_jitter: f64,
    pub prior_lambda0: f64,
    pub prior_scale: f64,
    /// `nu0 = d + prior_dof_offset`.
    pub prior_dof_offset: f64,
    /// Measure wall-clock time per round (makes records non-reproducible).
    pub record_wall_time: bool,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            fraction: 0.1,
            local_epochs: 1,
            rounds: 100,
            strategy: Strategy::Niw,
            p_keep: 1.0 - 0.001,
            epsilon: 1e-4,
            sigma_sq: 0.1,
            k: 2,
            mu_prox: 0.01,
            lr: 0.1,
            lr_schedule: LrSchedule::default(),
            personal_lr: None,
            batch_size: 50,
            body_update: true,
            warm_start: WarmStart::FromServer,
            step_rule: StepRule::Explicit,
            eval_samples: 1,
            eval_every: 1,
            mix_warm_start: MixWarmStart::Nearest,
            prototype_jitter: 0.01,
            prior_lambda0: 1.0,
            prior_scale: 1.0,
            prior_dof_offset: 2.0,
            record_wall_time: false,
            seed: 0,
        }
    }
}

pub(crate) fn participants_per_round(num_clients: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "N_f must be ≥ 1: participation fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let nf = (num_clients as f64 * fraction).floor() as usize;
    if nf == 0 {
        return Err(Error::Config(format!(
            "N_f must be ≥ 1: floor({num_clients} * {fraction}) = 0"
        )));
    }
    Ok(nf)
}

impl FederatedConfig {
    pub fn participants_per_round(&self) -> Result<usize> {
        participants_per_round(self.num_clients, self.fraction)
    }

    pub fn body_update(&self) -> bool {
        self.body_update || self.strategy == Strategy::FedBabu
    }

    pub fn personal_lr(&self) -> f64 {
        self.personal_lr.unwrap_or(self.lr)
    }

    pub fn lr_at(&self, round: usize) -> f64 {
        match &self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::StepDecay { milestones, factor } => {
                let passed = milestones
                    .iter()
                    .filter(|&&m| round >= (m * self.rounds as f64).floor() as usize)
                    .count();
                self.lr * factor.powi(passed as i32)
            }
            LrSchedule::InverseSqrt { offset } => self.lr * (offset + 1.0) / (offset + ((round + 1) as f64).sqrt()),
        }
    }

    pub fn niw_hyper(&self, d: usize) -> NiwHyperParams {
        NiwHyperParams {
            mu0: vec![0.0; d],
            sigma0_diag: vec![self.prior_scale; d],
            lambda0: self.prior_lambda0,
            nu0: d as f64 + self.prior_dof_offset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_clients == 0 {
            return bad("num_clients must be ≥ 1".into());
        }
        self.participants_per_round()?;
        if self.local_epochs == 0 {
            return bad("local_epochs (tau) must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.p_keep > 0.0 && self.p_keep <= 1.0) {
            return bad(format!("p_keep must lie in (0, 1], got {}", self.p_keep));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.sigma_sq > 0.0) {
            return bad(format!("sigma_sq must be > 0, got {}", self.sigma_sq));
        }
        if self.k == 0 {
            return bad("K must be ≥ 1".into());
        }
        if !(self.mu_prox >= 0.0) {
            return bad(format!("mu_prox must be ≥ 0, got {}", self.mu_prox));
        }
        if !(self.lr > 0.0) || self.personal_lr.is_some_and(|v| !(v > 0.0)) {
            return bad("learning rates must be > 0".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples (S) must be ≥ 1".into());
        }
        if !(self.prior_lambda0 > 0.0) || !(self.prior_scale > 0.0) || !(self.prior_dof_offset > 1.0) {
            return bad("prior needs lambda0 > 0, scale > 0 and dof offset > 1".into());
        }
        match &self.lr_schedule {
            LrSchedule::StepDecay { milestones, factor } => {
                if milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(*factor > 0.0) {
                    return bad("step decay needs milestones in [0, 1] and factor > 0".into());
                }
            }
            LrSchedule::InverseSqrt { offset } => {
                if !(*offset >= 0.0) {
                    return bad("inverse-sqrt offset must be ≥ 0".into());
                }
            }
            LrSchedule::Constant => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_at_half() {
        let c = FederatedConfig {
            rounds: 100,
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(49), 0.1);
        assert_eq!(c.lr_at(50), 0.1 * 0.1);
        assert_eq!(c.lr_at(99), 0.1 * 0.1);
    }

    #[test]
    fn inverse_sqrt_starts_at_base() {
        let c = FederatedConfig {
            lr_schedule: LrSchedule::InverseSqrt { offset: 3.0 },
            ..Default::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(3) - 0.1 * 4.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_strategy_lists_values() {
        let err = "fedsgd".parse::<Strategy>().unwrap_err().to_string();
        assert!(err.contains("niw, mixture, fedavg, fedprox, fedbabu"), "{err}");
    }

    #[test]
    fn fedbabu_forces_body_update() {
        let c = FederatedConfig {
            strategy: Strategy::FedBabu,
            body_update: false,
            ..Default::default()
        };
        assert!(c.body_update());
    }
}
