//! Round orchestration: participant sampling, local training, server
//! aggregation and per-round metrics for every strategy.
//!
//! A round broadcasts the server state, lets each sampled client run
//! `local_epochs` passes of its strategy's objective (in parallel), then
//! applies the strategy's server step to the participants' results in
//! ascending client-id order.

mod baselines;
mod config;
mod diagnostics;
mod eval;

pub use baselines::{fedavg_aggregate, fedprox_client_loss_grad, fedprox_client_objective};
pub use config::{FederatedConfig, LrSchedule, Strategy, WarmStart};
pub use diagnostics::{convergence_diagnostic, running_average, ConvergenceFit};
pub use eval::{accuracy, PersonalizationReport, Predictor};

use std::ops::Range;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::mixture::{self, MixtureGlobalPosterior};
use crate::niw::{self, NiwGlobalPosterior, NiwHyperParams};
use crate::nn::{self, MlpArch, ParamVector};
use crate::optim::{self, LocalSchedule};
use crate::rng::{self, purpose, Rng};

/// `floor(N f)` distinct ids drawn uniformly without replacement, sorted.
pub fn sample_participants(num_clients: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let nf = config::participants_per_round(num_clients, fraction)?;
    let mut ids = index::sample(rng, num_clients, nf).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Server-side state of any strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerState {
    Niw { global: NiwGlobalPosterior },
    Mixture { global: MixtureGlobalPosterior },
    Average { params: ParamVector },
}

/// Metrics of one round; round 0 is the evaluation before any training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub global_acc: Option<f64>,
    /// Mean over participants of the cross-entropy of their final local
    /// model on their own training split.
    pub mean_client_loss: f64,
    /// NIW / mixture server objective; the mean client loss for baselines.
    pub server_objective: Option<f64>,
    /// Estimate of the negative ELBO per training example.
    pub objective: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Everything that changes while a simulation runs; serializable so a run
/// can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationState {
    /// Completed training rounds.
    pub round: usize,
    pub server: ServerState,
    /// Last local iterate of every client that has trained.
    pub retained: Vec<Option<ParamVector>>,
    pub records: Vec<RoundRecord>,
}

/// Output of one client's local work.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientResult {
    pub id: usize,
    pub params: ParamVector,
    pub gating: Option<ParamVector>,
    pub train_loss: f64,
}

pub struct Simulation {
    config: FederatedConfig,
    arch: MlpArch,
    gating_arch: Option<MlpArch>,
    hyper: Option<NiwHyperParams>,
    train: LabeledDataset,
    test: LabeledDataset,
    clients: Vec<ClientState>,
    total_train: usize,
    state: SimulationState,
}

impl Simulation {
    /// Builds a simulation over `train` split into `splits` (one per client).
    /// Without an explicit `test` set, the union of the clients' test splits
    /// is used for global evaluation. Round 0 is evaluated immediately.
    pub fn new(
        config: FederatedConfig,
        arch: MlpArch,
        train: LabeledDataset,
        splits: Vec<ClientSplit>,
        test: Option<LabeledDataset>,
    ) -> Result<Self> {
        let mut sim = Self::assemble(config, arch, train, splits, test, None)?;
        let record = sim.initial_record()?;
        sim.state.records.push(record);
        Ok(sim)
    }

    /// Rebuilds a simulation from a saved state.
    pub fn resume(
        config: FederatedConfig,
        arch: MlpArch,
        train: LabeledDataset,
        splits: Vec<ClientSplit>,
        test: Option<LabeledDataset>,
        state: SimulationState,
    ) -> Result<Self> {
        Self::assemble(config, arch, train, splits, test, Some(state))
    }

    fn assemble(
        config: FederatedConfig,
        arch: MlpArch,
        train: LabeledDataset,
        splits: Vec<ClientSplit>,
        test: Option<LabeledDataset>,
        state: Option<SimulationState>,
    ) -> Result<Self> {
        config.validate()?;
        if splits.len() != config.num_clients {
            return Err(Error::Config(format!(
                "config has {} clients but the partition has {}",
                config.num_clients,
                splits.len()
            )));
        }
        if arch.input_dim() != train.input_dim() || arch.num_classes() < train.num_classes() {
            return Err(Error::Config(format!(
                "architecture {:?} does not fit data with {} inputs and {} classes",
                arch.layer_sizes(),
                train.input_dim(),
                train.num_classes()
            )));
        }
        let clients: Vec<ClientState> = splits
            .into_iter()
            .enumerate()
            .map(|(id, s)| {
                if s.train.is_empty() {
                    Err(Error::Config(format!("client {id} has an empty training split")))
                } else {
                    Ok(ClientState {
                        id,
                        train: s.train,
                        test: s.test,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let total_train = clients.iter().map(|c| c.train.len()).sum();
        let test = match test {
            Some(t) => t,
            None => {
                let idx: Vec<usize> = clients.iter().flat_map(|c| c.test.iter().copied()).collect();
                if idx.is_empty() {
                    return Err(Error::Empty("global test set"));
                }
                train.subset(&idx)
            }
        };
        let d = arch.num_params();
        let hyper = (config.strategy == Strategy::Niw).then(|| config.niw_hyper(d));
        let gating_arch = match config.strategy {
            Strategy::Mixture => Some(arch.with_outputs(config.k)?),
            _ => None,
        };
        let mut sim = Self {
            arch,
            gating_arch,
            hyper,
            train,
            test,
            total_train,
            state: SimulationState {
                round: 0,
                server: ServerState::Average {
                    params: ParamVector::zeros(0),
                },
                retained: vec![None; clients.len()],
                records: Vec::new(),
            },
            clients,
            config,
        };
        match state {
            Some(s) => {
                sim.check_state(&s)?;
                sim.state = s;
            }
            None => sim.state.server = sim.initial_server()?,
        }
        Ok(sim)
    }

    fn check_state(&self, s: &SimulationState) -> Result<()> {
        let d = self.arch.num_params();
        let ok = match (&s.server, self.config.strategy) {
            (ServerState::Niw { global }, Strategy::Niw) => global.m0.len() == d,
            (ServerState::Mixture { global }, Strategy::Mixture) => {
                global.prototypes.len() == self.config.k && global.prototypes.iter().all(|r| r.len() == d)
            }
            (ServerState::Average { params }, Strategy::FedAvg | Strategy::FedProx | Strategy::FedBabu) => {
                params.len() == d
            }
            _ => false,
        };
        if !ok || s.retained.len() != self.clients.len() || s.records.len() != s.round + 1 {
            return Err(Error::Config("saved state does not match the configuration".into()));
        }
        Ok(())
    }

    fn initial_server(&self) -> Result<ServerState> {
        let seed = self.config.seed;
        let init = nn::init_params(&self.arch, &mut rng::stream(seed, &[purpose::INIT]));
        Ok(match self.config.strategy {
            Strategy::Niw => {
                let mut global = niw::niw_init(self.arch.num_params(), self.total_train, self.hyper.as_ref().unwrap())?;
                // The prior location is 0, where every ReLU unit is dead; the
                // server location starts from the usual random init instead.
                global.m0 = init;
                ServerState::Niw { global }
            }
            Strategy::Mixture => {
                let gating_arch = self.gating_arch.as_ref().unwrap();
                let mut r = rng::stream(seed, &[purpose::PROTOTYPES]);
                let frozen = self.frozen();
                let prototypes =
                    mixture::init_prototypes(&init, self.config.k, self.config.prototype_jitter, frozen.as_ref(), &mut r)?;
                let gating = nn::init_params(gating_arch, &mut rng::stream(seed, &[purpose::INIT, 1]));
                ServerState::Mixture {
                    global: MixtureGlobalPosterior {
                        prototypes,
                        sigma_sq: self.config.sigma_sq,
                        epsilon: self.config.epsilon,
                        gating,
                    },
                }
            }
            Strategy::FedAvg | Strategy::FedProx | Strategy::FedBabu => ServerState::Average { params: init },
        })
    }

    pub fn config(&self) -> &FederatedConfig {
        &self.config
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn gating_arch(&self) -> Option<&MlpArch> {
        self.gating_arch.as_ref()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn train_data(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_data(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn state(&self) -> &SimulationState {
        &self.state
    }

    pub fn server(&self) -> &ServerState {
        &self.state.server
    }

    /// Replaces the server state (used by equivalence tests and tools).
    pub fn set_server(&mut self, server: ServerState) {
        self.state.server = server;
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.state.records
    }

    pub fn completed_rounds(&self) -> usize {
        self.state.round
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    /// Total size of all clients' training splits.
    pub fn total_train(&self) -> usize {
        self.total_train
    }

    fn frozen(&self) -> Option<Range<usize>> {
        self.config.body_update().then(|| nn::head_freeze_mask(&self.arch))
    }

    fn gating_frozen(&self) -> Option<Range<usize>> {
        match (&self.gating_arch, self.config.body_update()) {
            (Some(g), true) => Some(nn::head_freeze_mask(g)),
            _ => None,
        }
    }

    /// Model a client starts its local work from when it is not retaining
    /// its own iterate: the server location, or the prototype centre for the
    /// mixture.
    pub fn server_start(&self) -> ParamVector {
        match &self.state.server {
            ServerState::Niw { global } => global.m0.clone(),
            ServerState::Average { params } => params.clone(),
            ServerState::Mixture { global } => {
                let k = global.k() as f64;
                let mut c = ParamVector::zeros(global.prototypes[0].len());
                for r in &global.prototypes {
                    for (a, x) in c.iter_mut().zip(r.iter()) {
                        *a += x;
                    }
                }
                c.iter_mut().for_each(|v| *v /= k);
                if let Some(f) = self.frozen() {
                    c[f.clone()].copy_from_slice(&global.prototypes[0][f]);
                }
                c
            }
        }
    }

    fn start_for(&self, id: usize) -> ParamVector {
        match (self.config.warm_start, &self.state.retained[id]) {
            (WarmStart::Retained, Some(m)) => m.clone(),
            _ => self.server_start(),
        }
    }

    fn schedule(&self, round: usize) -> LocalSchedule {
        LocalSchedule {
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            lr: self.config.lr_at(round),
            rule: self.config.step_rule,
        }
    }

    /// Local work of client `id` in (0-based) training round `round`,
    /// starting from `start`.
    pub fn client_update(&self, id: usize, round: usize, start: ParamVector) -> Result<ClientResult> {
        let client = &self.clients[id];
        let schedule = self.schedule(round);
        let frozen = self.frozen();
        let mut r = rng::stream(self.config.seed, &[purpose::SHUFFLE, round as u64, id as u64]);
        let data = &self.train;
        let idx = &client.train;
        let (params, gating) = match &self.state.server {
            ServerState::Niw { global } => {
                let (m, _) = niw::niw_local_train(
                    start,
                    data,
                    idx,
                    global,
                    self.config.p_keep,
                    &self.arch,
                    &schedule,
                    frozen.as_ref(),
                    &mut r,
                )?;
                (m, None)
            }
            ServerState::Mixture { global } => {
                let (m, _) = mixture::mix_local_train(start, data, idx, global, &self.arch, &schedule, frozen.as_ref(), &mut r)?;
                let gating_arch = self.gating_arch.as_ref().unwrap();
                let gating_frozen = self.gating_frozen();
                let mut beta = global.gating.clone();
                let mut gr = rng::stream(self.config.seed, &[purpose::SHUFFLE, round as u64, id as u64, 1]);
                for _ in 0..schedule.epochs {
                    for b in crate::data::minibatches(idx, schedule.batch_size, &mut gr) {
                        mixture::gating_local_update(
                            &mut beta,
                            gating_arch,
                            &data.batch(&b),
                            &m,
                            &global.prototypes,
                            schedule.lr,
                            gating_frozen.as_ref(),
                        )?;
                    }
                }
                (m, Some(beta))
            }
            ServerState::Average { params: global } => {
                let mut m = start;
                let mu = match self.config.strategy {
                    Strategy::FedProx => self.config.mu_prox,
                    _ => 0.0,
                };
                optim::run_epochs(&mut m, data, idx, &schedule, frozen.as_ref(), &mut r, |m, batch, _| {
                    fedprox_client_objective(m, batch, global, mu, &self.arch)
                })?;
                (m, None)
            }
        };
        let train_loss = nn::mean_loss(&params, &self.arch, &data.batch(idx))?;
        Ok(ClientResult {
            id,
            params,
            gating,
            train_loss,
        })
    }

    fn restore_frozen(&self, new: &mut [f64], old: &[f64], range: &Option<Range<usize>>) {
        if let Some(r) = range {
            new[r.clone()].copy_from_slice(&old[r.clone()]);
        }
    }

    /// Applies the strategy's server step to participant results (in the
    /// given order). Returns the new state and the logged server objective.
    pub fn server_update(&self, results: &[ClientResult]) -> Result<(ServerState, f64)> {
        let n = self.config.num_clients;
        let frozen = self.frozen();
        let means: Vec<ParamVector> = results.iter().map(|r| r.params.clone()).collect();
        Ok(match &self.state.server {
            ServerState::Niw { global } => {
                let hyper = self.hyper.as_ref().unwrap();
                let (mut m0, mut v0) =
                    niw::niw_server_update(&means, global, hyper, n, self.config.p_keep, self.config.epsilon)?;
                self.restore_frozen(&mut m0, &global.m0, &frozen);
                self.restore_frozen(&mut v0, &global.v0_diag, &frozen);
                let obj = niw::niw_server_objective(
                    &m0,
                    &v0,
                    &means,
                    hyper,
                    global.n0,
                    n,
                    self.config.p_keep,
                    self.config.epsilon,
                )?;
                let global = NiwGlobalPosterior {
                    m0,
                    v0_diag: v0,
                    ..global.clone()
                };
                (ServerState::Niw { global }, obj)
            }
            ServerState::Mixture { global } => {
                let resp = mixture::mix_e_step(&means, &global.prototypes, global.sigma_sq)?;
                let mut prototypes = mixture::mix_m_step(&means, &resp, global.sigma_sq, n)?;
                for (new, old) in prototypes.iter_mut().zip(&global.prototypes) {
                    self.restore_frozen(new, old, &frozen);
                }
                let betas: Vec<ParamVector> = results.iter().map(|r| r.gating.clone().unwrap()).collect();
                let mut gating = fedavg_aggregate(&betas)?;
                self.restore_frozen(&mut gating, &global.gating, &self.gating_frozen());
                let obj = mixture::mix_server_objective_partial(&prototypes, &means, global.sigma_sq, n);
                let global = MixtureGlobalPosterior {
                    prototypes,
                    gating,
                    ..global.clone()
                };
                (ServerState::Mixture { global }, obj)
            }
            ServerState::Average { params } => {
                let mut avg = fedavg_aggregate(&means)?;
                self.restore_frozen(&mut avg, params, &frozen);
                let mean_loss = results.iter().map(|r| r.train_loss).sum::<f64>() / results.len() as f64;
                (ServerState::Average { params: avg }, mean_loss)
            }
        })
    }

    /// Predictive used for global evaluation after `round` completed rounds.
    pub fn predictor(&self, round: usize) -> Result<Predictor<'_>> {
        Predictor::new(
            &self.state.server,
            &self.arch,
            self.gating_arch.as_ref(),
            self.config.eval_samples,
            &mut rng::stream(self.config.seed, &[purpose::EVAL, round as u64]),
        )
    }

    /// Top-1 accuracy of the strategy's global predictive on the test set.
    pub fn evaluate_global(&self) -> Result<f64> {
        let p = self.predictor(self.state.round)?;
        let all: Vec<usize> = (0..self.test.len()).collect();
        p.accuracy(&self.test, &all)
    }

    fn evaluate_now(&self, round: usize) -> Result<Option<f64>> {
        let every = self.config.eval_every;
        let due = round == 0 || round == self.config.rounds || (every > 0 && round % every == 0);
        if due {
            self.evaluate_global().map(Some)
        } else {
            Ok(None)
        }
    }

    fn initial_record(&self) -> Result<RoundRecord> {
        let start = self.server_start();
        let losses: Vec<f64> = self
            .clients
            .par_iter()
            .map(|c| nn::mean_loss(&start, &self.arch, &self.train.batch(&c.train)))
            .collect::<Result<_>>()?;
        Ok(RoundRecord {
            round: 0,
            participants: Vec::new(),
            global_acc: self.evaluate_now(0)?,
            mean_client_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            server_objective: None,
            objective: None,
            wall_ms: 0,
        })
    }

    /// Runs one training round and records its metrics.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let timer = Instant::now();
        let t = self.state.round;
        let mut pr = rng::stream(self.config.seed, &[purpose::PARTICIPANTS, t as u64]);
        let ids = sample_participants(self.config.num_clients, self.config.fraction, &mut pr)?;
        let results: Vec<ClientResult> = ids
            .par_iter()
            .map(|&id| {
                self.client_update(id, t, self.start_for(id)).map_err(|e| Error::Client {
                    round: t + 1,
                    client: id,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let (server, server_obj) = self.server_update(&results)?;

        let scale = self.config.num_clients as f64 / results.len() as f64;
        let data_term: f64 = results
            .iter()
            .map(|r| self.clients[r.id].train.len() as f64 * r.train_loss)
            .sum::<f64>()
            * scale;
        let objective = match server {
            ServerState::Average { .. } => data_term,
            _ => data_term + server_obj,
        } / self.total_train as f64;
        let mean_client_loss = results.iter().map(|r| r.train_loss).sum::<f64>() / results.len() as f64;

        self.state.server = server;
        if self.config.warm_start == WarmStart::Retained {
            for r in &results {
                self.state.retained[r.id] = Some(r.params.clone());
            }
        }
        self.state.round = t + 1;
        let global_acc = self.evaluate_now(t + 1)?;
        let wall_ms = if self.config.record_wall_time {
            timer.elapsed().as_millis() as u64
        } else {
            0
        };
        self.state.records.push(RoundRecord {
            round: t + 1,
            participants: ids,
            global_acc,
            mean_client_loss,
            server_objective: Some(server_obj),
            objective: Some(objective),
            wall_ms,
        });
        Ok(self.state.records.last().unwrap())
    }

    /// Runs the remaining rounds, calling `on_round` after each.
    pub fn run<F: FnMut(&Simulation) -> Result<()>>(&mut self, mut on_round: F) -> Result<()> {
        while !self.is_finished() {
            self.run_round()?;
            on_round(self)?;
        }
        Ok(())
    }

    /// Personalized model of client `id` trained for `epochs` on its
    /// training split.
    pub fn personalize(&self, id: usize, epochs: usize) -> Result<ParamVector> {
        let client = &self.clients[id];
        let schedule = LocalSchedule {
            epochs,
            batch_size: self.config.batch_size,
            lr: self.config.personal_lr(),
            rule: self.config.step_rule,
        };
        let mut r = rng::stream(self.config.seed, &[purpose::PERSONALIZE, id as u64]);
        let data = &self.train;
        match &self.state.server {
            ServerState::Niw { global } => {
                niw::niw_personalize(data, &client.train, global, self.config.p_keep, &self.arch, &schedule, &mut r)
            }
            ServerState::Mixture { global } => mixture::mix_personalize(
                data,
                &client.train,
                global,
                &self.arch,
                self.gating_arch.as_ref().unwrap(),
                &schedule,
                self.config.mix_warm_start,
                &mut r,
            ),
            ServerState::Average { params } => {
                let mu = match self.config.strategy {
                    Strategy::FedProx => self.config.mu_prox,
                    _ => 0.0,
                };
                let mut m = params.clone();
                optim::run_epochs(&mut m, data, &client.train, &schedule, None, &mut r, |m, batch, _| {
                    fedprox_client_objective(m, batch, params, mu, &self.arch)
                })?;
                Ok(m)
            }
        }
    }

    /// Personalizes every client with a non-empty test split and reports
    /// accuracy on those splits, next to the global predictive's accuracy
    /// on the same splits.
    pub fn evaluate_personalized(&self, epochs: usize) -> Result<PersonalizationReport> {
        let predictor = self.predictor(self.state.round)?;
        let rows: Vec<(usize, f64, f64)> = self
            .clients
            .par_iter()
            .filter(|c| !c.test.is_empty())
            .map(|c| {
                let m = self.personalize(c.id, epochs)?;
                let personal = accuracy(&m, &self.arch, &self.train, &c.test)?;
                let global = predictor.accuracy(&self.train, &c.test)?;
                Ok((c.id, personal, global))
            })
            .collect::<Result<_>>()?;
        Ok(PersonalizationReport::from_rows(epochs, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fraction_selects_everyone() {
        let ids = sample_participants(7, 1.0, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn tenth_of_hundred_is_ten_distinct() {
        let ids = sample_participants(100, 0.1, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(ids.len(), 10);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_participants_is_config_error() {
        let err = sample_participants(5, 0.1, &mut rng::stream(3, &[])).unwrap_err();
        assert!(err.to_string().contains("N_f must be"), "{err}");
    }

    #[test]
    fn participation_is_uniform() {
        let mut counts = [0usize; 10];
        let mut r = rng::stream(4, &[]);
        let draws = 10_000;
        for _ in 0..draws {
            for id in sample_participants(10, 0.3, &mut r).unwrap() {
                counts[id] += 1;
            }
        }
        let p: f64 = 0.3;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 4.0 * sd, "{counts:?}");
        }
    }
}
