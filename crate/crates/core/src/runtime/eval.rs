use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ServerState;
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::mixture::{self, MixtureGlobalPosterior};
use crate::niw;
use crate::nn::{self, Batch, Matrix, MlpArch, ParamVector};
use crate::rng::Rng;

const EVAL_CHUNK: usize = 500;

/// A strategy's global predictive distribution with any random draws fixed.
pub enum Predictor<'a> {
    Model { params: &'a ParamVector, arch: &'a MlpArch },
    Samples { draws: Vec<ParamVector>, arch: &'a MlpArch },
    Mixture {
        global: &'a MixtureGlobalPosterior,
        arch: &'a MlpArch,
        gating_arch: &'a MlpArch,
    },
}

impl<'a> Predictor<'a> {
    pub fn new(
        server: &'a ServerState,
        arch: &'a MlpArch,
        gating_arch: Option<&'a MlpArch>,
        samples: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match server {
            ServerState::Average { params } => Predictor::Model { params, arch },
            ServerState::Niw { global } => Predictor::Samples {
                draws: (0..samples.max(1))
                    .map(|_| niw::niw_sample_global(global, rng))
                    .collect::<Result<_>>()?,
                arch,
            },
            ServerState::Mixture { global } => Predictor::Mixture {
                global,
                arch,
                gating_arch: gating_arch.expect("mixture predictor needs a gating architecture"),
            },
        })
    }

    /// Class probabilities for every row of `batch`.
    pub fn predict(&self, batch: &Batch) -> Result<Matrix> {
        match self {
            Predictor::Model { params, arch } => Ok(nn::softmax_rows(&nn::forward(params, arch, batch, None)?)),
            Predictor::Samples { draws, arch } => {
                let mut acc = Matrix::zeros(batch.len(), arch.num_classes());
                for theta in draws {
                    let p = nn::softmax_rows(&nn::forward(theta, arch, batch, None)?);
                    for (a, v) in acc.data.iter_mut().zip(&p.data) {
                        *a += v;
                    }
                }
                let inv = 1.0 / draws.len() as f64;
                acc.data.iter_mut().for_each(|a| *a *= inv);
                Ok(acc)
            }
            Predictor::Mixture {
                global,
                arch,
                gating_arch,
            } => mixture::mix_global_predict(batch, global, arch, gating_arch),
        }
    }

    /// Top-1 accuracy over the given rows (0 for an empty list).
    pub fn accuracy(&self, data: &LabeledDataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let correct: usize = indices
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let batch = data.batch(chunk);
                let pred = self.predict(&batch)?.argmax_rows();
                Ok(pred.iter().zip(batch.labels()).filter(|(p, y)| p == y).count())
            })
            .collect::<Result<Vec<usize>>>()?
            .into_iter()
            .sum();
        Ok(correct as f64 / indices.len() as f64)
    }
}

/// Top-1 accuracy of a single model.
pub fn accuracy(params: &ParamVector, arch: &MlpArch, data: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    Predictor::Model { params, arch }.accuracy(data, indices)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub epochs: usize,
    /// `(client id, personalized accuracy, global-predictive accuracy)` on
    /// each client's test split.
    pub clients: Vec<(usize, f64, f64)>,
    pub mean: f64,
    pub std: f64,
    pub global_mean: f64,
}

impl PersonalizationReport {
    pub(crate) fn from_rows(epochs: usize, clients: Vec<(usize, f64, f64)>) -> Self {
        let n = clients.len().max(1) as f64;
        let mean = clients.iter().map(|c| c.1).sum::<f64>() / n;
        let var = clients.iter().map(|c| (c.1 - mean).powi(2)).sum::<f64>() / n;
        let global_mean = clients.iter().map(|c| c.2).sum::<f64>() / n;
        Self {
            epochs,
            clients,
            mean,
            std: var.sqrt(),
            global_mean,
        }
    }
}
