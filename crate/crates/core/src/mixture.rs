//! K-prototype mixture model with a gating network.
//!
//! Clients are pulled toward the nearest of K prototypes through a
//! log-sum-exp penalty; the server runs one EM step over the participants'
//! means, and a gating network routes test inputs to the prototypes.

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{minibatches, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{self, log_sum_exp, Batch, Matrix, MlpArch, ParamVector};
use crate::optim::{self, LocalSchedule, Objective, PullWeight, QuadraticPull, StepRule};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureGlobalPosterior {
    pub prototypes: Vec<ParamVector>,
    pub sigma_sq: f64,
    pub epsilon: f64,
    /// Parameters of the gating network (backbone shape with K outputs).
    pub gating: ParamVector,
}

impl MixtureGlobalPosterior {
    pub fn k(&self) -> usize {
        self.prototypes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixClientPosterior {
    pub m: ParamVector,
    pub epsilon: f64,
}

/// Row-stochastic client-to-prototype assignment `c(j|i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub c: Vec<Vec<f64>>,
}

/// How a personalization run picks its starting prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixWarmStart {
    /// Nearest prototype to a proxy obtained by one epoch of plain
    /// fine-tuning from the gating-weighted prototype average.
    #[default]
    Nearest,
    /// Train from every prototype and keep the lowest final training loss.
    BestOfAll,
}

/// Prototypes `base + jitter * N(0, I)` on every non-frozen coordinate.
pub fn init_prototypes(
    base: &ParamVector,
    k: usize,
    jitter: f64,
    frozen: Option<&Range<usize>>,
    rng: &mut Rng,
) -> Result<Vec<ParamVector>> {
    if k == 0 {
        return Err(Error::Config("mixture needs K >= 1".into()));
    }
    Ok((0..k)
        .map(|_| {
            let mut r = base.clone();
            for (i, v) in r.iter_mut().enumerate() {
                if !frozen.is_some_and(|f| f.contains(&i)) {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += jitter * z;
                }
            }
            r
        })
        .collect())
}

fn scaled_neg_dists(m: &[f64], prototypes: &[ParamVector], sigma_sq: f64) -> Vec<f64> {
    prototypes.iter().map(|r| -r.dist_sq(m) / (2.0 * sigma_sq)).collect()
}

fn softmax(mut logits: Vec<f64>) -> Vec<f64> {
    nn::softmax_in_place(&mut logits);
    logits
}

/// `-log sum_j exp(-|m - r_j|^2 / 2 sigma^2)` and its gradient
/// `sum_j w_j (m - r_j) / sigma^2` with softmax weights `w`.
pub fn mix_penalty(m: &[f64], prototypes: &[ParamVector], sigma_sq: f64) -> Result<(f64, ParamVector)> {
    let (value, anchor) = penalty_anchor(m, prototypes, sigma_sq)?;
    let grad: Vec<f64> = m.iter().zip(&anchor).map(|(x, a)| (x - a) / sigma_sq).collect();
    Ok((value, grad.into()))
}

/// Penalty value and the softmax-weighted prototype average at `m`.
fn penalty_anchor(m: &[f64], prototypes: &[ParamVector], sigma_sq: f64) -> Result<(f64, Vec<f64>)> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype list"));
    }
    for r in prototypes {
        nn::check_len("prototype", m.len(), r.len())?;
    }
    let logits = scaled_neg_dists(m, prototypes, sigma_sq);
    let value = -log_sum_exp(&logits);
    let w = softmax(logits);
    let mut anchor = vec![0.0; m.len()];
    for (r, wj) in prototypes.iter().zip(&w) {
        if *wj != 0.0 {
            for (a, x) in anchor.iter_mut().zip(r.iter()) {
                *a += wj * x;
            }
        }
    }
    Ok((value, anchor))
}

/// Minibatch client objective: mean cross-entropy at `m` plus
/// `mix_penalty(m) / |D_i|`. The penalty gradient is expressed as a pull of
/// weight `1/(sigma^2 |D_i|)` toward the softmax-weighted prototype average.
pub fn mix_client_objective(
    m: &[f64],
    batch: &Batch,
    global: &MixtureGlobalPosterior,
    data_size: usize,
    arch: &MlpArch,
) -> Result<Objective> {
    if data_size == 0 {
        return Err(Error::Empty("client data"));
    }
    let (penalty, anchor) = penalty_anchor(m, &global.prototypes, global.sigma_sq)?;
    let (data_loss, data_grad) = nn::loss_and_grad(m, arch, batch, None)?;
    let inv = 1.0 / data_size as f64;
    Ok(Objective {
        loss: data_loss + inv * penalty,
        data_loss,
        data_grad,
        pull: Some(QuadraticPull {
            anchor,
            weight: PullWeight::Scalar(inv / global.sigma_sq),
        }),
    })
}

pub fn mix_client_loss_grad(
    client: &MixClientPosterior,
    batch: &Batch,
    global: &MixtureGlobalPosterior,
    data_size: usize,
    arch: &MlpArch,
) -> Result<(f64, ParamVector)> {
    let obj = mix_client_objective(&client.m, batch, global, data_size, arch)?;
    Ok((obj.loss, obj.total_grad(&client.m)))
}

/// `c(j|i) = softmax_j(-|m_i - r_j|^2 / 2 sigma^2)`.
pub fn mix_e_step(client_means: &[ParamVector], prototypes: &[ParamVector], sigma_sq: f64) -> Result<Responsibilities> {
    if client_means.is_empty() || prototypes.is_empty() {
        return Err(Error::Empty("E-step input"));
    }
    let c = client_means
        .iter()
        .map(|m| softmax(scaled_neg_dists(m, prototypes, sigma_sq)))
        .collect();
    Ok(Responsibilities { c })
}

/// `r_j = (1/N_f sum_i c_ij m_i) / (sigma^2/N + 1/N_f sum_i c_ij)`.
pub fn mix_m_step(
    client_means: &[ParamVector],
    resp: &Responsibilities,
    sigma_sq: f64,
    total_clients: usize,
) -> Result<Vec<ParamVector>> {
    let nf = client_means.len();
    if nf == 0 {
        return Err(Error::Empty("M-step input"));
    }
    nn::check_len("responsibility rows", nf, resp.c.len())?;
    let k = resp.c[0].len();
    let d = client_means[0].len();
    let inv_nf = 1.0 / nf as f64;
    (0..k)
        .map(|j| {
            let mut num = vec![0.0; d];
            let mut mass = 0.0;
            for (m, row) in client_means.iter().zip(&resp.c) {
                nn::check_len("client mean", d, m.len())?;
                let c = row[j];
                mass += c;
                for (acc, x) in num.iter_mut().zip(m.iter()) {
                    *acc += c * x;
                }
            }
            let denom = sigma_sq / total_clients as f64 + inv_nf * mass;
            Ok(num.into_iter().map(|v| inv_nf * v / denom).collect::<Vec<_>>().into())
        })
        .collect()
}

/// `1/2 sum_j |r_j|^2 - sum_i log sum_j exp(-|m_i - r_j|^2 / 2 sigma^2)`.
pub fn mix_server_objective(prototypes: &[ParamVector], client_means: &[ParamVector], sigma_sq: f64) -> f64 {
    mix_server_objective_partial(prototypes, client_means, sigma_sq, client_means.len())
}

/// The server objective with the client sum scaled by `N / N_f`; this is
/// what the partial-participation M-step decreases.
pub fn mix_server_objective_partial(
    prototypes: &[ParamVector],
    client_means: &[ParamVector],
    sigma_sq: f64,
    total_clients: usize,
) -> f64 {
    let prior: f64 = prototypes.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum();
    let fit: f64 = client_means
        .iter()
        .map(|m| log_sum_exp(&scaled_neg_dists(m, prototypes, sigma_sq)))
        .sum();
    let scale = if client_means.is_empty() {
        0.0
    } else {
        total_clients as f64 / client_means.len() as f64
    };
    0.5 * prior - scale * fit
}

/// Index of the closest prototype; ties go to the lowest index.
pub fn nearest_prototype(m: &[f64], prototypes: &[ParamVector]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, r) in prototypes.iter().enumerate() {
        let d = r.dist_sq(m);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// One SGD step of the gating network toward the constant label of the
/// prototype nearest to `m`. Frozen coordinates are left as they are.
#[allow(clippy::too_many_arguments)]
pub fn gating_local_update(
    beta: &mut ParamVector,
    gating_arch: &MlpArch,
    inputs: &Batch,
    m: &[f64],
    prototypes: &[ParamVector],
    lr: f64,
    frozen: Option<&Range<usize>>,
) -> Result<f64> {
    if gating_arch.num_classes() != prototypes.len() {
        return Err(Error::Config(format!(
            "gating network has {} outputs for {} prototypes",
            gating_arch.num_classes(),
            prototypes.len()
        )));
    }
    let target = inputs.relabel(nearest_prototype(m, prototypes));
    let (loss, grad) = nn::loss_and_grad(beta, gating_arch, &target, None)?;
    optim::local_step(beta, &grad, None, lr, StepRule::Explicit, frozen)?;
    Ok(loss)
}

/// Gating softmax `g(x)` for every row of `inputs`.
pub fn gating_probs(global: &MixtureGlobalPosterior, gating_arch: &MlpArch, inputs: &Batch) -> Result<Matrix> {
    Ok(nn::softmax_rows(&nn::forward(&global.gating, gating_arch, inputs, None)?))
}

/// `sum_j g_j(x) softmax(f(x; r_j))` per row.
pub fn mix_global_predict(
    inputs: &Batch,
    global: &MixtureGlobalPosterior,
    arch: &MlpArch,
    gating_arch: &MlpArch,
) -> Result<Matrix> {
    let gates = gating_probs(global, gating_arch, inputs)?;
    let mut out = Matrix::zeros(inputs.len(), arch.num_classes());
    for (j, r) in global.prototypes.iter().enumerate() {
        let probs = nn::softmax_rows(&nn::forward(r, arch, inputs, None)?);
        for row in 0..inputs.len() {
            let g = gates.row(row)[j];
            for (o, p) in out.row_mut(row).iter_mut().zip(probs.row(row)) {
                *o += g * p;
            }
        }
    }
    Ok(out)
}

/// Local training under the mixture objective from `start`.
#[allow(clippy::too_many_arguments)]
pub fn mix_local_train(
    start: ParamVector,
    data: &LabeledDataset,
    indices: &[usize],
    global: &MixtureGlobalPosterior,
    arch: &MlpArch,
    schedule: &LocalSchedule,
    frozen: Option<&Range<usize>>,
    rng: &mut Rng,
) -> Result<(ParamVector, optim::EpochStats)> {
    let mut m = start;
    let n = indices.len();
    let stats = optim::run_epochs(&mut m, data, indices, schedule, frozen, rng, |m, batch, _| {
        mix_client_objective(m, batch, global, n, arch)
    })?;
    Ok((m, stats))
}

/// Gating-weighted average of the prototypes, weights averaged over rows.
fn gated_average(
    data: &LabeledDataset,
    indices: &[usize],
    global: &MixtureGlobalPosterior,
    gating_arch: &MlpArch,
) -> Result<ParamVector> {
    let gates = gating_probs(global, gating_arch, &data.batch(indices))?;
    let mut w = vec![0.0; global.k()];
    for r in 0..gates.rows {
        for (acc, g) in w.iter_mut().zip(gates.row(r)) {
            *acc += g;
        }
    }
    let d = global.prototypes[0].len();
    let mut avg = vec![0.0; d];
    for (r, wj) in global.prototypes.iter().zip(&w) {
        let wj = wj / gates.rows as f64;
        for (a, x) in avg.iter_mut().zip(r.iter()) {
            *a += wj * x;
        }
    }
    Ok(avg.into())
}

/// Prototype index a personalization run starts from under
/// [`MixWarmStart::Nearest`].
pub fn personalization_start(
    data: &LabeledDataset,
    indices: &[usize],
    global: &MixtureGlobalPosterior,
    arch: &MlpArch,
    gating_arch: &MlpArch,
    schedule: &LocalSchedule,
    rng: &mut Rng,
) -> Result<usize> {
    if global.k() == 1 {
        return Ok(0);
    }
    let mut proxy = gated_average(data, indices, global, gating_arch)?;
    for idx in minibatches(indices, schedule.batch_size, rng) {
        let (_, grad) = nn::loss_and_grad(&proxy, arch, &data.batch(&idx), None)?;
        nn::sgd_step_in_place(&mut proxy, &grad, schedule.lr)?;
    }
    Ok(nearest_prototype(&proxy, &global.prototypes))
}

/// Personalized model: the client objective (penalty scaled by `1/|D^p|`)
/// minimized from the chosen prototype, every parameter trainable.
#[allow(clippy::too_many_arguments)]
pub fn mix_personalize(
    data: &LabeledDataset,
    indices: &[usize],
    global: &MixtureGlobalPosterior,
    arch: &MlpArch,
    gating_arch: &MlpArch,
    schedule: &LocalSchedule,
    warm: MixWarmStart,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if indices.is_empty() {
        return Err(Error::Empty("personalization data"));
    }
    match warm {
        MixWarmStart::Nearest => {
            let j = personalization_start(data, indices, global, arch, gating_arch, schedule, rng)?;
            mix_local_train(global.prototypes[j].clone(), data, indices, global, arch, schedule, None, rng)
                .map(|(m, _)| m)
        }
        MixWarmStart::BestOfAll => {
            let all = data.batch(indices);
            let mut best: Option<(f64, ParamVector)> = None;
            for r in &global.prototypes {
                let (m, _) = mix_local_train(r.clone(), data, indices, global, arch, schedule, None, rng)?;
                let loss = nn::mean_loss(&m, arch, &all)?;
                if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                    best = Some((loss, m));
                }
            }
            Ok(best.unwrap().1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from(v.to_vec())
    }

    #[test]
    fn single_prototype_penalty_is_quadratic() {
        let m = [0.5, -1.0, 2.0];
        let r = pv(&[1.0, 1.0, 1.0]);
        let (v, g) = mix_penalty(&m, &[r.clone()], 0.1).unwrap();
        assert!((v - r.dist_sq(&m) / 0.2).abs() < 1e-12);
        for k in 0..3 {
            assert!((g[k] - (m[k] - r[k]) / 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn equidistant_penalty_subtracts_ln_k() {
        let protos = [pv(&[1.0, 0.0]), pv(&[-1.0, 0.0]), pv(&[0.0, 1.0])];
        let (v, _) = mix_penalty(&[0.0, 0.0], &protos, 0.5).unwrap();
        assert!((v - (1.0 / 1.0 - 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn e_step_hand_example() {
        let c = mix_e_step(&[pv(&[0.0])], &[pv(&[-1.0]), pv(&[3.0])], 0.5).unwrap();
        let want = 1.0 / (1.0 + (-8f64).exp());
        assert!((c.c[0][0] - want).abs() < 1e-15);
        assert!((c.c[0][0] + c.c[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn e_step_cold_limit_is_one_hot() {
        let c = mix_e_step(&[pv(&[0.1, 0.0])], &[pv(&[1.0, 0.0]), pv(&[0.0, 0.0])], 1e-6).unwrap();
        assert!(c.c[0][1] > 1.0 - 1e-9);
    }

    #[test]
    fn m_step_single_prototype_hand_example() {
        let ms = [pv(&[1.0, 0.0]), pv(&[0.0, 1.0])];
        let c = Responsibilities {
            c: vec![vec![1.0], vec![1.0]],
        };
        let r = mix_m_step(&ms, &c, 0.1, 2).unwrap();
        for k in 0..2 {
            assert!((r[0][k] - 1.0 / 2.1).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_assignment_uses_own_cluster_only() {
        let ms = [pv(&[1.0]), pv(&[3.0]), pv(&[-2.0])];
        let c = Responsibilities {
            c: vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        };
        let r = mix_m_step(&ms, &c, 0.1, 3).unwrap();
        assert!((r[0][0] - 4.0 / 2.1).abs() < 1e-12);
        assert!((r[1][0] - (-2.0 / 1.1)).abs() < 1e-12);
    }

    #[test]
    fn zero_objective_is_minus_n_ln_k() {
        let protos = vec![ParamVector::zeros(3); 4];
        let ms = vec![ParamVector::zeros(3); 5];
        assert!((mix_server_objective(&protos, &ms, 0.1) + 5.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stabilized_for_huge_distances() {
        let (v, g) = mix_penalty(&[1e8], &[pv(&[0.0]), pv(&[-1e8])], 0.1).unwrap();
        assert!(v.is_finite() && g[0].is_finite());
        assert!(mix_server_objective(&[pv(&[0.0])], &[pv(&[1e8])], 0.1).is_finite());
    }

    #[test]
    fn nearest_breaks_ties_low() {
        assert_eq!(nearest_prototype(&[0.0], &[pv(&[1.0]), pv(&[-1.0])]), 0);
        assert_eq!(nearest_prototype(&[0.0], &[pv(&[5.0]), pv(&[0.0]), pv(&[9.0])]), 1);
    }

    #[test]
    fn prototype_jitter_skips_frozen() {
        let base = ParamVector::filled(6, 0.5);
        let r = init_prototypes(&base, 3, 0.01, Some(&(4..6)), &mut rng::stream(1, &[])).unwrap();
        for p in &r {
            assert_eq!(&p[4..], &[0.5, 0.5]);
            assert!(p[..4].iter().any(|&v| v != 0.5));
        }
        assert_ne!(r[0], r[1]);
    }

    #[test]
    fn single_prototype_prediction_is_plain_softmax() {
        let arch = MlpArch::new(vec![2, 3, 3]).unwrap();
        let gating_arch = arch.with_outputs(1).unwrap();
        let mut r = rng::stream(2, &[]);
        let proto = nn::init_params(&arch, &mut r);
        let global = MixtureGlobalPosterior {
            prototypes: vec![proto.clone()],
            sigma_sq: 0.1,
            epsilon: 1e-4,
            gating: nn::init_params(&gating_arch, &mut r),
        };
        let x = Batch::new(vec![0.2, 0.8, 0.5, 0.1], vec![0, 0], 2).unwrap();
        let p = mix_global_predict(&x, &global, &arch, &gating_arch).unwrap();
        let q = nn::softmax_rows(&nn::forward(&proto, &arch, &x, None).unwrap());
        for (a, b) in p.data.iter().zip(&q.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
