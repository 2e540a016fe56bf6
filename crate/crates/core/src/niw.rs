//! Normal-Inverse-Wishart hierarchical model with a diagonal scale matrix.
//!
//! Clients hold MC-dropout posteriors around a mean `m_i`; the server holds
//! an NIW over the shared Gaussian `(mu, Sigma)` with location `m0`,
//! diagonal scale `v0` and fixed strengths `l0`, `n0`.

use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Batch, Matrix, MlpArch, ParamVector};
use crate::optim::{self, LocalSchedule, Objective, PullWeight, QuadraticPull};
use crate::rng::Rng;

/// Lower bound applied to every server-side variance.
pub const V_MIN: f64 = 1e-8;

/// Prior `NIW(mu0, sigma0, lambda0, nu0)` over the shared Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwHyperParams {
    pub mu0: Vec<f64>,
    pub sigma0_diag: Vec<f64>,
    pub lambda0: f64,
    pub nu0: f64,
}

impl NiwHyperParams {
    /// `mu0 = 0`, `Sigma0 = I`, `lambda0 = 1`, `nu0 = d + 2`.
    pub fn standard(d: usize) -> Self {
        Self {
            mu0: vec![0.0; d],
            sigma0_diag: vec![1.0; d],
            lambda0: 1.0,
            nu0: d as f64 + 2.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        nn::check_len("prior scale", d, self.sigma0_diag.len())?;
        if d == 0 {
            return Err(Error::Config("NIW prior needs d >= 1".into()));
        }
        if !(self.lambda0 > 0.0) {
            return Err(Error::Config(format!("lambda0 must be > 0, got {}", self.lambda0)));
        }
        if !(self.nu0 > d as f64 + 1.0) {
            return Err(Error::Config(format!("nu0 must exceed d + 1 = {}, got {}", d + 1, self.nu0)));
        }
        if self.sigma0_diag.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("prior scale entries must be > 0".into()));
        }
        Ok(())
    }
}

/// Server posterior `NIW(m0, diag(v0), l0, n0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwGlobalPosterior {
    pub m0: ParamVector,
    pub v0_diag: Vec<f64>,
    pub l0: f64,
    pub n0: f64,
    pub d: usize,
}

/// Client MC-dropout posterior: each weight column is `m_i` with
/// probability `p_keep` and zero otherwise, blurred by `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiwClientPosterior {
    pub m: ParamVector,
    pub p_keep: f64,
    pub epsilon: f64,
}

/// Conjugacy heuristic: `l0 = |D| + lambda0`, `n0 = |D| + nu0`, with the
/// location and scale starting at the prior's.
pub fn niw_init(d: usize, total_data_size: usize, hyper: &NiwHyperParams) -> Result<NiwGlobalPosterior> {
    hyper.validate()?;
    nn::check_len("NIW prior", d, hyper.dim())?;
    Ok(NiwGlobalPosterior {
        m0: ParamVector::from(hyper.mu0.clone()),
        v0_diag: hyper.sigma0_diag.clone(),
        l0: total_data_size as f64 + hyper.lambda0,
        n0: total_data_size as f64 + hyper.nu0,
        d,
    })
}

impl NiwGlobalPosterior {
    /// Degrees of freedom of the Student-t predictive.
    pub fn dof(&self) -> f64 {
        self.n0 - self.d as f64 + 1.0
    }

    fn check_floor(&self) -> Result<()> {
        match self.v0_diag.iter().position(|&v| !(v >= V_MIN)) {
            Some(index) => Err(Error::VarianceFloor {
                index,
                value: self.v0_diag[index],
                floor: V_MIN,
            }),
            None => Ok(()),
        }
    }

    /// Per-coordinate weight of the client penalty for a client with
    /// `data_size` rows: `p (n0 + d + 1) / (|D_i| v0_k)`.
    pub fn pull(&self, p_keep: f64, data_size: usize) -> Result<QuadraticPull> {
        self.check_floor()?;
        if data_size == 0 {
            return Err(Error::Empty("client data"));
        }
        let coef = p_keep * (self.n0 + self.d as f64 + 1.0) / data_size as f64;
        Ok(QuadraticPull {
            anchor: self.m0.to_vec(),
            weight: PullWeight::PerCoord(self.v0_diag.iter().map(|v| coef / v).collect()),
        })
    }
}

/// Minibatch client objective at `m` with a fixed dropout mask: mean
/// cross-entropy at the masked parameters plus the penalty
/// `(p/2)(n0+d+1)/|D_i| * sum_k (m_k - m0_k)^2 / v0_k`.
pub fn niw_client_objective(
    m: &[f64],
    batch: &Batch,
    global: &NiwGlobalPosterior,
    p_keep: f64,
    data_size: usize,
    arch: &MlpArch,
    mask: &nn::DropoutMask,
) -> Result<Objective> {
    let pull = global.pull(p_keep, data_size)?;
    let (data_loss, data_grad) = nn::loss_and_grad(m, arch, batch, Some(mask))?;
    Ok(Objective {
        loss: data_loss + pull.value(m),
        data_loss,
        data_grad,
        pull: Some(pull),
    })
}

/// Loss and gradient of the client objective with a freshly sampled mask.
pub fn niw_client_loss_grad(
    client: &NiwClientPosterior,
    batch: &Batch,
    global: &NiwGlobalPosterior,
    data_size: usize,
    arch: &MlpArch,
    rng: &mut Rng,
) -> Result<(f64, ParamVector)> {
    let mask = nn::sample_dropout_mask(client.p_keep, arch, rng);
    let obj = niw_client_objective(&client.m, batch, global, client.p_keep, data_size, arch, &mask)?;
    let grad = obj.total_grad(&client.m);
    Ok((obj.loss, grad))
}

/// `rho_k = p m_k^2 - 2 p m0_k m_k + m0_k^2`.
#[inline]
pub fn rho(m0: f64, m: f64, p: f64) -> f64 {
    p * m * m - 2.0 * p * m0 * m + m0 * m0
}

fn participation_scale(client_means: &[ParamVector], total_clients: usize, d: usize) -> Result<f64> {
    if client_means.is_empty() {
        return Err(Error::Empty("participant list"));
    }
    if total_clients < client_means.len() {
        return Err(Error::Config(format!(
            "{} participants but only {total_clients} clients",
            client_means.len()
        )));
    }
    for m in client_means {
        nn::check_len("client mean", d, m.len())?;
    }
    Ok(total_clients as f64 / client_means.len() as f64)
}

/// Closed-form server step. Participant sums are scaled by `N / N_f`, so
/// with the standard prior this is
/// `m0 = p/(N+1) * N/N_f * sum_i m_i` and
/// `v0 = n0/(N+d+2) * [(1 + N eps^2) + m0^2 + N/N_f * sum_i rho(m0, m_i, p)]`,
/// floored at [`V_MIN`]. `l0` and `n0` stay fixed.
pub fn niw_server_update(
    client_means: &[ParamVector],
    global: &NiwGlobalPosterior,
    hyper: &NiwHyperParams,
    total_clients: usize,
    p_keep: f64,
    epsilon: f64,
) -> Result<(ParamVector, Vec<f64>)> {
    let d = global.d;
    let scale = participation_scale(client_means, total_clients, d)?;
    nn::check_len("NIW prior", d, hyper.dim())?;
    let n = total_clients as f64;
    let mut m0 = vec![0.0; d];
    let mut v0 = vec![0.0; d];
    for k in 0..d {
        let sum: f64 = client_means.iter().map(|m| m[k]).sum();
        m0[k] = (hyper.lambda0 * hyper.mu0[k] + p_keep * scale * sum) / (hyper.lambda0 + n);
        let scatter: f64 = client_means.iter().map(|m| rho(m0[k], m[k], p_keep)).sum();
        let dev = m0[k] - hyper.mu0[k];
        let num = hyper.sigma0_diag[k] + n * epsilon * epsilon + hyper.lambda0 * dev * dev + scale * scatter;
        v0[k] = (global.n0 * num / (hyper.nu0 + n)).max(V_MIN);
    }
    if m0.iter().chain(&v0).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("NIW server update"));
    }
    Ok((ParamVector::from(m0), v0))
}

/// Server objective (up to constants) at a candidate `(m0, v0)`:
/// the prior KL `1/2 sum_k [n0 s0_k / v_k + nu0 ln v_k + lambda0 n0 (mu0_k - m0_k)^2 / v_k]`
/// plus, for every participant scaled by `N / N_f`,
/// `n0/2 sum_k [(rho_k + eps^2) / v_k + ln(v_k) / n0]`.
#[allow(clippy::too_many_arguments)]
pub fn niw_server_objective(
    m0: &[f64],
    v0: &[f64],
    client_means: &[ParamVector],
    hyper: &NiwHyperParams,
    n0: f64,
    total_clients: usize,
    p_keep: f64,
    epsilon: f64,
) -> Result<f64> {
    let d = m0.len();
    nn::check_len("variance", d, v0.len())?;
    let scale = participation_scale(client_means, total_clients, d)?;
    let mut kl = 0.0;
    let mut expected = 0.0;
    for k in 0..d {
        let v = v0[k];
        let dev = hyper.mu0[k] - m0[k];
        kl += n0 * hyper.sigma0_diag[k] / v + hyper.nu0 * v.ln() + hyper.lambda0 * n0 * dev * dev / v;
        for m in client_means {
            expected += (rho(m0[k], m[k], p_keep) + epsilon * epsilon) / v + v.ln() / n0;
        }
    }
    Ok(0.5 * kl + scale * 0.5 * n0 * expected)
}

/// Mode of the NIW: `mu* = m0`, `Sigma* = V0 / (n0 + d + 2)`.
pub fn niw_mode(global: &NiwGlobalPosterior) -> (ParamVector, Vec<f64>) {
    let denom = global.n0 + global.d as f64 + 2.0;
    (global.m0.clone(), global.v0_diag.iter().map(|v| v / denom).collect())
}

/// Diagonal scale of the Student-t predictive over network parameters,
/// `(l0 + 1) v0 / (l0 (n0 - d + 1))`.
pub fn student_t_scale(global: &NiwGlobalPosterior) -> Result<Vec<f64>> {
    let nu = global.dof();
    if !(nu > 0.0) {
        return Err(Error::Config(format!("Student-t degrees of freedom must be > 0, got {nu}")));
    }
    let c = (global.l0 + 1.0) / (global.l0 * nu);
    Ok(global.v0_diag.iter().map(|v| c * v).collect())
}

/// One multivariate Student-t draw: `m0 + sqrt(scale) * z * sqrt(nu / u)`
/// with a single `u ~ chi2(nu)` shared by every coordinate.
pub fn niw_sample_global(global: &NiwGlobalPosterior, rng: &mut Rng) -> Result<ParamVector> {
    let scale = student_t_scale(global)?;
    let nu = global.dof();
    let u: f64 = ChiSquared::new(nu).map_err(|e| Error::Config(e.to_string()))?.sample(rng);
    let w = (nu / u).sqrt();
    Ok(global
        .m0
        .iter()
        .zip(&scale)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(rng);
            m + s.sqrt() * z * w
        })
        .collect::<Vec<_>>()
        .into())
}

/// Class probabilities averaged over `samples` Student-t parameter draws.
pub fn niw_global_predict(
    inputs: &Batch,
    global: &NiwGlobalPosterior,
    arch: &MlpArch,
    samples: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    if samples == 0 {
        return Err(Error::Config("global prediction needs at least one sample".into()));
    }
    let mut acc = Matrix::zeros(inputs.len(), arch.num_classes());
    for _ in 0..samples {
        let theta = niw_sample_global(global, rng)?;
        let probs = nn::softmax_rows(&nn::forward(&theta, arch, inputs, None)?);
        for (a, p) in acc.data.iter_mut().zip(&probs.data) {
            *a += p;
        }
    }
    let inv = 1.0 / samples as f64;
    acc.data.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

/// Local training of a client or personalization model: `schedule.epochs`
/// passes of the client objective starting from `start`, one dropout mask
/// per minibatch.
#[allow(clippy::too_many_arguments)]
pub fn niw_local_train(
    start: ParamVector,
    data: &LabeledDataset,
    indices: &[usize],
    global: &NiwGlobalPosterior,
    p_keep: f64,
    arch: &MlpArch,
    schedule: &LocalSchedule,
    frozen: Option<&std::ops::Range<usize>>,
    rng: &mut Rng,
) -> Result<(ParamVector, optim::EpochStats)> {
    let mut m = start;
    let data_size = indices.len();
    let stats = optim::run_epochs(&mut m, data, indices, schedule, frozen, rng, |m, batch, rng| {
        let mask = nn::sample_dropout_mask(p_keep, arch, rng);
        niw_client_objective(m, batch, global, p_keep, data_size, arch, &mask)
    })?;
    Ok((m, stats))
}

/// Personalized model for a new client: the client objective (penalty
/// scaled by `1/|D^p|`) minimized from `m0` with every parameter trainable.
pub fn niw_personalize(
    data: &LabeledDataset,
    indices: &[usize],
    global: &NiwGlobalPosterior,
    p_keep: f64,
    arch: &MlpArch,
    schedule: &LocalSchedule,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if indices.is_empty() {
        return Err(Error::Empty("personalization data"));
    }
    niw_local_train(global.m0.clone(), data, indices, global, p_keep, arch, schedule, None, rng).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn posterior(m0: Vec<f64>, v0: Vec<f64>, n0: f64) -> NiwGlobalPosterior {
        let d = m0.len();
        NiwGlobalPosterior {
            m0: m0.into(),
            v0_diag: v0,
            l0: 1.0,
            n0,
            d,
        }
    }

    #[test]
    fn init_uses_conjugate_counts() {
        let g = niw_init(10, 0, &NiwHyperParams::standard(10)).unwrap();
        assert_eq!((g.l0, g.n0), (1.0, 12.0));
        assert!(g.m0.iter().all(|&v| v == 0.0) && g.v0_diag.iter().all(|&v| v == 1.0));
        let g = niw_init(10, 100, &NiwHyperParams::standard(10)).unwrap();
        assert_eq!((g.l0, g.n0), (101.0, 112.0));
        let d = 203_530;
        let g = niw_init(d, 50_000, &NiwHyperParams::standard(d)).unwrap();
        assert_eq!((g.l0, g.n0), (50_001.0, 253_532.0));
    }

    #[test]
    fn hyper_validation() {
        let mut h = NiwHyperParams::standard(3);
        h.nu0 = 4.0;
        assert!(h.validate().is_err());
        let mut h = NiwHyperParams::standard(3);
        h.lambda0 = 0.0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn two_client_hand_example() {
        let g = posterior(vec![0.0, 0.0], vec![1.0, 1.0], 5.0);
        let ms = [ParamVector::from(vec![1.0, 0.0]), ParamVector::from(vec![0.0, 1.0])];
        let (m0, v0) = niw_server_update(&ms, &g, &NiwHyperParams::standard(2), 2, 1.0, 0.0).unwrap();
        for k in 0..2 {
            assert!((m0[k] - 1.0 / 3.0).abs() < 1e-15);
            assert!((v0[k] - 25.0 / 18.0).abs() < 1e-12, "{}", v0[k]);
        }
    }

    #[test]
    fn single_zero_client_gives_prior_scale() {
        let d = 4;
        let n0 = 17.0;
        let g = posterior(vec![0.0; d], vec![1.0; d], n0);
        let (m0, v0) =
            niw_server_update(&[ParamVector::zeros(d)], &g, &NiwHyperParams::standard(d), 1, 1.0, 0.0).unwrap();
        assert!(m0.iter().all(|&v| v == 0.0));
        for v in v0 {
            assert!((v - n0 / (d as f64 + 3.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn full_participation_mean_is_shrunk_average() {
        let mut r = rng::stream(11, &[]);
        let ms: Vec<ParamVector> = (0..4).map(|_| nn::init_params(&MlpArch::new(vec![3, 2]).unwrap(), &mut r)).collect();
        let d = ms[0].len();
        let g = posterior(vec![0.0; d], vec![1.0; d], 30.0);
        let (m0, _) = niw_server_update(&ms, &g, &NiwHyperParams::standard(d), 4, 1.0, 1e-4).unwrap();
        for k in 0..d {
            let avg = ms.iter().map(|m| m[k]).sum::<f64>() / 4.0;
            assert!((m0[k] - 0.8 * avg).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_participants_rejected() {
        let g = posterior(vec![0.0], vec![1.0], 5.0);
        assert!(niw_server_update(&[], &g, &NiwHyperParams::standard(1), 3, 1.0, 0.0).is_err());
    }

    #[test]
    fn rho_at_full_keep_is_squared_deviation() {
        for (m0, m) in [(0.3, -1.2), (2.0, 2.0), (-0.5, 4.25)] {
            assert!((rho(m0, m, 1.0) - (m - m0).powi(2)).abs() < 1e-14);
        }
    }

    #[test]
    fn mode_closed_form() {
        let g = posterior(vec![0.5, -1.0], vec![2.0, 4.0], 10.0);
        let (mu, s) = niw_mode(&g);
        assert_eq!(mu, g.m0);
        assert!((s[0] - 1.0 / 7.0).abs() < 1e-15 && (s[1] - 2.0 / 7.0).abs() < 1e-15);
        let d = 6;
        let g = posterior(vec![0.0; d], vec![1.0; d], d as f64 + 2.0);
        assert!(niw_mode(&g).1.iter().all(|&v| (v - 1.0 / (2.0 * d as f64 + 4.0)).abs() < 1e-15));
    }

    #[test]
    fn zero_scale_sample_is_location() {
        let g = posterior(vec![0.25, -3.0, 7.0], vec![0.0; 3], 10.0);
        let s = niw_sample_global(&g, &mut rng::stream(3, &[])).unwrap();
        assert_eq!(s.as_slice(), g.m0.as_slice());
    }

    #[test]
    fn nonpositive_dof_rejected() {
        let g = posterior(vec![0.0; 4], vec![1.0; 4], 2.0);
        assert!(niw_sample_global(&g, &mut rng::stream(3, &[])).is_err());
    }

    #[test]
    fn penalty_vanishes_at_center_and_is_symmetric() {
        let arch = MlpArch::new(vec![2, 3, 2]).unwrap();
        let mut r = rng::stream(4, &[]);
        let m0 = nn::init_params(&arch, &mut r);
        let d = m0.len();
        let g = posterior(m0.to_vec(), vec![0.7; d], 40.0);
        let pull = g.pull(0.9, 10).unwrap();
        assert_eq!(pull.value(&m0), 0.0);
        let mut grad = vec![0.0; d];
        pull.add_grad(&m0, &mut grad);
        assert!(grad.iter().all(|&v| v == 0.0));
        let delta: Vec<f64> = (0..d).map(|k| 0.1 * k as f64 - 0.4).collect();
        let plus: Vec<f64> = m0.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = m0.iter().zip(&delta).map(|(a, b)| a - b).collect();
        assert!((pull.value(&plus) - pull.value(&minus)).abs() < 1e-12);
    }

    #[test]
    fn variance_floor_violation_is_reported() {
        let g = posterior(vec![0.0; 2], vec![1.0, 1e-12], 10.0);
        match g.pull(1.0, 5) {
            Err(Error::VarianceFloor { index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn predict_rows_are_distributions() {
        let arch = MlpArch::new(vec![3, 4, 3]).unwrap();
        let mut r = rng::stream(5, &[]);
        let m0 = nn::init_params(&arch, &mut r);
        let d = m0.len();
        let g = posterior(m0.to_vec(), vec![0.01; d], 100.0 + d as f64);
        let batch = Batch::new(vec![0.1, 0.5, 0.9, 1.0, 0.0, 0.3], vec![0, 1], 3).unwrap();
        let p = niw_global_predict(&batch, &g, &arch, 4, &mut r).unwrap();
        for row in 0..2 {
            assert!((p.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
