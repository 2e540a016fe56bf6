use crate::error::{Error, Result};
use crate::nn::{self, Batch, MlpArch, ParamVector};
use crate::optim::{Objective, PullWeight, QuadraticPull};

/// Coordinate-wise mean of the client models, summed in the given order.
pub fn fedavg_aggregate(models: &[ParamVector]) -> Result<ParamVector> {
    let first = models.first().ok_or(Error::Empty("model list"))?;
    let mut sum = vec![0.0; first.len()];
    for m in models {
        nn::check_len("client model", sum.len(), m.len())?;
        for (s, v) in sum.iter_mut().zip(m.iter()) {
            *s += v;
        }
    }
    let n = models.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect::<Vec<_>>().into())
}

/// Mean cross-entropy plus `(mu/2) |m - global|^2`. With `mu = 0` this is
/// the FedAvg local objective.
pub fn fedprox_client_objective(
    m: &[f64],
    batch: &Batch,
    global: &[f64],
    mu: f64,
    arch: &MlpArch,
) -> Result<Objective> {
    let (data_loss, data_grad) = nn::loss_and_grad(m, arch, batch, None)?;
    if mu == 0.0 {
        return Ok(Objective {
            loss: data_loss,
            data_loss,
            data_grad,
            pull: None,
        });
    }
    let pull = QuadraticPull {
        anchor: global.to_vec(),
        weight: PullWeight::Scalar(mu),
    };
    Ok(Objective {
        loss: data_loss + pull.value(m),
        data_loss,
        data_grad,
        pull: Some(pull),
    })
}

pub fn fedprox_client_loss_grad(
    m: &[f64],
    batch: &Batch,
    global: &[f64],
    mu: f64,
    arch: &MlpArch,
) -> Result<(f64, ParamVector)> {
    let obj = fedprox_client_objective(m, batch, global, mu, arch)?;
    Ok((obj.loss, obj.total_grad(m)))
}
