//! Non-iid client partitioners.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const DIRICHLET_RETRIES: usize = 100;

/// Client id -> indices into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

/// Per-client train/test split of a [`Partition`] entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    /// Disjoint, in range, and every client non-empty.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for (c, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Config(format!("client {c} has no data")));
            }
            for &i in idx {
                if i >= dataset_len {
                    return Err(Error::Config(format!("client {c}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("index {i} assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Stratified train/test split of every client. Each label's rows are
    /// shuffled and the first `round(train_fraction * count)` go to train;
    /// a client with at least two rows always keeps one row on each side.
    pub fn split(&self, labels: &[usize], train_fraction: f64, rng: &mut Rng) -> Vec<ClientSplit> {
        self.clients
            .iter()
            .map(|idx| {
                let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
                for &i in idx {
                    by_label.entry(labels[i]).or_default().push(i);
                }
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (_, mut rows) in by_label {
                    rows.shuffle(rng);
                    let k = (train_fraction * rows.len() as f64).round() as usize;
                    train.extend_from_slice(&rows[..k]);
                    test.extend_from_slice(&rows[k..]);
                }
                if idx.len() >= 2 {
                    if test.is_empty() {
                        test.push(train.pop().unwrap());
                    } else if train.is_empty() {
                        train.push(test.pop().unwrap());
                    }
                }
                train.sort_unstable();
                test.sort_unstable();
                ClientSplit { train, test }
            })
            .collect()
    }
}

/// Sort-by-label sharding: rows are ordered by label, cut into
/// `clients * shards_per_client` contiguous shards of equal size (leftover
/// rows dropped) and each client receives `shards_per_client` random shards.
pub fn shard_partition(
    labels: &[usize],
    clients: usize,
    shards_per_client: usize,
    rng: &mut Rng,
) -> Result<Partition> {
    let total_shards = clients * shards_per_client;
    if total_shards == 0 {
        return Err(Error::Config(format!(
            "sharding needs clients * shards_per_client >= 1, got {clients} * {shards_per_client}"
        )));
    }
    let shard_size = labels.len() / total_shards;
    if shard_size == 0 {
        return Err(Error::Config(format!(
            "infeasible sharding: {} rows / ({clients} clients * {shards_per_client} shards) = 0 rows per shard",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut shard_ids: Vec<usize> = (0..total_shards).collect();
    shard_ids.shuffle(rng);
    let clients = shard_ids
        .chunks(shards_per_client)
        .map(|shards| {
            let mut idx: Vec<usize> = shards
                .iter()
                .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition { clients })
}

/// Dirichlet(alpha) sample computed in log space so tiny concentrations do
/// not underflow to an all-zero vector.
fn dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let lse = crate::nn::log_sum_exp(&logs);
    logs.iter().map(|l| (l - lse).exp()).collect()
}

/// Per class, client proportions drawn from Dirichlet(alpha * 1). Redraws
/// the whole assignment whenever some client ends up empty.
pub fn dirichlet_partition(labels: &[usize], clients: usize, alpha: f64, rng: &mut Rng) -> Result<Partition> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if clients == 0 || labels.len() < clients {
        return Err(Error::Config(format!(
            "cannot split {} rows across {clients} non-empty clients",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for _ in 0..DIRICHLET_RETRIES {
        let mut assign: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for rows in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(rng);
            let props = dirichlet(alpha, clients, rng);
            let mut cum = 0.0;
            let mut start = 0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == clients {
                    rows.len()
                } else {
                    ((cum * rows.len() as f64).round() as usize).clamp(start, rows.len())
                };
                assign[c].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        if assign.iter().all(|a| !a.is_empty()) {
            for a in &mut assign {
                a.sort_unstable();
            }
            return Ok(Partition { clients: assign });
        }
    }
    Err(Error::Config(format!(
        "dirichlet partition left a client empty after {DIRICHLET_RETRIES} draws (alpha = {alpha}, {clients} clients)"
    )))
}

/// Client `c` belongs to group `c % G`; each group's rows are shuffled and
/// dealt round-robin to the clients of that group. Used for data with
/// known group structure (e.g. synthetic clusters).
pub fn group_partition(groups: &[usize], clients: usize, rng: &mut Rng) -> Result<Partition> {
    let num_groups = groups.iter().max().map_or(0, |&g| g + 1);
    if num_groups == 0 || clients < num_groups {
        return Err(Error::Config(format!(
            "group partition needs at least one client per group: {clients} clients, {num_groups} groups"
        )));
    }
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); clients];
    for g in 0..num_groups {
        let members: Vec<usize> = (g..clients).step_by(num_groups).collect();
        let mut rows: Vec<usize> = (0..groups.len()).filter(|&i| groups[i] == g).collect();
        rows.shuffle(rng);
        for (k, row) in rows.into_iter().enumerate() {
            assign[members[k % members.len()]].push(row);
        }
    }
    for a in &mut assign {
        a.sort_unstable();
    }
    Ok(Partition { clients: assign })
}
