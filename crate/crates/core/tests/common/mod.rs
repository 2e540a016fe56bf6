#![allow(dead_code)]

use hbfl_core::data::{group_partition, shard_partition, synth_generate, ClientSplit, SynthData, SynthSpec};
use hbfl_core::nn::{Batch, MlpArch, ParamVector};
use hbfl_core::rng::{self, Rng};
use hbfl_core::runtime::{FederatedConfig, Simulation, Strategy};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn normals(r: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

pub fn random_batch(arch: &MlpArch, n: usize, r: &mut Rng) -> Batch {
    let inputs = normals(r, n * arch.input_dim(), 1.0);
    let labels = (0..n).map(|_| r.random_range(0..arch.num_classes())).collect();
    Batch::new(inputs, labels, arch.input_dim()).unwrap()
}

pub fn synth(num_clusters: usize, shift_scale: f64, per_class: usize, seed: u64) -> SynthData {
    let spec = SynthSpec {
        num_clusters,
        classes: 3,
        dims: 4,
        per_class,
        shift_scale,
        class_sep: 3.0,
        permute_labels: false,
    };
    synth_generate(&spec, &mut rng::stream(seed, &[8])).unwrap()
}

/// Clients grouped by synthetic cluster, so every client sees one cluster.
pub fn cluster_splits(data: &SynthData, clients: usize, seed: u64) -> Vec<ClientSplit> {
    let p = group_partition(&data.cluster, clients, &mut rng::stream(seed, &[7])).unwrap();
    p.split(data.dataset.labels(), 0.8, &mut rng::stream(seed, &[7, 1]))
}

/// Moves training rows to the test side until every client trains on the
/// same number of rows.
pub fn equalize(mut splits: Vec<ClientSplit>) -> Vec<ClientSplit> {
    let size = splits.iter().map(|s| s.train.len()).min().unwrap();
    for s in &mut splits {
        let extra = s.train.split_off(size);
        s.test.extend(extra);
        s.test.sort_unstable();
    }
    splits
}

pub fn shard_splits(data: &SynthData, clients: usize, shards: usize, seed: u64) -> Vec<ClientSplit> {
    let p = shard_partition(data.dataset.labels(), clients, shards, &mut rng::stream(seed, &[7])).unwrap();
    p.split(data.dataset.labels(), 0.8, &mut rng::stream(seed, &[7, 1]))
}

pub fn small_arch(data: &SynthData, hidden: usize) -> MlpArch {
    MlpArch::new(vec![data.dataset.input_dim(), hidden, data.dataset.num_classes()]).unwrap()
}

pub fn config(strategy: Strategy, clients: usize) -> FederatedConfig {
    FederatedConfig {
        strategy,
        num_clients: clients,
        fraction: 0.5,
        rounds: 6,
        batch_size: 10,
        lr: 0.05,
        seed: 11,
        ..Default::default()
    }
}

pub fn simulation(config: FederatedConfig, data: &SynthData, splits: Vec<ClientSplit>) -> Simulation {
    let arch = small_arch(data, 6);
    Simulation::new(config, arch, data.dataset.clone(), splits, None).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(1e-12, f64::max);
    max_abs_diff(a, b) / scale
}

pub fn mean_of(vs: &[ParamVector]) -> Vec<f64> {
    let d = vs[0].len();
    (0..d).map(|k| vs.iter().map(|v| v[k]).sum::<f64>() / vs.len() as f64).collect()
}
