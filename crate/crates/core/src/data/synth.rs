//! Gaussian-blob classification data with cluster-level covariate shift.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"HBFLSYN1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_clusters: usize,
    pub classes: usize,
    pub dims: usize,
    /// Rows per (cluster, class) pair.
    pub per_class: usize,
    /// Scale of the per-cluster offset added to every class mean.
    pub shift_scale: f64,
    /// Scale of the class means; noise around each mean has unit variance.
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    /// Give every cluster after the first its own random label permutation.
    #[serde(default)]
    pub permute_labels: bool,
}

fn default_class_sep() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: LabeledDataset,
    /// Cluster of every row.
    pub cluster: Vec<usize>,
    /// `classes x dims`, row-major.
    pub class_means: Vec<f64>,
    /// `num_clusters x dims`, row-major.
    pub cluster_offsets: Vec<f64>,
}

impl SynthData {
    /// Mean of rows generated for (`cluster`, underlying class `class`).
    pub fn configured_mean(&self, cluster: usize, class: usize) -> Vec<f64> {
        let d = self.dataset.input_dim();
        (0..d)
            .map(|k| self.class_means[class * d + k] + self.cluster_offsets[cluster * d + k])
            .collect()
    }
}

fn gaussian(n: usize, scale: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Rows are emitted cluster by cluster, class by class. When labels are
/// permuted, cluster `c` relabels underlying class `y` as `perm_c[y]`.
pub fn synth_generate(spec: &SynthSpec, rng: &mut Rng) -> Result<SynthData> {
    if spec.num_clusters == 0 || spec.classes == 0 || spec.dims == 0 || spec.per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs num_clusters, classes, dims and per_class >= 1".into(),
        ));
    }
    if !spec.shift_scale.is_finite() || !spec.class_sep.is_finite() {
        return Err(Error::Config("synthetic scales must be finite".into()));
    }
    let d = spec.dims;
    let class_means = gaussian(spec.classes * d, spec.class_sep, rng);
    let cluster_offsets = gaussian(spec.num_clusters * d, spec.shift_scale, rng);
    let n = spec.num_clusters * spec.classes * spec.per_class;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut cluster = Vec::with_capacity(n);
    for c in 0..spec.num_clusters {
        let mut perm: Vec<usize> = (0..spec.classes).collect();
        if spec.permute_labels && c > 0 {
            perm.shuffle(rng);
        }
        for y in 0..spec.classes {
            for _ in 0..spec.per_class {
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    inputs.push(class_means[y * d + k] + cluster_offsets[c * d + k] + z);
                }
                labels.push(perm[y]);
                cluster.push(c);
            }
        }
    }
    Ok(SynthData {
        dataset: LabeledDataset::new(inputs, labels, d, spec.classes)?,
        cluster,
        class_means,
        cluster_offsets,
    })
}

/// Binary container: magic, then u32 LE `rows, dims, classes`, then the
/// inputs as f64 LE, labels as u32 LE and cluster tags as u32 LE.
pub fn write_container(path: &Path, dataset: &LabeledDataset, cluster: &[usize]) -> Result<()> {
    crate::nn::check_len("cluster tags", dataset.len(), cluster.len())?;
    let mut buf = Vec::with_capacity(20 + dataset.inputs().len() * 8 + dataset.len() * 8);
    buf.extend_from_slice(MAGIC);
    for v in [dataset.len(), dataset.input_dim(), dataset.num_classes()] {
        buf.extend_from_slice(&to_u32(v, path)?.to_le_bytes());
    }
    for x in dataset.inputs() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    for &v in dataset.labels().iter().chain(cluster) {
        buf.extend_from_slice(&to_u32(v, path)?.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

fn to_u32(v: usize, path: &Path) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(path, format!("value {v} does not fit in u32")))
}

pub fn read_container(path: &Path) -> Result<(LabeledDataset, Vec<usize>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (rows, dims, classes) = (word(0), word(1), word(2));
    let body = &bytes[20..];
    let expected = rows * dims * 8 + rows * 8;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("truncated: expected {expected} payload bytes, found {}", body.len()),
        ));
    }
    let (xs, rest) = body.split_at(rows * dims * 8);
    let inputs = xs
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let words: Vec<usize> = rest
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (labels, cluster) = words.split_at(rows);
    let dataset = LabeledDataset::new(inputs, labels.to_vec(), dims, classes)?;
    Ok((dataset, cluster.to_vec()))
}
