//! Dense ReLU network engine.
//!
//! Parameters live in one flat [`ParamVector`]. For every layer the weight
//! matrix (fan_out x fan_in) is stored column-major, one contiguous block of
//! `fan_out` values per input column, followed by the bias vector. A weight
//! column is also the unit of dropout: each column forms one group of a
//! [`DropoutMask`], and every bias vector forms an extra group that is always
//! kept.

use std::ops::{Deref, DerefMut, Range};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpArch {
    layer_sizes: Vec<usize>,
}

/// Location of one layer inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub index: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl LayerLayout {
    /// Parameter range of weight column `c`.
    pub fn column(&self, c: usize) -> Range<usize> {
        let start = self.weights.start + c * self.fan_out;
        start..start + self.fan_out
    }
}

impl MlpArch {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArch(format!("layer {pos} has size 0")));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Same body, different output width (used for the gating network).
    pub fn with_outputs(&self, outputs: usize) -> Result<Self> {
        let mut sizes = self.layer_sizes.clone();
        *sizes.last_mut().unwrap() = outputs;
        Self::new(sizes)
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerLayout> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).enumerate().map(move |(index, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset..offset + fan_in * fan_out;
            let bias = weights.end..weights.end + fan_out;
            offset = bias.end;
            LayerLayout {
                index,
                fan_in,
                fan_out,
                weights,
                bias,
            }
        })
    }

    pub fn layer(&self, index: usize) -> LayerLayout {
        self.layers().nth(index).expect("layer index in range")
    }

    /// One group per weight column plus one bias group per layer.
    pub fn num_groups(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] + 1).sum()
    }

    /// Parameter ranges of every dropout group, layer-major, bias group last
    /// within each layer. The flag is `true` for bias groups.
    pub fn groups(&self) -> Vec<(Range<usize>, bool)> {
        let mut out = Vec::with_capacity(self.num_groups());
        for layer in self.layers() {
            for c in 0..layer.fan_in {
                out.push((layer.column(c), false));
            }
            out.push((layer.bias.clone(), true));
        }
        out
    }
}

impl TryFrom<Vec<usize>> for MlpArch {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<MlpArch> for Vec<usize> {
    fn from(arch: MlpArch) -> Self {
        arch.layer_sizes
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, arch: &MlpArch) -> Result<()> {
        check_len("parameters", arch.num_params(), self.len())
    }

    /// Squared Euclidean distance.
    pub fn dist_sq(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what,
            expected,
            actual,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutMask {
    keep: Vec<bool>,
}

impl DropoutMask {
    pub fn all_kept(arch: &MlpArch) -> Self {
        Self {
            keep: vec![true; arch.num_groups()],
        }
    }

    /// Builds a mask from explicit weight-column decisions; bias groups are
    /// forced to keep.
    pub fn from_keep(arch: &MlpArch, mut keep: Vec<bool>) -> Result<Self> {
        check_len("dropout groups", arch.num_groups(), keep.len())?;
        for (g, (_, is_bias)) in arch.groups().iter().enumerate() {
            if *is_bias {
                keep[g] = true;
            }
        }
        Ok(Self { keep })
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn check(&self, arch: &MlpArch) -> Result<()> {
        check_len("dropout groups", arch.num_groups(), self.keep.len())
    }

    /// Number of kept weight-column groups and total weight-column groups.
    pub fn column_counts(&self, arch: &MlpArch) -> (usize, usize) {
        let mut kept = 0;
        let mut total = 0;
        for ((_, is_bias), &k) in arch.groups().iter().zip(&self.keep) {
            if !is_bias {
                total += 1;
                kept += k as usize;
            }
        }
        (kept, total)
    }

    /// Parameters with every dropped group set to zero.
    pub fn apply(&self, arch: &MlpArch, params: &[f64]) -> ParamVector {
        let mut out = params.to_vec();
        self.zero_dropped(arch, &mut out);
        ParamVector(out)
    }

    pub fn zero_dropped(&self, arch: &MlpArch, values: &mut [f64]) {
        for ((range, _), &k) in arch.groups().into_iter().zip(&self.keep) {
            if !k {
                values[range].fill(0.0);
            }
        }
    }
}

/// Independent keep/drop per weight column; bias groups always kept.
pub fn sample_dropout_mask(p_keep: f64, arch: &MlpArch, rng: &mut Rng) -> DropoutMask {
    let keep = arch
        .groups()
        .iter()
        .map(|(_, is_bias)| *is_bias || rng.random::<f64>() < p_keep)
        .collect();
    DropoutMask { keep }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row-wise argmax; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|r| argmax(self.row(r))).collect()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        check_len("batch inputs", labels.len() * input_dim, inputs.len())?;
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.input_dim..(r + 1) * self.input_dim]
    }

    /// Same inputs with every label replaced.
    pub fn relabel(&self, label: usize) -> Self {
        Self {
            inputs: self.inputs.clone(),
            labels: vec![label; self.labels.len()],
            input_dim: self.input_dim,
        }
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
pub fn init_params(arch: &MlpArch, rng: &mut Rng) -> ParamVector {
    let mut params = ParamVector::zeros(arch.num_params());
    for layer in arch.layers() {
        let bound = 1.0 / (layer.fan_in as f64).sqrt();
        for v in &mut params[layer.weights.start..layer.bias.end] {
            *v = rng.random_range(-bound..bound);
        }
    }
    params
}

fn check_inputs(params: &[f64], arch: &MlpArch, batch: &Batch, mask: Option<&DropoutMask>) -> Result<()> {
    if batch.input_dim() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: arch.input_dim(),
            actual: batch.input_dim(),
        });
    }
    check_len("parameters", arch.num_params(), params.len())?;
    if let Some(m) = mask {
        m.check(arch)?;
    }
    Ok(())
}

/// Pre-activations of every layer; the last one holds the logits.
struct Trace {
    pre: Vec<Matrix>,
}

impl Trace {
    /// Input to layer `l` (the batch itself, or ReLU of the previous layer).
    fn activation<'a>(&'a self, l: usize, batch: &'a Batch, scratch: &'a mut Vec<f64>) -> &'a [f64] {
        if l == 0 {
            batch.inputs()
        } else {
            scratch.clear();
            scratch.extend(self.pre[l - 1].data.iter().map(|&z| z.max(0.0)));
            scratch
        }
    }
}

fn run_forward(params: &[f64], arch: &MlpArch, batch: &Batch) -> Trace {
    let n = batch.len();
    let mut pre: Vec<Matrix> = Vec::with_capacity(arch.depth());
    let mut relu_buf: Vec<f64> = Vec::new();
    for layer in arch.layers() {
        let input: &[f64] = if layer.index == 0 {
            batch.inputs()
        } else {
            relu_buf.clear();
            relu_buf.extend(pre[layer.index - 1].data.iter().map(|&z| z.max(0.0)));
            &relu_buf
        };
        let mut z = Matrix::zeros(n, layer.fan_out);
        let bias = &params[layer.bias.clone()];
        for r in 0..n {
            z.row_mut(r).copy_from_slice(bias);
        }
        for c in 0..layer.fan_in {
            let col = &params[layer.column(c)];
            for r in 0..n {
                let x = input[r * layer.fan_in + c];
                if x != 0.0 {
                    for (h, w) in z.row_mut(r).iter_mut().zip(col) {
                        *h += x * w;
                    }
                }
            }
        }
        pre.push(z);
    }
    Trace { pre }
}

/// Logits (batch_size x num_classes). Parameters in dropped groups count as
/// zero.
pub fn forward(
    params: &[f64],
    arch: &MlpArch,
    batch: &Batch,
    mask: Option<&DropoutMask>,
) -> Result<Matrix> {
    check_inputs(params, arch, batch, mask)?;
    let trace = match mask {
        Some(m) => run_forward(&m.apply(arch, params), arch, batch),
        None => run_forward(params, arch, batch),
    };
    Ok(trace.pre.into_iter().last().unwrap())
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(sum(exp(values))) with the max subtracted first.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of `batch` and its gradient with respect to `params`.
/// With a mask, the loss is evaluated at the masked parameters and gradient
/// entries of dropped groups are zero.
pub fn loss_and_grad(
    params: &[f64],
    arch: &MlpArch,
    batch: &Batch,
    mask: Option<&DropoutMask>,
) -> Result<(f64, ParamVector)> {
    check_inputs(params, arch, batch, mask)?;
    let masked;
    let theta: &[f64] = match mask {
        Some(m) => {
            masked = m.apply(arch, params);
            &masked
        }
        None => params,
    };
    let classes = arch.num_classes();
    if let Some(&label) = batch.labels().iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: classes,
        });
    }

    let trace = run_forward(theta, arch, batch);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    // Output delta = (softmax - onehot) / n.
    let logits = trace.pre.last().unwrap();
    let mut delta = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let y = batch.labels()[r];
        let lse = log_sum_exp(row);
        let sample_loss = lse - row[y];
        if !sample_loss.is_finite() {
            return Err(Error::NonFiniteLoss { index: r });
        }
        loss += sample_loss;
        let d = delta.row_mut(r);
        for (k, (dk, &zk)) in d.iter_mut().zip(row).enumerate() {
            let p = (zk - lse).exp();
            *dk = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    loss *= inv_n;

    let mut grad = ParamVector::zeros(theta.len());
    let mut scratch = Vec::new();
    for layer in arch.layers().collect::<Vec<_>>().into_iter().rev() {
        let input = trace.activation(layer.index, batch, &mut scratch);
        {
            let gb = &mut grad[layer.bias.clone()];
            for r in 0..n {
                for (g, d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
        }
        for c in 0..layer.fan_in {
            let gcol = &mut grad[layer.column(c)];
            for r in 0..n {
                let x = input[r * layer.fan_in + c];
                if x != 0.0 {
                    for (g, d) in gcol.iter_mut().zip(delta.row(r)) {
                        *g += x * d;
                    }
                }
            }
        }
        if layer.index == 0 {
            break;
        }
        let prev_pre = &trace.pre[layer.index - 1];
        let mut prev_delta = Matrix::zeros(n, layer.fan_in);
        for c in 0..layer.fan_in {
            let col = &theta[layer.column(c)];
            for r in 0..n {
                if prev_pre.row(r)[c] > 0.0 {
                    let s: f64 = col.iter().zip(delta.row(r)).map(|(w, d)| w * d).sum();
                    prev_delta.row_mut(r)[c] = s;
                }
            }
        }
        delta = prev_delta;
    }

    if let Some(m) = mask {
        m.zero_dropped(arch, &mut grad);
    }
    Ok((loss, grad))
}

/// Mean cross-entropy only (no gradient).
pub fn mean_loss(params: &[f64], arch: &MlpArch, batch: &Batch) -> Result<f64> {
    let logits = forward(params, arch, batch, None)?;
    let mut loss = 0.0;
    for r in 0..logits.rows {
        let row = logits.row(r);
        let y = batch.labels()[r];
        if y >= row.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: row.len(),
            });
        }
        let l = log_sum_exp(row) - row[y];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index: r });
        }
        loss += l;
    }
    Ok(loss / logits.rows as f64)
}

/// `params - lr * grad`.
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<ParamVector> {
    let mut out = params.to_vec();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(ParamVector(out))
}

pub fn sgd_step_in_place(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_len("gradient", params.len(), grad.len())?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    if params.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("sgd step"))
    }
}

/// Index range of the classification head (final weight matrix and bias).
pub fn head_freeze_mask(arch: &MlpArch) -> Range<usize> {
    let last = arch.layer(arch.depth() - 1);
    last.weights.start..last.bias.end
}
