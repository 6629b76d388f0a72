//! Two-hidden-layer ReLU perceptron with optional batch normalization and an
//! optional skip path from selected inputs into the output layer.
//!
//! Layout per layer: `pre = input·W + b`, then (hidden layers only) batch
//! norm, then ReLU. The output layer sees `[h2 | input[:, skip]]`.

use std::ops::Range;

use super::matrix::{gemm, Matrix, Op};
use super::rng::RngStream;
use crate::error::{dim_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: [usize; 2],
    pub output_dim: usize,
    pub use_batch_norm: bool,
    /// Input columns concatenated onto the second hidden layer before the
    /// output layer. `None` disables the skip connection.
    pub skip_inputs_to_output: Option<Range<usize>>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: [usize; 2], output_dim: usize) -> Self {
        MlpSpec { input_dim, hidden_dims, output_dim, use_batch_norm: false, skip_inputs_to_output: None }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.use_batch_norm = on;
        self
    }

    pub fn with_skip(mut self, cols: Range<usize>) -> Self {
        self.skip_inputs_to_output = Some(cols);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(dim_err(format!("mlp dims must be >= 1: {self:?}")));
        }
        if let Some(r) = &self.skip_inputs_to_output {
            if r.end > self.input_dim || r.start > r.end {
                return Err(dim_err(format!("skip range {r:?} outside input dim {}", self.input_dim)));
            }
        }
        Ok(())
    }

    fn skip_width(&self) -> usize {
        self.skip_inputs_to_output.as_ref().map_or(0, |r| r.len())
    }

    /// `(fan_in, fan_out)` for each of the three dense layers.
    pub fn layer_dims(&self) -> [(usize, usize); 3] {
        let [h1, h2] = self.hidden_dims;
        [(self.input_dim, h1), (h1, h2), (h2 + self.skip_width(), self.output_dim)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// Hidden-layer biases are not trainable when batch norm is on (the
/// normalization cancels them); they stay at zero and are left out of
/// [`MlpParams::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: [Dense; 3],
    pub norms: Option<[BatchNorm; 2]>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        let dense = |(i, o): (usize, usize)| Dense { weight: Matrix::zeros(i, o), bias: vec![0.0; o] };
        Ok(MlpParams {
            spec: spec.clone(),
            layers: [dense(dims[0]), dense(dims[1]), dense(dims[2])],
            norms: spec
                .use_batch_norm
                .then(|| [BatchNorm::new(spec.hidden_dims[0]), BatchNorm::new(spec.hidden_dims[1])]),
        })
    }

    /// He-uniform initialization: weights on `±√(6/fan_in)`, biases zero,
    /// batch-norm scale one and shift zero.
    pub fn he_init(spec: &MlpSpec, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        for layer in p.layers.iter_mut() {
            let bound = (6.0 / layer.weight.rows() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(p)
    }

    pub fn num_trainable(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }

    fn segments(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(10);
        for (i, l) in self.layers.iter().enumerate() {
            out.push(l.weight.as_slice());
            match (&self.norms, i < 2) {
                (Some(n), true) => {
                    out.push(&n[i].gamma);
                    out.push(&n[i].beta);
                }
                _ => out.push(&l.bias),
            }
        }
        out
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(10);
        let [l0, l1, l2] = &mut self.layers;
        match self.norms.as_mut() {
            Some([n0, n1]) => {
                out.push(l0.weight.as_mut_slice());
                out.push(&mut n0.gamma);
                out.push(&mut n0.beta);
                out.push(l1.weight.as_mut_slice());
                out.push(&mut n1.gamma);
                out.push(&mut n1.beta);
            }
            None => {
                out.push(l0.weight.as_mut_slice());
                out.push(&mut l0.bias);
                out.push(l1.weight.as_mut_slice());
                out.push(&mut l1.bias);
            }
        }
        out.push(l2.weight.as_mut_slice());
        out.push(&mut l2.bias);
        out
    }

    /// Trainable parameters in a fixed order (running moments excluded).
    pub fn flat(&self) -> Vec<f64> {
        self.segments().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_trainable() {
            return Err(dim_err(format!("{} values for {} parameters", values.len(), self.num_trainable())));
        }
        let mut offset = 0;
        for seg in self.segments_mut() {
            seg.copy_from_slice(&values[offset..offset + seg.len()]);
            offset += seg.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.segments().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Fold the batch moments from a training-mode forward pass into the
    /// running moments.
    pub fn update_running_moments(&mut self, cache: &MlpCache) {
        if let Some(norms) = &mut self.norms {
            for (bn, layer) in norms.iter_mut().zip(&cache.hidden) {
                if let Some(stats) = &layer.batch_stats {
                    for j in 0..bn.running_mean.len() {
                        bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * stats.mean[j];
                        bn.running_var[j] = (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * stats.var[j];
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    /// Batch-normalized pre-activation (equal to the raw pre-activation
    /// without batch norm); ReLU gate is `normalized > 0`.
    normalized: Matrix,
    /// `(pre − mean)/std` when batch norm is on.
    xhat: Option<Matrix>,
    inv_std: Vec<f64>,
    batch_stats: Option<BatchStats>,
    activation: Matrix,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Matrix,
    hidden: [HiddenCache; 2],
    out_input: Matrix,
}

pub struct MlpOutput {
    pub output: Matrix,
    pub hidden1: Matrix,
    pub cache: MlpCache,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn hidden_forward(pre: Matrix, bn: Option<&BatchNorm>, training: bool) -> HiddenCache {
    let (rows, width) = pre.shape();
    let Some(bn) = bn else {
        let activation = pre.map(|v| v.max(0.0));
        return HiddenCache { normalized: pre, xhat: None, inv_std: Vec::new(), batch_stats: None, activation };
    };
    // A single row has no batch variance; fall back to running moments.
    let use_batch = training && rows > 1;
    let (mean, var) = if use_batch {
        let mean = pre.col_means();
        let mut var = vec![0.0; width];
        for i in 0..rows {
            for (j, v) in pre.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let xhat = Matrix::from_fn(rows, width, |i, j| (pre[(i, j)] - mean[j]) * inv_std[j]);
    let normalized = Matrix::from_fn(rows, width, |i, j| bn.gamma[j] * xhat[(i, j)] + bn.beta[j]);
    let activation = normalized.map(|v| v.max(0.0));
    HiddenCache {
        normalized,
        xhat: Some(xhat),
        inv_std,
        batch_stats: use_batch.then_some(BatchStats { mean, var }),
        activation,
    }
}

/// Forward pass. In non-training mode batch norm uses the running moments
/// and the pass is a pure function of `(params, input)`.
pub fn mlp_forward(params: &MlpParams, input: &Matrix, training: bool) -> Result<MlpOutput> {
    let spec = &params.spec;
    if input.cols() != spec.input_dim {
        return Err(dim_err(format!("mlp input has {} columns, expected {}", input.cols(), spec.input_dim)));
    }
    let bn = |i: usize| params.norms.as_ref().map(|n| &n[i]);

    let mut pre1 = gemm(Op::N, input, Op::N, &params.layers[0].weight)?;
    add_bias(&mut pre1, &params.layers[0].bias);
    let h1 = hidden_forward(pre1, bn(0), training);

    let mut pre2 = gemm(Op::N, &h1.activation, Op::N, &params.layers[1].weight)?;
    add_bias(&mut pre2, &params.layers[1].bias);
    let h2 = hidden_forward(pre2, bn(1), training);

    let out_input = match &spec.skip_inputs_to_output {
        Some(r) => h2.activation.hcat(&input.col_range(r.start, r.end))?,
        None => h2.activation.clone(),
    };
    let mut output = gemm(Op::N, &out_input, Op::N, &params.layers[2].weight)?;
    add_bias(&mut output, &params.layers[2].bias);

    let hidden1 = h1.activation.clone();
    Ok(MlpOutput { output, hidden1, cache: MlpCache { input: input.clone(), hidden: [h1, h2], out_input } })
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    s
}

/// Gradient for a hidden layer's pre-activation given the gradient of its
/// ReLU output. Returns `(d_pre, d_gamma, d_beta)`.
fn hidden_backward(cache: &HiddenCache, bn: Option<&BatchNorm>, d_act: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (rows, width) = d_act.shape();
    let d_norm = Matrix::from_fn(rows, width, |i, j| if cache.normalized[(i, j)] > 0.0 { d_act[(i, j)] } else { 0.0 });
    let Some(bn) = bn else {
        return (d_norm, Vec::new(), Vec::new());
    };
    let xhat = cache.xhat.as_ref().expect("batch-norm cache");
    let mut d_gamma = vec![0.0; width];
    let mut d_beta = vec![0.0; width];
    for i in 0..rows {
        for j in 0..width {
            d_gamma[j] += d_norm[(i, j)] * xhat[(i, j)];
            d_beta[j] += d_norm[(i, j)];
        }
    }
    let d_pre = if cache.batch_stats.is_some() {
        // d_pre = inv_std/B · (B·dx̂ − Σdx̂ − x̂·Σ(dx̂⊙x̂)), with dx̂ = γ·d_norm
        let b = rows as f64;
        let sum_dx: Vec<f64> = (0..width).map(|j| bn.gamma[j] * d_beta[j]).collect();
        let sum_dx_xhat: Vec<f64> = (0..width).map(|j| bn.gamma[j] * d_gamma[j]).collect();
        Matrix::from_fn(rows, width, |i, j| {
            let dx = bn.gamma[j] * d_norm[(i, j)];
            cache.inv_std[j] / b * (b * dx - sum_dx[j] - xhat[(i, j)] * sum_dx_xhat[j])
        })
    } else {
        Matrix::from_fn(rows, width, |i, j| bn.gamma[j] * d_norm[(i, j)] * cache.inv_std[j])
    };
    (d_pre, d_gamma, d_beta)
}

/// Backward pass for the scalar loss whose gradient with respect to the
/// network output is `grad_output`. Returns parameter gradients (running
/// moments zeroed) and input gradients.
pub fn mlp_backward(params: &MlpParams, cache: &MlpCache, grad_output: &Matrix) -> Result<(MlpParams, Matrix)> {
    let spec = &params.spec;
    let rows = cache.input.rows();
    if grad_output.shape() != (rows, spec.output_dim) {
        return Err(dim_err(format!(
            "grad_output is {:?}, expected ({rows}, {})",
            grad_output.shape(),
            spec.output_dim
        )));
    }
    let mut grads = MlpParams::zeros(spec)?;
    let bn = |i: usize| params.norms.as_ref().map(|n| &n[i]);

    grads.layers[2].weight = gemm(Op::T, &cache.out_input, Op::N, grad_output)?;
    grads.layers[2].bias = col_sums(grad_output);
    let d_out_input = gemm(Op::N, grad_output, Op::T, &params.layers[2].weight)?;
    let h2w = spec.hidden_dims[1];
    let d_h2 = d_out_input.col_range(0, h2w);

    let (d_pre2, dg2, db2) = hidden_backward(&cache.hidden[1], bn(1), &d_h2);
    grads.layers[1].weight = gemm(Op::T, &cache.hidden[0].activation, Op::N, &d_pre2)?;
    grads.layers[1].bias = col_sums(&d_pre2);
    let d_h1 = gemm(Op::N, &d_pre2, Op::T, &params.layers[1].weight)?;

    let (d_pre1, dg1, db1) = hidden_backward(&cache.hidden[0], bn(0), &d_h1);
    grads.layers[0].weight = gemm(Op::T, &cache.input, Op::N, &d_pre1)?;
    grads.layers[0].bias = col_sums(&d_pre1);
    let mut d_input = gemm(Op::N, &d_pre1, Op::T, &params.layers[0].weight)?;

    if let Some(r) = &spec.skip_inputs_to_output {
        for i in 0..rows {
            for (k, col) in r.clone().enumerate() {
                d_input[(i, col)] += d_out_input[(i, h2w + k)];
            }
        }
    }
    if let Some(norms) = &mut grads.norms {
        norms[0].gamma = dg1;
        norms[0].beta = db1;
        norms[1].gamma = dg2;
        norms[1].beta = db2;
        for n in norms.iter_mut() {
            n.running_mean.iter_mut().for_each(|v| *v = 0.0);
            n.running_var.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok((grads, d_input))
}

/// Parameter gradients for a loss that depends on the network only through
/// the first hidden layer activation.
pub fn mlp_backward_from_hidden1(params: &MlpParams, cache: &MlpCache, d_hidden1: &Matrix) -> Result<MlpParams> {
    let spec = &params.spec;
    if d_hidden1.shape() != (cache.input.rows(), spec.hidden_dims[0]) {
        return Err(dim_err(format!("d_hidden1 is {:?}, expected ({}, {})", d_hidden1.shape(), cache.input.rows(), spec.hidden_dims[0])));
    }
    let mut grads = MlpParams::zeros(spec)?;
    let bn = params.norms.as_ref().map(|n| &n[0]);
    let (d_pre1, dg1, db1) = hidden_backward(&cache.hidden[0], bn, d_hidden1);
    grads.layers[0].weight = gemm(Op::T, &cache.input, Op::N, &d_pre1)?;
    grads.layers[0].bias = col_sums(&d_pre1);
    if let Some(norms) = &mut grads.norms {
        norms[0].gamma = dg1;
        norms[0].beta = db1;
        norms[1].gamma.iter_mut().for_each(|v| *v = 0.0);
        for n in norms.iter_mut() {
            n.running_mean.iter_mut().for_each(|v| *v = 0.0);
            n.running_var.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(grads)
}
