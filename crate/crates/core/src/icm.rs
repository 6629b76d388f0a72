//! The implicit causal model: standard-normal priors on confounders `z_n`,
//! SNP components `w_m` and the SNP network, a Binomial(2, π) SNP process
//! with `logit π_nm = f(z_n, w_m)`, and a trait process
//! `y_n = g(x_n, z_n, ε_n)` with SNP-level group-Lasso sparsity.

use std::fmt;
use std::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::numerics::matrix::{gemm, Op};
use crate::numerics::mlp::{mlp_backward, mlp_forward, MlpCache, MlpParams, MlpSpec};
use crate::numerics::{sigmoid, softplus, Matrix, RngStream, LN_2PI};
use crate::simgen::GenotypeMatrix;

/// Range of the equally spaced cutpoints for categorical traits.
pub const CUTPOINT_RANGE: (f64, f64) = (-3.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraitKind {
    /// `y = NN([x, z, ε])`; no tractable density.
    RealImplicit,
    /// `y = NN([x, z, 0]) + ε`, Gaussian with unit variance.
    RealLocationShift,
    /// `NN([x, z, 0]) + ε` discretized over equally spaced cutpoints.
    Categorical(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnpModel {
    LogisticFa,
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraitModel {
    Linear,
    Neural,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:path => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!("unknown {} '{s}'", stringify!($ty)))),
                }
            }
        }
    };
}

string_enum!(SnpModel { SnpModel::LogisticFa => "logistic", SnpModel::Neural => "neural" });
string_enum!(TraitModel { TraitModel::Linear => "linear", TraitModel::Neural => "neural" });

impl fmt::Display for TraitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraitKind::RealImplicit => f.write_str("implicit"),
            TraitKind::RealLocationShift => f.write_str("location"),
            TraitKind::Categorical(l) => write!(f, "categorical:{l}"),
        }
    }
}

impl FromStr for TraitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "implicit" => Ok(TraitKind::RealImplicit),
            "location" => Ok(TraitKind::RealLocationShift),
            _ => match s.strip_prefix("categorical:").map(str::parse::<usize>) {
                Some(Ok(l)) if l >= 2 => Ok(TraitKind::Categorical(l)),
                _ => Err(Error::Config(format!("unknown trait kind '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmConfig {
    /// Latent confounder dimension.
    pub k: usize,
    pub snp_hidden: [usize; 2],
    pub trait_hidden: [usize; 2],
    pub trait_kind: TraitKind,
    pub snp_model: SnpModel,
    pub trait_model: TraitModel,
    pub group_lasso_scale: f64,
    pub batch_norm: bool,
}

impl Default for IcmConfig {
    fn default() -> Self {
        IcmConfig {
            k: 3,
            snp_hidden: [512, 512],
            trait_hidden: [32, 256],
            trait_kind: TraitKind::RealImplicit,
            snp_model: SnpModel::LogisticFa,
            trait_model: TraitModel::Neural,
            group_lasso_scale: 1.0,
            batch_norm: true,
        }
    }
}

impl IcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("latent dimension K must be >= 1".into()));
        }
        if self.snp_hidden.contains(&0) || self.trait_hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be >= 1".into()));
        }
        if !(self.group_lasso_scale > 0.0) {
            return Err(Error::Config("group_lasso_scale must be positive".into()));
        }
        if let TraitKind::Categorical(l) = self.trait_kind {
            if l < 2 {
                return Err(Error::Config("categorical traits need at least two levels".into()));
            }
        }
        Ok(())
    }

    pub fn snp_spec(&self) -> MlpSpec {
        MlpSpec::new(2 * self.k, self.snp_hidden, 1).with_batch_norm(self.batch_norm)
    }

    /// Inputs `[x_1..x_M, z_1..z_K, ε]`, with `z` also fed to the output layer.
    pub fn trait_spec(&self, m: usize) -> MlpSpec {
        MlpSpec::new(m + self.k + 1, self.trait_hidden, 1)
            .with_batch_norm(self.batch_norm)
            .with_skip(m..m + self.k)
    }
}

/// Sum of independent standard-normal log densities and its gradient `−v`.
pub fn log_std_normal(v: &[f64]) -> (f64, Vec<f64>) {
    let value = -0.5 * v.iter().map(|x| x * x).sum::<f64>() - 0.5 * v.len() as f64 * LN_2PI;
    (value, v.iter().map(|x| -x).collect())
}

pub fn log_prior_z(z: &[f64]) -> (f64, Vec<f64>) {
    log_std_normal(z)
}

pub fn log_prior_w(w: &[f64]) -> (f64, Vec<f64>) {
    log_std_normal(w)
}

pub fn log_prior_phi(phi: &SnpModelParams) -> (f64, Vec<f64>) {
    log_std_normal(&phi.flat())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SnpModelParams {
    /// `logit π_nm = z_n · w_m`
    LogisticFa,
    /// `logit π_nm = NN([z_n, w_m]; φ)`
    Neural(MlpParams),
}

impl SnpModelParams {
    pub fn init(config: &IcmConfig, rng: &mut RngStream) -> Result<Self> {
        Ok(match config.snp_model {
            SnpModel::LogisticFa => SnpModelParams::LogisticFa,
            SnpModel::Neural => SnpModelParams::Neural(MlpParams::he_init(&config.snp_spec(), rng)?),
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            SnpModelParams::LogisticFa => Vec::new(),
            SnpModelParams::Neural(p) => p.flat(),
        }
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        match self {
            SnpModelParams::LogisticFa if v.is_empty() => Ok(()),
            SnpModelParams::LogisticFa => Err(dim_err("logistic factor model has no network parameters")),
            SnpModelParams::Neural(p) => p.set_flat(v),
        }
    }
}

pub struct SnpForward {
    /// `individuals × snps`
    pub logits: Matrix,
    cache: Option<MlpCache>,
}

fn pair_inputs(z: &Matrix, w: &Matrix) -> Matrix {
    let k = z.cols();
    let (nb, mb) = (z.rows(), w.rows());
    let mut pairs = Matrix::zeros(nb * mb, 2 * k);
    for i in 0..nb {
        for j in 0..mb {
            let row = pairs.row_mut(i * mb + j);
            row[..k].copy_from_slice(z.row(i));
            row[k..].copy_from_slice(w.row(j));
        }
    }
    pairs
}

/// Logits for every (individual, SNP) pair in the batch.
pub fn snp_logits(z: &Matrix, w: &Matrix, params: &SnpModelParams, training: bool) -> Result<SnpForward> {
    if z.cols() != w.cols() {
        return Err(dim_err(format!("z has width {}, w has width {}", z.cols(), w.cols())));
    }
    match params {
        SnpModelParams::LogisticFa => Ok(SnpForward { logits: gemm(Op::N, z, Op::T, w)?, cache: None }),
        SnpModelParams::Neural(phi) => {
            if phi.spec.input_dim != 2 * z.cols() {
                return Err(dim_err(format!("SNP network expects {} inputs, got 2x{}", phi.spec.input_dim, z.cols())));
            }
            let out = mlp_forward(phi, &pair_inputs(z, w), training)?;
            let logits = Matrix::from_vec(z.rows(), w.rows(), out.output.into_vec())?;
            Ok(SnpForward { logits, cache: Some(out.cache) })
        }
    }
}

/// Gradients of a loss through [`snp_logits`], given `d_logits` shaped like
/// the logits. Returns `(dz, dw, dφ)`.
pub fn snp_logits_backward(
    z: &Matrix,
    w: &Matrix,
    params: &SnpModelParams,
    forward: &SnpForward,
    d_logits: &Matrix,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if d_logits.shape() != forward.logits.shape() {
        return Err(dim_err("d_logits must match the logits"));
    }
    match params {
        SnpModelParams::LogisticFa => Ok((
            gemm(Op::N, d_logits, Op::N, w)?,
            gemm(Op::T, d_logits, Op::N, z)?,
            Vec::new(),
        )),
        SnpModelParams::Neural(phi) => {
            let cache = forward.cache.as_ref().expect("neural forward keeps its cache");
            let k = z.cols();
            let (nb, mb) = (z.rows(), w.rows());
            let g = Matrix::from_vec(nb * mb, 1, d_logits.as_slice().to_vec())?;
            let (grads, d_in) = mlp_backward(phi, cache, &g)?;
            let mut dz = Matrix::zeros(nb, k);
            let mut dw = Matrix::zeros(mb, k);
            for i in 0..nb {
                for j in 0..mb {
                    let row = d_in.row(i * mb + j);
                    for c in 0..k {
                        dz[(i, c)] += row[c];
                        dw[(j, c)] += row[k + c];
                    }
                }
            }
            Ok((dz, dw, grads.flat()))
        }
    }
}

const LN_2: f64 = std::f64::consts::LN_2;

/// `log Binomial(x; 2, sigmoid(logit))` and its derivative in the logit.
pub fn snp_log_prob(x: u8, logit: f64) -> Result<(f64, f64)> {
    if x > 2 {
        return Err(Error::Domain(format!("genotype {x} outside {{0,1,2}}")));
    }
    Ok(snp_log_prob_unchecked(x, logit))
}

#[inline]
pub(crate) fn snp_log_prob_unchecked(x: u8, logit: f64) -> (f64, f64) {
    let xf = x as f64;
    let log_choose = if x == 1 { LN_2 } else { 0.0 };
    (log_choose + xf * logit - 2.0 * softplus(logit), xf - 2.0 * sigmoid(logit))
}

/// Equally spaced cutpoints over [`CUTPOINT_RANGE`].
pub fn cutpoints(levels: usize) -> Vec<f64> {
    let (lo, hi) = CUTPOINT_RANGE;
    let t = levels - 1;
    if t == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..t).map(|i| lo + (hi - lo) * i as f64 / (t - 1) as f64).collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// Mass of `(lo − s, hi − s]` under a standard normal, upper-tail aware.
fn interval_mass(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        std_normal_cdf(-lo) - std_normal_cdf(-hi)
    } else {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    }
}

/// Level probabilities of a categorical trait whose latent score is `s`.
pub fn categorical_probs(s: f64, levels: usize) -> Vec<f64> {
    let c = cutpoints(levels);
    (0..levels)
        .map(|l| {
            let lo = if l == 0 { f64::NEG_INFINITY } else { c[l - 1] - s };
            let hi = if l == levels - 1 { f64::INFINITY } else { c[l] - s };
            interval_mass(lo, hi)
        })
        .collect()
}

/// `log P(level | s)` and its derivative in `s`.
pub fn categorical_log_prob(level: usize, s: f64, levels: usize) -> (f64, f64) {
    let c = cutpoints(levels);
    let lo = if level == 0 { f64::NEG_INFINITY } else { c[level - 1] - s };
    let hi = if level + 1 >= levels { f64::INFINITY } else { c[level] - s };
    let p = interval_mass(lo, hi).max(1e-300);
    let dens = |t: f64| if t.is_finite() { std_normal_pdf(t) } else { 0.0 };
    (p.ln(), (dens(lo) - dens(hi)) / p)
}

pub fn discretize(latent: f64, levels: usize) -> usize {
    cutpoints(levels).iter().filter(|&&c| latent > c).count()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraitModelParams {
    /// `y = x·coef[..M] + z·coef[M..] + bias + ε`
    Linear { m: usize, k: usize, coef: Vec<f64>, bias: f64 },
    Neural { m: usize, k: usize, net: MlpParams },
}

impl TraitModelParams {
    pub fn init(config: &IcmConfig, m: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(match config.trait_model {
            TraitModel::Linear => TraitModelParams::Linear { m, k: config.k, coef: vec![0.0; m + config.k], bias: 0.0 },
            TraitModel::Neural => TraitModelParams::Neural { m, k: config.k, net: MlpParams::he_init(&config.trait_spec(m), rng)? },
        })
    }

    pub fn snps(&self) -> usize {
        match self {
            TraitModelParams::Linear { m, .. } | TraitModelParams::Neural { m, .. } => *m,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            TraitModelParams::Linear { k, .. } | TraitModelParams::Neural { k, .. } => *k,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        match self {
            TraitModelParams::Linear { coef, bias, .. } => {
                let mut v = coef.clone();
                v.push(*bias);
                v
            }
            TraitModelParams::Neural { net, .. } => net.flat(),
        }
    }

    pub fn set_flat(&mut self, v: &[f64]) -> Result<()> {
        match self {
            TraitModelParams::Linear { coef, bias, .. } => {
                if v.len() != coef.len() + 1 {
                    return Err(dim_err(format!("{} values for {} linear parameters", v.len(), coef.len() + 1)));
                }
                coef.copy_from_slice(&v[..v.len() - 1]);
                *bias = v[v.len() - 1];
                Ok(())
            }
            TraitModelParams::Neural { net, .. } => net.set_flat(v),
        }
    }

    pub fn hidden1_dim(&self) -> usize {
        match self {
            TraitModelParams::Linear { .. } => 0,
            TraitModelParams::Neural { net, .. } => net.spec.hidden_dims[0],
        }
    }
}

/// Network input rows `[x_n, z_n, ε_n]`.
pub fn trait_inputs(x: &Matrix, z: &Matrix, noise: &[f64]) -> Result<Matrix> {
    if x.rows() != z.rows() || x.rows() != noise.len() {
        return Err(dim_err("trait inputs need matching row counts"));
    }
    let e = Matrix::from_vec(noise.len(), 1, noise.to_vec())?;
    x.hcat(z)?.hcat(&e)
}

pub struct TraitBatch {
    /// Deterministic part of the model (network output or linear predictor).
    pub output: Vec<f64>,
    /// Observable trait after applying the noise per the trait kind.
    pub y: Vec<f64>,
    /// First hidden layer post-activation (`rows × h1`, zero-width for linear).
    pub hidden1: Matrix,
    cache: Option<MlpCache>,
    inputs: Matrix,
}

/// Batched trait process over rows of `x` (real-valued genotypes), `z`, and
/// per-row noise.
pub fn trait_forward_batch(
    x: &Matrix,
    z: &Matrix,
    noise: &[f64],
    params: &TraitModelParams,
    kind: TraitKind,
    training: bool,
) -> Result<TraitBatch> {
    let (m, k) = (params.snps(), params.latent_dim());
    if x.cols() != m || z.cols() != k {
        return Err(dim_err(format!("trait model expects {m} SNPs and K = {k}, got {} and {}", x.cols(), z.cols())));
    }
    let rows = x.rows();
    let implicit_noise: Vec<f64> = match kind {
        TraitKind::RealImplicit => noise.to_vec(),
        _ => vec![0.0; rows],
    };
    let inputs = trait_inputs(x, z, &implicit_noise)?;
    let (output, hidden1, cache) = match params {
        TraitModelParams::Linear { coef, bias, .. } => {
            let out = (0..rows)
                .map(|i| inputs.row(i)[..m + k].iter().zip(coef).map(|(a, b)| a * b).sum::<f64>() + bias)
                .collect();
            (out, Matrix::zeros(rows, 0), None)
        }
        TraitModelParams::Neural { net, .. } => {
            let out = mlp_forward(net, &inputs, training)?;
            (out.output.into_vec(), out.hidden1, Some(out.cache))
        }
    };
    let y = output
        .iter()
        .zip(noise)
        .map(|(&o, &e)| match (kind, params) {
            (TraitKind::RealImplicit, TraitModelParams::Neural { .. }) => o,
            (TraitKind::Categorical(l), _) => discretize(o + e, l) as f64,
            _ => o + e,
        })
        .collect();
    Ok(TraitBatch { output, y, hidden1, cache, inputs })
}

/// Single-individual trait process (inference mode).
pub fn trait_forward(x_row: &[u8], z: &[f64], noise: f64, params: &TraitModelParams, kind: TraitKind) -> Result<(f64, Vec<f64>)> {
    let x = Matrix::from_vec(1, x_row.len(), x_row.iter().map(|&g| g as f64).collect())?;
    let zm = Matrix::from_vec(1, z.len(), z.to_vec())?;
    let b = trait_forward_batch(&x, &zm, &[noise], params, kind, false)?;
    Ok((b.y[0], b.hidden1.row(0).to_vec()))
}

/// Gradient through [`trait_forward_batch`]'s deterministic output.
/// Returns `(d_params_flat, d_inputs)` where `d_inputs` is `rows × (M+K+1)`.
pub fn trait_backward(params: &TraitModelParams, batch: &TraitBatch, d_output: &[f64]) -> Result<(Vec<f64>, Matrix)> {
    let rows = batch.inputs.rows();
    if d_output.len() != rows {
        return Err(dim_err("d_output must have one entry per row"));
    }
    match params {
        TraitModelParams::Linear { coef, m, k, .. } => {
            let mut g = vec![0.0; coef.len() + 1];
            let mut d_in = Matrix::zeros(rows, m + k + 1);
            for i in 0..rows {
                let d = d_output[i];
                for (gj, xj) in g.iter_mut().zip(&batch.inputs.row(i)[..m + k]) {
                    *gj += d * xj;
                }
                g[m + k] += d;
                for (j, c) in coef.iter().enumerate() {
                    d_in[(i, j)] = d * c;
                }
            }
            Ok((g, d_in))
        }
        TraitModelParams::Neural { net, .. } => {
            let cache = batch.cache.as_ref().expect("neural forward keeps its cache");
            let (grads, d_in) = mlp_backward(net, cache, &Matrix::from_vec(rows, 1, d_output.to_vec())?)?;
            Ok((grads.flat(), d_in))
        }
    }
}

/// Gradient of a loss on the first hidden layer back to the trait network.
pub fn trait_backward_from_hidden1(params: &TraitModelParams, batch: &TraitBatch, d_hidden1: &Matrix) -> Result<Vec<f64>> {
    let TraitModelParams::Neural { net, .. } = params else {
        return Err(Error::Config("hidden-layer gradients need the neural trait model".into()));
    };
    let cache = batch.cache.as_ref().expect("neural forward keeps its cache");
    Ok(crate::numerics::mlp::mlp_backward_from_hidden1(net, cache, d_hidden1)?.flat())
}

pub fn update_trait_running_moments(params: &mut TraitModelParams, batch: &TraitBatch) {
    if let (TraitModelParams::Neural { net, .. }, Some(cache)) = (params, &batch.cache) {
        net.update_running_moments(cache);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorValue {
    /// `−scale · Σ_m √(group size) · ‖W_group(m)‖₂`
    pub group_lasso: f64,
    /// Standard-normal log density of the remaining weights and biases.
    pub normal: f64,
    pub grad: Vec<f64>,
}

impl PriorValue {
    pub fn total(&self) -> f64 {
        self.group_lasso + self.normal
    }
}

/// Group-Lasso prior on the first-layer weights of each SNP, standard normal
/// on other weights and biases (batch-norm scale/shift carry no prior).
/// The subgradient at an exactly zero group is zero.
pub fn group_lasso_log_prior(params: &TraitModelParams, scale: f64) -> PriorValue {
    let flat = params.flat();
    let mut grad = vec![0.0; flat.len()];
    let mut group_lasso = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut normal_on = |range: std::ops::Range<usize>, grad: &mut [f64]| {
        for i in range {
            sq += flat[i] * flat[i];
            count += 1;
            grad[i] = -flat[i];
        }
    };
    match params {
        TraitModelParams::Linear { m, coef, .. } => {
            for j in 0..*m {
                let v = flat[j];
                group_lasso -= scale * v.abs();
                grad[j] = if v == 0.0 { 0.0 } else { -scale * v.signum() };
            }
            normal_on(*m..coef.len() + 1, &mut grad);
        }
        TraitModelParams::Neural { m, net, .. } => {
            let h1 = net.spec.hidden_dims[0];
            let in_dim = net.spec.input_dim;
            let root = (h1 as f64).sqrt();
            for j in 0..*m {
                let g = &flat[j * h1..(j + 1) * h1];
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                group_lasso -= scale * root * norm;
                if norm > 0.0 {
                    for (d, v) in grad[j * h1..(j + 1) * h1].iter_mut().zip(g) {
                        *d = -scale * root * v / norm;
                    }
                }
            }
            normal_on(m * h1..in_dim * h1, &mut grad);
            let mut offset = in_dim * h1;
            let bn = net.norms.is_some();
            let [_, l1, l2] = &net.layers;
            let layer_sizes: Vec<(usize, bool)> = if bn {
                vec![
                    (2 * h1, false),
                    (l1.weight.as_slice().len(), true),
                    (2 * net.spec.hidden_dims[1], false),
                    (l2.weight.as_slice().len() + l2.bias.len(), true),
                ]
            } else {
                vec![(h1, true), (l1.weight.as_slice().len() + l1.bias.len(), true), (l2.weight.as_slice().len() + l2.bias.len(), true)]
            };
            for (len, has_prior) in layer_sizes {
                if has_prior {
                    normal_on(offset..offset + len, &mut grad);
                }
                offset += len;
            }
            debug_assert_eq!(offset, flat.len());
        }
    }
    let normal = -0.5 * sq - 0.5 * count as f64 * LN_2PI;
    PriorValue { group_lasso, normal, grad }
}

/// Per-SNP log-likelihood summed over a block, with the logit gradient.
/// `rows[i]` and `cols[j]` are the individual and SNP of logit `(i, j)`.
/// Rows are evaluated in parallel and summed in index order.
pub fn snp_block_log_lik(x: &GenotypeMatrix, rows: &[usize], cols: &[usize], logits: &Matrix) -> (f64, Matrix) {
    use rayon::prelude::*;
    let width = cols.len();
    let mut d = Matrix::zeros(rows.len(), width);
    if width == 0 {
        return (0.0, d);
    }
    let sums: Vec<f64> = d
        .as_mut_slice()
        .par_chunks_mut(width)
        .zip(rows.par_iter())
        .enumerate()
        .map(|(i, (drow, &n))| {
            let geno = x.individual(n);
            let lrow = logits.row(i);
            let mut s = 0.0;
            for j in 0..width {
                let (lp, g) = snp_log_prob_unchecked(geno[cols[j]], lrow[j]);
                s += lp;
                drow[j] = g;
            }
            s
        })
        .collect();
    (sums.iter().sum(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradient_check;

    #[test]
    fn prior_values() {
        let (v, g) = log_prior_z(&[0.0; 4]);
        assert!((v + 2.0 * LN_2PI).abs() < 1e-12);
        assert!(g.iter().all(|&x| x == 0.0));
        let z = [0.3, -1.2, 2.0];
        let (a, ga) = log_prior_w(&z);
        let (b, _) = log_prior_w(&z.map(|v| -v));
        assert_eq!(a, b);
        assert_eq!(ga, vec![-0.3, 1.2, -2.0]);
    }

    #[test]
    fn logistic_fa_logits() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.0, 3.0]]).unwrap();
        let f = snp_logits(&z, &w, &SnpModelParams::LogisticFa, false).unwrap();
        assert_eq!(f.logits[(0, 0)], 0.0);
        assert_eq!(sigmoid(f.logits[(0, 0)]), 0.5);

        let k = 4;
        let c = (2.0f64).sqrt() / (k as f64).sqrt();
        let z = Matrix::filled(1, k, c);
        let w = Matrix::filled(1, k, c);
        let f = snp_logits(&z, &w, &SnpModelParams::LogisticFa, false).unwrap();
        assert!((f.logits[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((sigmoid(f.logits[(0, 0)]) - 0.880_797_077_977_882_3).abs() < 1e-12);
    }

    #[test]
    fn neural_zero_output_layer_is_bias() {
        let cfg = IcmConfig { k: 2, snp_hidden: [5, 4], snp_model: SnpModel::Neural, ..IcmConfig::default() };
        let mut p = SnpModelParams::init(&cfg, &mut RngStream::new(1)).unwrap();
        if let SnpModelParams::Neural(net) = &mut p {
            net.layers[2].weight = Matrix::zeros(4, 1);
            net.layers[2].bias = vec![0.7];
        }
        let mut rng = RngStream::new(2);
        let z = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let w = Matrix::from_fn(5, 2, |_, _| rng.normal());
        let f = snp_logits(&z, &w, &p, true).unwrap();
        assert_eq!(f.logits.shape(), (3, 5));
        assert!(f.logits.as_slice().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn binomial_log_prob_values() {
        assert!((snp_log_prob(1, 0.0).unwrap().0 + LN_2).abs() < 1e-12);
        assert!(snp_log_prob(2, 40.0).unwrap().0.abs() < 1e-15);
        assert_eq!(snp_log_prob(0, 0.0).unwrap().1, -1.0);
        assert!(matches!(snp_log_prob(3, 0.0), Err(Error::Domain(_))));
        let fd = |x: u8, l: f64| {
            let h = 1e-6;
            (snp_log_prob(x, l + h).unwrap().0 - snp_log_prob(x, l - h).unwrap().0) / (2.0 * h)
        };
        for x in 0..=2u8 {
            for l in [-3.0, -0.2, 0.0, 1.7] {
                assert!((fd(x, l) - snp_log_prob(x, l).unwrap().1).abs() < 1e-8);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn binomial_pmf_normalized(logit in -30.0f64..30.0) {
            let s: f64 = (0..=2u8).map(|x| snp_log_prob(x, logit).unwrap().0.exp()).sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn categorical_probs_sum_to_one(s in -10.0f64..10.0, levels in 2usize..8) {
            let p = categorical_probs(s, levels);
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn categorical_gradient_matches_fd() {
        for levels in [2, 3, 5] {
            for level in 0..levels {
                for s in [-2.0, 0.1, 1.3] {
                    let h = 1e-6;
                    let fd = (categorical_log_prob(level, s + h, levels).0 - categorical_log_prob(level, s - h, levels).0) / (2.0 * h);
                    let g = categorical_log_prob(level, s, levels).1;
                    assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "{levels} {level} {s}");
                }
            }
        }
        assert_eq!(cutpoints(4), vec![-3.0, 0.0, 3.0]);
    }

    fn small_neural(m: usize, k: usize, seed: u64) -> TraitModelParams {
        let cfg = IcmConfig { k, trait_hidden: [4, 3], ..IcmConfig::default() };
        TraitModelParams::init(&cfg, m, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn linear_projection() {
        let mut p = TraitModelParams::Linear { m: 3, k: 2, coef: vec![0.0; 5], bias: 0.0 };
        if let TraitModelParams::Linear { coef, .. } = &mut p {
            coef[0] = 1.0;
        }
        let (y, h) = trait_forward(&[2, 1, 0], &[0.5, -0.5], 0.0, &p, TraitKind::RealLocationShift).unwrap();
        assert_eq!(y, 2.0);
        assert!(h.is_empty());
    }

    #[test]
    fn zero_final_layer_gives_bias() {
        let mut p = small_neural(5, 2, 3);
        if let TraitModelParams::Neural { net, .. } = &mut p {
            net.layers[2].weight = Matrix::zeros(net.layers[2].weight.rows(), 1);
            net.layers[2].bias = vec![-1.25];
        }
        let (y, h) = trait_forward(&[0, 1, 2, 1, 0], &[0.3, 0.9], 0.4, &p, TraitKind::RealImplicit).unwrap();
        assert_eq!(y, -1.25);
        assert_eq!(h.len(), 4);
    }

    #[test]
    fn location_shift_identity() {
        let p = small_neural(4, 2, 4);
        let x = [1u8, 0, 2, 1];
        let z = [0.2, -0.1];
        let (base, _) = trait_forward(&x, &z, 0.0, &p, TraitKind::RealLocationShift).unwrap();
        let (y, _) = trait_forward(&x, &z, 0.731, &p, TraitKind::RealLocationShift).unwrap();
        assert!((y - base - 0.731).abs() < 1e-12);
    }

    #[test]
    fn implicit_noise_marginal_is_finite() {
        let p = small_neural(4, 2, 5);
        let mut rng = RngStream::new(6);
        let ys: Vec<f64> = (0..10_000)
            .map(|_| trait_forward(&[1, 2, 0, 1], &[0.5, 0.5], rng.normal(), &p, TraitKind::RealImplicit).unwrap().0)
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        assert!(mean.is_finite() && var.is_finite());
        let again = trait_forward(&[1, 2, 0, 1], &[0.5, 0.5], 0.3, &p, TraitKind::RealImplicit).unwrap();
        assert_eq!(again, trait_forward(&[1, 2, 0, 1], &[0.5, 0.5], 0.3, &p, TraitKind::RealImplicit).unwrap());
    }

    #[test]
    fn group_lasso_arithmetic() {
        let mut p = small_neural(3, 1, 7);
        if let TraitModelParams::Neural { net, .. } = &mut p {
            for j in 0..3 {
                net.layers[0].weight.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(group_lasso_log_prior(&p, 1.0).group_lasso, 0.0);
        if let TraitModelParams::Neural { net, .. } = &mut p {
            net.layers[0].weight.row_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        }
        // group size 4, ‖·‖ = 2, scale 1
        assert!((group_lasso_log_prior(&p, 1.0).group_lasso + 4.0).abs() < 1e-12);
    }

    #[test]
    fn group_lasso_gradient_matches_fd() {
        for bn in [true, false] {
            let cfg = IcmConfig { k: 2, trait_hidden: [4, 3], batch_norm: bn, ..IcmConfig::default() };
            let p = TraitModelParams::init(&cfg, 5, &mut RngStream::new(8)).unwrap();
            let err = gradient_check(
                |v| {
                    let mut q = p.clone();
                    q.set_flat(v)?;
                    let pv = group_lasso_log_prior(&q, 0.7);
                    Ok((pv.total(), pv.grad))
                },
                &p.flat(),
            )
            .unwrap();
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn snp_neural_backward_matches_fd() {
        let cfg = IcmConfig { k: 2, snp_hidden: [5, 4], snp_model: SnpModel::Neural, ..IcmConfig::default() };
        let mut rng = RngStream::new(9);
        let phi = SnpModelParams::init(&cfg, &mut rng).unwrap();
        let z = Matrix::from_fn(3, 2, |_, _| rng.normal());
        let w = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let x = GenotypeMatrix::new(3, 4, vec![0, 1, 2, 1, 2, 2, 0, 1, 1, 0, 0, 2]).unwrap();
        let rows = [0, 1, 2];
        let cols = [0, 1, 2, 3];
        let loss = |phi: &SnpModelParams, z: &Matrix, w: &Matrix| -> Result<(f64, Vec<f64>, Matrix, Matrix)> {
            let f = snp_logits(z, w, phi, true)?;
            let (ll, d) = snp_block_log_lik(&x, &rows, &cols, &f.logits);
            let (dz, dw, dp) = snp_logits_backward(z, w, phi, &f, &d)?;
            Ok((ll, dp, dz, dw))
        };
        let err = gradient_check(
            |v| {
                let mut p = phi.clone();
                p.set_flat(v)?;
                let (l, g, _, _) = loss(&p, &z, &w)?;
                Ok((l, g))
            },
            &phi.flat(),
        )
        .unwrap();
        assert!(err <= 1e-5, "phi {err}");
        let err = gradient_check(
            |v| {
                let zz = Matrix::from_vec(3, 2, v.to_vec())?;
                let (l, _, dz, _) = loss(&phi, &zz, &w)?;
                Ok((l, dz.into_vec()))
            },
            z.as_slice(),
        )
        .unwrap();
        assert!(err <= 1e-5, "z {err}");
    }
}
