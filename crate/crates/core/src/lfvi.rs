//! Two-stage variational inference.
//!
//! Stage 1 fits diagonal-Gaussian `q(z_n)`, `q(w_m)` and a point estimate of
//! the SNP network by reparameterized stochastic gradients over SNP
//! minibatches; it never sees the trait. Stage 2 fits the trait model either
//! by Monte Carlo EM (tractable densities) or against a learned log-ratio
//! `r(y, h1)` (implicit traits).

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::icm::{
    categorical_log_prob, group_lasso_log_prior, log_prior_phi, snp_block_log_lik, snp_logits, snp_logits_backward,
    trait_backward, trait_backward_from_hidden1, trait_forward_batch, update_trait_running_moments, IcmConfig,
    SnpModelParams, TraitBatch, TraitKind, TraitModel, TraitModelParams,
};
use crate::numerics::stats::mean_and_se;
use crate::numerics::{mlp_backward, mlp_forward, sigmoid, softplus, AdamState, Matrix, MlpParams, MlpSpec, RngStream, LN_2PI};
use crate::simgen::GenotypeMatrix;

pub const LOG_SIGMA_BOUNDS: (f64, f64) = (-8.0, 4.0);
pub const INIT_LOG_SIGMA: f64 = -2.0;
/// Standard deviation of the initial variational means.
pub const INIT_MEAN_SD: f64 = 0.1;

pub fn clamp_log_sigma(v: f64) -> f64 {
    v.clamp(LOG_SIGMA_BOUNDS.0, LOG_SIGMA_BOUNDS.1)
}

/// `mu + exp(log_sigma) ⊙ noise` with `noise ~ N(0, I)`; returns `(sample, noise)`.
pub fn reparam_sample(mu: &[f64], log_sigma: &[f64], rng: &mut RngStream) -> (Vec<f64>, Vec<f64>) {
    let noise: Vec<f64> = (0..mu.len()).map(|_| rng.normal()).collect();
    (reparam_from_noise(mu, log_sigma, &noise), noise)
}

pub fn reparam_from_noise(mu: &[f64], log_sigma: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_sigma)
        .zip(noise)
        .map(|((m, ls), e)| m + clamp_log_sigma(*ls).exp() * e)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTerms {
    /// `log N(s; 0, I) − log N(s; mu, diag σ²)` at `s = mu + σ ⊙ noise`.
    pub value: f64,
    pub d_mu: Vec<f64>,
    pub d_log_sigma: Vec<f64>,
}

/// Prior-minus-variational log density at a reparameterized sample, with
/// gradients through the sample.
pub fn gaussian_entropy_terms(mu: &[f64], log_sigma: &[f64], noise: &[f64]) -> EntropyTerms {
    let mut value = 0.0;
    let mut d_mu = Vec::with_capacity(mu.len());
    let mut d_log_sigma = Vec::with_capacity(mu.len());
    for ((&m, &ls), &e) in mu.iter().zip(log_sigma).zip(noise) {
        let ls = clamp_log_sigma(ls);
        let sigma = ls.exp();
        let s = m + sigma * e;
        // The 2π constants cancel.
        value += -0.5 * s * s + 0.5 * e * e + ls;
        d_mu.push(-s);
        d_log_sigma.push(-s * sigma * e + 1.0);
    }
    EntropyTerms { value, d_mu, d_log_sigma }
}

/// Adam with an independent step counter per row, so that rows updated only
/// when their SNP (or individual) is in the minibatch get their own bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAdam {
    pub step_size: f64,
    pub width: usize,
    pub steps: Vec<u64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl RowAdam {
    pub fn new(rows: usize, width: usize, step_size: f64) -> Self {
        RowAdam { step_size, width, steps: vec![0; rows], m: vec![0.0; rows * width], v: vec![0.0; rows * width] }
    }

    /// Descent step on `params` (all rows) for the listed rows; `grads` row
    /// `i` belongs to `rows[i]`.
    pub fn step_rows(&mut self, params: &mut Matrix, rows: &[usize], grads: &Matrix) -> Result<()> {
        let w = self.width;
        if params.cols() != w || grads.cols() != w || grads.rows() != rows.len() || params.rows() != self.steps.len() {
            return Err(dim_err("row adam: shape mismatch"));
        }
        for (i, &r) in rows.iter().enumerate() {
            self.steps[r] += 1;
            let t = self.steps[r] as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let p = params.row_mut(r);
            for (j, &g) in grads.row(i).iter().enumerate() {
                let s = r * w + j;
                self.m[s] = ADAM_BETA1 * self.m[s] + (1.0 - ADAM_BETA1) * g;
                self.v[s] = ADAM_BETA2 * self.v[s] + (1.0 - ADAM_BETA2) * g * g;
                let update = self.step_size * (self.m[s] / bc1) / ((self.v[s] / bc2).sqrt() + ADAM_EPS);
                if update.is_finite() {
                    p[j] -= update;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub snp_batch_size: usize,
    /// `None` updates every `z_n` at each step.
    pub individual_batch_size: Option<usize>,
    pub epochs: usize,
    pub step_size_z: f64,
    pub step_size_w: f64,
    pub step_size_phi: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            snp_batch_size: 512,
            individual_batch_size: None,
            epochs: 2,
            step_size_z: 0.005,
            step_size_w: 0.005,
            step_size_phi: 0.005,
            mc_samples: 1,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.snp_batch_size == 0 || self.individual_batch_size == Some(0) || self.mc_samples == 0 {
            return Err(Error::Config("batch sizes and mc_samples must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("stage-1 epochs must be >= 1".into()));
        }
        for lr in [self.step_size_z, self.step_size_w, self.step_size_phi] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config("step sizes must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub mu_z: RowAdam,
    pub log_sigma_z: RowAdam,
    pub mu_w: RowAdam,
    pub log_sigma_w: RowAdam,
    pub phi: AdamState,
    pub theta: Option<AdamState>,
    pub ratio: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub config: IcmConfig,
    /// `N × K`
    pub mu_z: Matrix,
    pub log_sigma_z: Matrix,
    /// `M × K`
    pub mu_w: Matrix,
    pub log_sigma_w: Matrix,
    pub phi: SnpModelParams,
    pub theta: Option<TraitModelParams>,
    pub ratio: Option<MlpParams>,
    pub opt: Optimizers,
    /// Completed stage-1 epochs.
    pub stage1_epochs: usize,
    /// Completed stage-2 epochs.
    pub stage2_epochs: usize,
}

impl VariationalState {
    pub fn init(config: &IcmConfig, individuals: usize, snps: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.k;
        let root = RngStream::new(seed).derive(0x1a17);
        let mut rz = root.derive(0);
        let mut rw = root.derive(1);
        let mu_z = Matrix::from_fn(individuals, k, |_, _| INIT_MEAN_SD * rz.normal());
        let mu_w = Matrix::from_fn(snps, k, |_, _| INIT_MEAN_SD * rw.normal());
        let phi = SnpModelParams::init(config, &mut root.derive(2))?;
        let n_phi = phi.flat().len();
        Ok(VariationalState {
            config: config.clone(),
            mu_z,
            log_sigma_z: Matrix::filled(individuals, k, INIT_LOG_SIGMA),
            mu_w,
            log_sigma_w: Matrix::filled(snps, k, INIT_LOG_SIGMA),
            phi,
            theta: None,
            ratio: None,
            opt: Optimizers {
                mu_z: RowAdam::new(individuals, k, 0.0),
                log_sigma_z: RowAdam::new(individuals, k, 0.0),
                mu_w: RowAdam::new(snps, k, 0.0),
                log_sigma_w: RowAdam::new(snps, k, 0.0),
                phi: AdamState::new(n_phi, 0.0),
                theta: None,
                ratio: None,
            },
            stage1_epochs: 0,
            stage2_epochs: 0,
        })
    }

    pub fn individuals(&self) -> usize {
        self.mu_z.rows()
    }

    pub fn snps(&self) -> usize {
        self.mu_w.rows()
    }

    /// Posterior means `E_q[z_n]`.
    pub fn z_hat(&self) -> &Matrix {
        &self.mu_z
    }

    fn check_data(&self, x: &GenotypeMatrix) -> Result<()> {
        if x.individuals() != self.individuals() || x.snps() != self.snps() {
            return Err(dim_err(format!(
                "state is {}x{} (individuals x SNPs), data is {}x{}",
                self.individuals(),
                self.snps(),
                x.individuals(),
                x.snps()
            )));
        }
        Ok(())
    }
}

fn gather_rows(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(rows.len(), m.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(r));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboBlocks {
    pub x_likelihood: f64,
    pub w_prior_entropy: f64,
    pub z_prior_entropy: f64,
    pub phi_prior: f64,
}

impl ElboBlocks {
    pub const NAMES: [&'static str; 5] = ["x_likelihood", "w_prior_entropy", "z_prior_entropy", "phi_prior", "elbo"];

    pub fn total(&self) -> f64 {
        self.x_likelihood + self.w_prior_entropy + self.z_prior_entropy + self.phi_prior
    }

    pub fn values(&self) -> [f64; 5] {
        [self.x_likelihood, self.w_prior_entropy, self.z_prior_entropy, self.phi_prior, self.total()]
    }
}

/// Frozen reparameterization noise for one step, one matrix per MC sample.
#[derive(Debug, Clone)]
pub struct Stage1Noise {
    pub z: Vec<Matrix>,
    pub w: Vec<Matrix>,
}

impl Stage1Noise {
    pub fn draw(individuals: usize, snps: usize, k: usize, samples: usize, rng: &mut RngStream) -> Self {
        let mut z = Vec::with_capacity(samples);
        let mut w = Vec::with_capacity(samples);
        for _ in 0..samples {
            z.push(Matrix::from_fn(individuals, k, |_, _| rng.normal()));
            w.push(Matrix::from_fn(snps, k, |_, _| rng.normal()));
        }
        Stage1Noise { z, w }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Grads {
    /// Rows follow the batch's individual order.
    pub mu_z: Matrix,
    pub log_sigma_z: Matrix,
    /// Rows follow the batch's SNP order.
    pub mu_w: Matrix,
    pub log_sigma_w: Matrix,
    pub phi: Vec<f64>,
}

/// Unbiased estimate of the full stage-1 ELBO from one (individuals × SNPs)
/// block, and its exact gradient for the given noise. The likelihood is
/// scaled by `(N/|I|)(M/|B|)`, the `w` terms by `M/|B|` and the `z` terms by
/// `N/|I|`.
pub fn stage1_objective(
    x: &GenotypeMatrix,
    state: &VariationalState,
    individuals: &[usize],
    snps: &[usize],
    noise: &Stage1Noise,
) -> Result<(ElboBlocks, Stage1Grads)> {
    state.check_data(x)?;
    let k = state.config.k;
    let samples = noise.z.len();
    if samples == 0 || noise.w.len() != samples {
        return Err(dim_err("stage-1 noise needs matching z and w samples"));
    }
    let c_n = state.individuals() as f64 / individuals.len() as f64;
    let c_m = state.snps() as f64 / snps.len() as f64;
    let inv_s = 1.0 / samples as f64;

    let mu_z = gather_rows(&state.mu_z, individuals);
    let ls_z = gather_rows(&state.log_sigma_z, individuals);
    let mu_w = gather_rows(&state.mu_w, snps);
    let ls_w = gather_rows(&state.log_sigma_w, snps);

    let mut blocks = ElboBlocks::default();
    let mut g_mu_z = Matrix::zeros(individuals.len(), k);
    let mut g_ls_z = Matrix::zeros(individuals.len(), k);
    let mut g_mu_w = Matrix::zeros(snps.len(), k);
    let mut g_ls_w = Matrix::zeros(snps.len(), k);
    let mut g_phi = vec![0.0; state.phi.flat().len()];

    for s in 0..samples {
        let (ez, ew) = (&noise.z[s], &noise.w[s]);
        if ez.shape() != mu_z.shape() || ew.shape() != mu_w.shape() {
            return Err(dim_err("stage-1 noise does not match the batch"));
        }
        let z = Matrix::from_vec(mu_z.rows(), k, reparam_from_noise(mu_z.as_slice(), ls_z.as_slice(), ez.as_slice()))?;
        let w = Matrix::from_vec(mu_w.rows(), k, reparam_from_noise(mu_w.as_slice(), ls_w.as_slice(), ew.as_slice()))?;
        let fwd = snp_logits(&z, &w, &state.phi, true)?;
        let (ll, d_logits) = snp_block_log_lik(x, individuals, snps, &fwd.logits);
        let (dz, dw, dphi) = snp_logits_backward(&z, &w, &state.phi, &fwd, &d_logits)?;
        let ent_z = gaussian_entropy_terms(mu_z.as_slice(), ls_z.as_slice(), ez.as_slice());
        let ent_w = gaussian_entropy_terms(mu_w.as_slice(), ls_w.as_slice(), ew.as_slice());

        blocks.x_likelihood += inv_s * c_n * c_m * ll;
        blocks.z_prior_entropy += inv_s * c_n * ent_z.value;
        blocks.w_prior_entropy += inv_s * c_m * ent_w.value;

        let accumulate = |g_mu: &mut Matrix, g_ls: &mut Matrix, d: &Matrix, ls: &Matrix, e: &Matrix, ent: &EntropyTerms, c_lik: f64, c_ent: f64| {
            let (gm, gl) = (g_mu.as_mut_slice(), g_ls.as_mut_slice());
            for i in 0..gm.len() {
                let sigma = clamp_log_sigma(ls.as_slice()[i]).exp();
                let dl = d.as_slice()[i] * c_lik;
                gm[i] += inv_s * (dl + c_ent * ent.d_mu[i]);
                gl[i] += inv_s * (dl * sigma * e.as_slice()[i] + c_ent * ent.d_log_sigma[i]);
            }
        };
        accumulate(&mut g_mu_z, &mut g_ls_z, &dz, &ls_z, ez, &ent_z, c_n * c_m, c_n);
        accumulate(&mut g_mu_w, &mut g_ls_w, &dw, &ls_w, ew, &ent_w, c_n * c_m, c_m);
        for (g, d) in g_phi.iter_mut().zip(&dphi) {
            *g += inv_s * c_n * c_m * d;
        }
    }
    let (lp_phi, g_lp_phi) = log_prior_phi(&state.phi);
    blocks.phi_prior = lp_phi;
    for (g, d) in g_phi.iter_mut().zip(&g_lp_phi) {
        *g += d;
    }
    Ok((blocks, Stage1Grads { mu_z: g_mu_z, log_sigma_z: g_ls_z, mu_w: g_mu_w, log_sigma_w: g_ls_w, phi: g_phi }))
}

fn ensure_finite(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("non-finite gradient in block {name} at coordinate {i}"))),
        None => Ok(()),
    }
}

fn negate(m: &Matrix, scale: f64) -> Matrix {
    m.map(|v| -v / scale)
}

/// One reparameterized Adam step on the batch SNPs' `q(w_m)`, on `φ`, and on
/// `q(z_n)` for the batch individuals. Returns the pre-update ELBO estimate.
///
/// The local blocks are rescaled so that each `w_m` step sees its exact
/// per-SNP gradient over the batch individuals and each `z_n` step sees the
/// `M/|B|`-scaled likelihood plus its own prior and entropy.
pub fn stage1_step(
    x: &GenotypeMatrix,
    state: &mut VariationalState,
    individuals: &[usize],
    snps: &[usize],
    config: &Stage1Config,
    rng: &mut RngStream,
) -> Result<ElboBlocks> {
    let noise = Stage1Noise::draw(individuals.len(), snps.len(), state.config.k, config.mc_samples, rng);
    let (blocks, g) = stage1_objective(x, state, individuals, snps, &noise)?;
    ensure_finite("z", g.mu_z.as_slice())?;
    ensure_finite("z", g.log_sigma_z.as_slice())?;
    ensure_finite("w", g.mu_w.as_slice())?;
    ensure_finite("w", g.log_sigma_w.as_slice())?;
    ensure_finite("phi", &g.phi)?;
    if !blocks.total().is_finite() {
        return Err(Error::Numeric("non-finite stage-1 ELBO estimate".into()));
    }

    let c_n = state.individuals() as f64 / individuals.len() as f64;
    let c_m = state.snps() as f64 / snps.len() as f64;
    let opt = &mut state.opt;
    opt.mu_z.step_size = config.step_size_z;
    opt.log_sigma_z.step_size = config.step_size_z;
    opt.mu_w.step_size = config.step_size_w;
    opt.log_sigma_w.step_size = config.step_size_w;
    opt.phi.step_size = config.step_size_phi;

    opt.mu_w.step_rows(&mut state.mu_w, snps, &negate(&g.mu_w, c_m))?;
    opt.log_sigma_w.step_rows(&mut state.log_sigma_w, snps, &negate(&g.log_sigma_w, c_m))?;
    if !g.phi.is_empty() {
        let mut flat = state.phi.flat();
        let neg: Vec<f64> = g.phi.iter().map(|v| -v).collect();
        opt.phi.step(&mut flat, &neg)?;
        state.phi.set_flat(&flat)?;
    }
    opt.mu_z.step_rows(&mut state.mu_z, individuals, &negate(&g.mu_z, c_n))?;
    opt.log_sigma_z.step_rows(&mut state.log_sigma_z, individuals, &negate(&g.log_sigma_z, c_n))?;
    for &m in snps {
        state.log_sigma_w.row_mut(m).iter_mut().for_each(|v| *v = clamp_log_sigma(*v));
    }
    for &n in individuals {
        state.log_sigma_z.row_mut(n).iter_mut().for_each(|v| *v = clamp_log_sigma(*v));
    }
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Per-step means of each block.
    pub blocks: ElboBlocks,
    pub elbo_mean: f64,
    pub elbo_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage1Report {
    pub epochs: Vec<EpochSummary>,
}

/// Epoch-level random stream; keyed by epoch so a resumed run replays the
/// same draws.
pub fn epoch_stream(seed: u64, stage: u64, epoch: usize) -> RngStream {
    RngStream::new(seed).derive((stage << 48) | epoch as u64)
}

/// Runs stage-1 epochs `state.stage1_epochs .. config.epochs` over shuffled
/// SNP minibatches.
pub fn stage1_fit(x: &GenotypeMatrix, state: &mut VariationalState, config: &Stage1Config) -> Result<Stage1Report> {
    config.validate()?;
    state.check_data(x)?;
    let (n, m) = (state.individuals(), state.snps());
    let mut report = Stage1Report::default();
    while state.stage1_epochs < config.epochs {
        let epoch = state.stage1_epochs;
        let mut rng = epoch_stream(config.seed, 1, epoch);
        let mut order: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut order);
        let mut people: Vec<usize> = (0..n).collect();
        let mut totals = Vec::new();
        let mut sums = ElboBlocks::default();
        for batch in order.chunks(config.snp_batch_size) {
            let individuals: &[usize] = match config.individual_batch_size {
                Some(b) if b < n => {
                    rng.shuffle(&mut people);
                    &people[..b]
                }
                _ => &people,
            };
            let b = stage1_step(x, state, individuals, batch, config, &mut rng)?;
            sums.x_likelihood += b.x_likelihood;
            sums.w_prior_entropy += b.w_prior_entropy;
            sums.z_prior_entropy += b.z_prior_entropy;
            sums.phi_prior += b.phi_prior;
            totals.push(b.total());
        }
        let steps = totals.len();
        let k = steps as f64;
        let (elbo_mean, elbo_se) = mean_and_se(&totals);
        let blocks = ElboBlocks {
            x_likelihood: sums.x_likelihood / k,
            w_prior_entropy: sums.w_prior_entropy / k,
            z_prior_entropy: sums.z_prior_entropy / k,
            phi_prior: sums.phi_prior / k,
        };
        log::info!("stage 1 epoch {epoch}: elbo {elbo_mean:.3}");
        report.epochs.push(EpochSummary { epoch, steps, blocks, elbo_mean, elbo_se });
        state.stage1_epochs += 1;
    }
    Ok(report)
}

/// Monte Carlo estimate of the full stage-1 ELBO at the current state, using
/// every SNP and individual.
pub fn estimate_elbo(x: &GenotypeMatrix, state: &VariationalState, samples: usize, seed: u64) -> Result<(f64, Option<f64>)> {
    let mut rng = RngStream::new(seed).derive(0xe1b0);
    let individuals: Vec<usize> = (0..state.individuals()).collect();
    let mut vals = Vec::with_capacity(samples);
    // Chunk SNPs to bound memory; each chunk estimate is rescaled back.
    let chunk = 4096.min(state.snps().max(1));
    for _ in 0..samples {
        let mut total = 0.0;
        let mut phi_prior = 0.0;
        for cols in (0..state.snps()).collect::<Vec<_>>().chunks(chunk) {
            let noise = Stage1Noise::draw(individuals.len(), cols.len(), state.config.k, 1, &mut rng);
            let (b, _) = stage1_objective(x, state, &individuals, cols, &noise)?;
            let frac = cols.len() as f64 / state.snps() as f64;
            total += frac * (b.x_likelihood + b.w_prior_entropy + b.z_prior_entropy);
            phi_prior = b.phi_prior;
        }
        vals.push(total + phi_prior);
    }
    Ok(mean_and_se(&vals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorObjective {
    /// `Σ_n r(y_n, h_n)`: gradient reaches θ only through `h_n`.
    Proxy,
    /// `Σ_n r(y_n, h_n) − r(y'_n, h_n)`: also differentiates through the
    /// generated trait `y'_n`.
    Contrast,
}

impl fmt::Display for GeneratorObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorObjective::Proxy => "proxy",
            GeneratorObjective::Contrast => "contrast",
        })
    }
}

impl FromStr for GeneratorObjective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "proxy" => Ok(GeneratorObjective::Proxy),
            "contrast" => Ok(GeneratorObjective::Contrast),
            _ => Err(Error::Config(format!("unknown generator objective '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub ratio_step_size: f64,
    pub ratio_hidden: [usize; 2],
    /// Ratio-estimator steps per generator step.
    pub ratio_steps: usize,
    pub generator: GeneratorObjective,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 50,
            batch_size: 100,
            step_size: 0.005,
            ratio_step_size: 0.005,
            ratio_hidden: [64, 64],
            ratio_steps: 1,
            generator: GeneratorObjective::Contrast,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.ratio_hidden.contains(&0) {
            return Err(Error::Config("stage-2 batch size and ratio hidden sizes must be >= 1".into()));
        }
        if !(self.step_size >= 0.0 && self.ratio_step_size >= 0.0) {
            return Err(Error::Config("stage-2 step sizes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Stage2Report {
    /// Per-epoch mean of the objective ascended for θ.
    pub objective: Vec<f64>,
    /// Per-epoch mean ratio loss (likelihood-free path only).
    pub ratio_loss: Vec<f64>,
}

fn ensure_theta(state: &mut VariationalState, seed: u64, step_size: f64) -> Result<()> {
    if state.theta.is_none() {
        let mut rng = RngStream::new(seed).derive(0x7e7a);
        let theta = TraitModelParams::init(&state.config, state.snps(), &mut rng)?;
        state.opt.theta = Some(AdamState::new(theta.flat().len(), step_size));
        state.theta = Some(theta);
    }
    Ok(())
}

fn check_traits(state: &VariationalState, y: &[f64]) -> Result<()> {
    if y.len() != state.individuals() {
        return Err(dim_err(format!("{} traits for {} individuals", y.len(), state.individuals())));
    }
    if let TraitKind::Categorical(l) = state.config.trait_kind {
        if let Some(v) = y.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v >= l as f64) {
            return Err(Error::Domain(format!("categorical trait value {v} outside 0..{l}")));
        }
    }
    Ok(())
}

/// Samples `z'_n ~ q(z_n)` for the listed individuals.
fn sample_z(state: &VariationalState, rows: &[usize], rng: &mut RngStream) -> Result<Matrix> {
    let mu = gather_rows(&state.mu_z, rows);
    let ls = gather_rows(&state.log_sigma_z, rows);
    let (s, _) = reparam_sample(mu.as_slice(), ls.as_slice(), rng);
    Matrix::from_vec(rows.len(), state.config.k, s)
}

/// Monte Carlo EM objective on a batch: `scale · Σ_n log p(y_n | x_n, z_n, θ)
/// + log p(θ)` and its gradient in θ.
pub fn stage2_tractable_objective(
    x: &Matrix,
    z: &Matrix,
    y: &[f64],
    theta: &TraitModelParams,
    kind: TraitKind,
    scale: f64,
    lasso_scale: f64,
) -> Result<(f64, Vec<f64>, TraitBatch)> {
    let zeros = vec![0.0; y.len()];
    let batch = trait_forward_batch(x, z, &zeros, theta, kind, true)?;
    let mut ll = 0.0;
    let mut d_out = Vec::with_capacity(y.len());
    for (&o, &yv) in batch.output.iter().zip(y) {
        let (lp, g) = match kind {
            TraitKind::RealLocationShift => {
                let r = yv - o;
                (-0.5 * r * r - 0.5 * LN_2PI, r)
            }
            TraitKind::Categorical(l) => categorical_log_prob(yv as usize, o, l),
            TraitKind::RealImplicit => {
                return Err(Error::Config("implicit traits have no tractable density; use stage2_fit_lfvi".into()))
            }
        };
        ll += lp;
        d_out.push(scale * g);
    }
    let (mut grad, _) = trait_backward(theta, &batch, &d_out)?;
    let prior = group_lasso_log_prior(theta, lasso_scale);
    for (g, p) in grad.iter_mut().zip(&prior.grad) {
        *g += p;
    }
    Ok((scale * ll + prior.total(), grad, batch))
}

fn adam_ascend(opt: &mut AdamState, params: &mut Vec<f64>, grad: &[f64], step_size: f64) -> Result<()> {
    opt.step_size = step_size;
    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
    opt.step(params, &neg)
}

/// Monte Carlo EM for tractable trait densities; SNPs are never subsampled,
/// individuals are minibatched.
pub fn stage2_fit_tractable(x: &GenotypeMatrix, y: &[f64], state: &mut VariationalState, config: &Stage2Config) -> Result<Stage2Report> {
    config.validate()?;
    state.check_data(x)?;
    check_traits(state, y)?;
    let kind = state.config.trait_kind;
    if kind == TraitKind::RealImplicit {
        return Err(Error::Config("implicit traits have no tractable density; use stage2_fit_lfvi".into()));
    }
    ensure_theta(state, config.seed, config.step_size)?;
    let n = state.individuals();
    let mut report = Stage2Report::default();
    while state.stage2_epochs < config.epochs {
        let mut rng = epoch_stream(config.seed, 2, state.stage2_epochs);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut objs = Vec::new();
        for rows in order.chunks(config.batch_size) {
            let xb = x.rows(rows);
            let zb = sample_z(state, rows, &mut rng)?;
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let theta = state.theta.as_mut().expect("initialized");
            let scale = n as f64 / rows.len() as f64;
            let (obj, grad, batch) = stage2_tractable_objective(&xb, &zb, &yb, theta, kind, scale, state.config.group_lasso_scale)?;
            if !obj.is_finite() {
                return Err(Error::Numeric("non-finite stage-2 objective".into()));
            }
            ensure_finite("theta", &grad)?;
            let mut flat = theta.flat();
            adam_ascend(state.opt.theta.as_mut().expect("initialized"), &mut flat, &grad, config.step_size)?;
            theta.set_flat(&flat)?;
            update_trait_running_moments(theta, &batch);
            objs.push(obj);
        }
        report.objective.push(objs.iter().sum::<f64>() / objs.len() as f64);
        state.stage2_epochs += 1;
    }
    Ok(report)
}

pub fn ratio_spec(h1_dim: usize, hidden: [usize; 2]) -> MlpSpec {
    MlpSpec::new(1 + h1_dim, hidden, 1)
}

fn ratio_inputs(y: &[f64], h1: &Matrix) -> Result<Matrix> {
    Matrix::from_vec(y.len(), 1, y.to_vec())?.hcat(h1)
}

/// `r(y_i, h_i)` for each row.
pub fn ratio_forward(ratio: &MlpParams, y: &[f64], h1: &Matrix) -> Result<Vec<f64>> {
    Ok(mlp_forward(ratio, &ratio_inputs(y, h1)?, false)?.output.into_vec())
}

#[derive(Debug, Clone)]
pub struct RatioLoss {
    pub value: f64,
    /// Gradient in the ratio parameters (flat order).
    pub grad: Vec<f64>,
    pub d_y_fake: Vec<f64>,
    pub d_y_real: Vec<f64>,
    /// Summed over the model and data halves.
    pub d_h1: Matrix,
}

/// `mean −log σ(r(y_fake, h)) + mean −log(1 − σ(r(y_real, h)))`.
pub fn ratio_loss(ratio: &MlpParams, y_real: &[f64], y_fake: &[f64], h1: &Matrix) -> Result<RatioLoss> {
    let b = y_real.len();
    if y_fake.len() != b || h1.rows() != b || b == 0 {
        return Err(dim_err("ratio loss needs equal, nonempty real, fake and hidden batches"));
    }
    let mut inputs = ratio_inputs(y_fake, h1)?.into_vec();
    inputs.extend(ratio_inputs(y_real, h1)?.into_vec());
    let inputs = Matrix::from_vec(2 * b, 1 + h1.cols(), inputs)?;
    let out = mlp_forward(ratio, &inputs, true)?;
    let r = out.output.as_slice();
    let inv_b = 1.0 / b as f64;
    let mut value = 0.0;
    let mut d_r = vec![0.0; 2 * b];
    for i in 0..b {
        value += inv_b * softplus(-r[i]);
        d_r[i] = inv_b * (sigmoid(r[i]) - 1.0);
        value += inv_b * softplus(r[b + i]);
        d_r[b + i] = inv_b * sigmoid(r[b + i]);
    }
    let (grads, d_in) = mlp_backward(ratio, &out.cache, &Matrix::from_vec(2 * b, 1, d_r)?)?;
    let d_y_fake = (0..b).map(|i| d_in[(i, 0)]).collect();
    let d_y_real = (0..b).map(|i| d_in[(b + i, 0)]).collect();
    let d_h1 = Matrix::from_fn(b, h1.cols(), |i, j| d_in[(i, j + 1)] + d_in[(b + i, j + 1)]);
    Ok(RatioLoss { value, grad: grads.flat(), d_y_fake, d_y_real, d_h1 })
}

/// Gradient of the generator objective (scaled by `scale`) with respect to
/// θ, through the trait network forward pass held in `batch`.
pub fn generator_gradient(
    theta: &TraitModelParams,
    ratio: &MlpParams,
    batch: &TraitBatch,
    y_real: &[f64],
    scale: f64,
    objective: GeneratorObjective,
) -> Result<(f64, Vec<f64>)> {
    let b = y_real.len();
    let real_in = ratio_inputs(y_real, &batch.hidden1)?;
    let real = mlp_forward(ratio, &real_in, false)?;
    let ones = Matrix::filled(b, 1, scale);
    let (_, d_real) = mlp_backward(ratio, &real.cache, &ones)?;
    let mut value = scale * real.output.as_slice().iter().sum::<f64>();
    let mut d_h1 = d_real.col_range(1, d_real.cols());
    let mut grad = vec![0.0; theta.flat().len()];
    if objective == GeneratorObjective::Contrast {
        let fake_in = ratio_inputs(&batch.y, &batch.hidden1)?;
        let fake = mlp_forward(ratio, &fake_in, false)?;
        let neg = Matrix::filled(b, 1, -scale);
        let (_, d_fake) = mlp_backward(ratio, &fake.cache, &neg)?;
        value -= scale * fake.output.as_slice().iter().sum::<f64>();
        for i in 0..b {
            for j in 0..d_h1.cols() {
                d_h1[(i, j)] += d_fake[(i, j + 1)];
            }
        }
        let d_y: Vec<f64> = (0..b).map(|i| d_fake[(i, 0)]).collect();
        let (g, _) = trait_backward(theta, batch, &d_y)?;
        grad.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
    }
    if d_h1.cols() > 0 {
        let g = trait_backward_from_hidden1(theta, batch, &d_h1)?;
        grad.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
    }
    Ok((value, grad))
}

/// Likelihood-free stage 2: alternates ratio-estimator descent and generator
/// ascent on the proxy objective plus the group-Lasso prior. On a non-finite
/// loss the state is left at its last finite values and an error returned.
pub fn stage2_fit_lfvi(x: &GenotypeMatrix, y: &[f64], state: &mut VariationalState, config: &Stage2Config) -> Result<Stage2Report> {
    config.validate()?;
    state.check_data(x)?;
    check_traits(state, y)?;
    if state.config.trait_kind != TraitKind::RealImplicit {
        return Err(Error::Config("likelihood-free stage 2 expects an implicit real-valued trait".into()));
    }
    if state.config.trait_model != TraitModel::Neural {
        return Err(Error::Config("likelihood-free stage 2 needs the neural trait model".into()));
    }
    ensure_theta(state, config.seed, config.step_size)?;
    if state.ratio.is_none() {
        let h1 = state.theta.as_ref().expect("initialized").hidden1_dim();
        let ratio = MlpParams::he_init(&ratio_spec(h1, config.ratio_hidden), &mut RngStream::new(config.seed).derive(0x7a71))?;
        state.opt.ratio = Some(AdamState::new(ratio.num_trainable(), config.ratio_step_size));
        state.ratio = Some(ratio);
    }
    let n = state.individuals();
    let lasso = state.config.group_lasso_scale;
    let mut report = Stage2Report::default();
    while state.stage2_epochs < config.epochs {
        let mut rng = epoch_stream(config.seed, 3, state.stage2_epochs);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let (mut objs, mut losses) = (Vec::new(), Vec::new());
        for rows in order.chunks(config.batch_size) {
            let xb = x.rows(rows);
            let zb = sample_z(state, rows, &mut rng)?;
            let eps: Vec<f64> = (0..rows.len()).map(|_| rng.normal()).collect();
            let yb: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let scale = n as f64 / rows.len() as f64;

            let theta = state.theta.as_ref().expect("initialized");
            let batch = trait_forward_batch(&xb, &zb, &eps, theta, TraitKind::RealImplicit, true)?;
            let ratio = state.ratio.as_mut().expect("initialized");
            let ropt = state.opt.ratio.as_mut().expect("initialized");
            for _ in 0..config.ratio_steps {
                let rl = ratio_loss(ratio, &yb, &batch.y, &batch.hidden1)?;
                if !rl.value.is_finite() {
                    return Err(Error::Numeric("ratio loss diverged".into()));
                }
                ensure_finite("ratio", &rl.grad)?;
                let mut flat = ratio.flat();
                ropt.step_size = config.ratio_step_size;
                ropt.step(&mut flat, &rl.grad)?;
                ratio.set_flat(&flat)?;
                losses.push(rl.value);
            }

            let (proxy, mut grad) = generator_gradient(theta, ratio, &batch, &yb, scale, config.generator)?;
            let prior = group_lasso_log_prior(theta, lasso);
            grad.iter_mut().zip(&prior.grad).for_each(|(g, p)| *g += p);
            let obj = proxy + prior.total();
            if !obj.is_finite() {
                return Err(Error::Numeric("generator objective diverged".into()));
            }
            ensure_finite("theta", &grad)?;
            let theta = state.theta.as_mut().expect("initialized");
            let mut flat = theta.flat();
            adam_ascend(state.opt.theta.as_mut().expect("initialized"), &mut flat, &grad, config.step_size)?;
            theta.set_flat(&flat)?;
            update_trait_running_moments(theta, &batch);
            objs.push(obj);
        }
        report.objective.push(objs.iter().sum::<f64>() / objs.len() as f64);
        report.ratio_loss.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
        state.stage2_epochs += 1;
    }
    Ok(report)
}

/// Trait predictions at `z = E_q[z]` in inference mode. Implicit traits are
/// averaged over `noise_samples` draws; categorical traits return the latent
/// score.
pub fn predict_traits(x: &GenotypeMatrix, state: &VariationalState, noise_samples: usize, seed: u64) -> Result<Vec<f64>> {
    state.check_data(x)?;
    let theta = state.theta.as_ref().ok_or_else(|| Error::Config("trait model not fitted".into()))?;
    let kind = state.config.trait_kind;
    let n = state.individuals();
    let rows: Vec<usize> = (0..n).collect();
    let mut out = vec![0.0; n];
    let draws = if kind == TraitKind::RealImplicit { noise_samples.max(1) } else { 1 };
    let chunks: Vec<&[usize]> = rows.chunks(256).collect();
    let parts: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, rs)| {
            let mut rng = RngStream::new(seed).derive(c as u64);
            let xb = x.rows(rs);
            let zb = gather_rows(&state.mu_z, rs);
            let mut acc = vec![0.0; rs.len()];
            for _ in 0..draws {
                let eps: Vec<f64> = if kind == TraitKind::RealImplicit {
                    (0..rs.len()).map(|_| rng.normal()).collect()
                } else {
                    vec![0.0; rs.len()]
                };
                let b = trait_forward_batch(&xb, &zb, &eps, theta, kind, false)?;
                let vals = if kind == TraitKind::RealImplicit { &b.y } else { &b.output };
                acc.iter_mut().zip(vals).for_each(|(a, v)| *a += v / draws as f64);
            }
            Ok(acc)
        })
        .collect();
    let mut i = 0;
    for p in parts {
        for v in p? {
            out[i] = v;
            i += 1;
        }
    }
    Ok(out)
}

pub fn mean_squared_residual(y: &[f64], pred: &[f64]) -> f64 {
    y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}
