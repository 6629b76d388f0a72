//! Finite-difference verification of every hand-written gradient.
//!
//! Each `*_error` function builds one random instance from `seed` and returns
//! the worst relative error reported by [`gradient_check`].

use crate::error::Result;
use crate::icm::{
    group_lasso_log_prior, snp_block_log_lik, snp_log_prob, snp_logits, snp_logits_backward, trait_forward_batch, IcmConfig,
    SnpModel, SnpModelParams, TraitKind, TraitModelParams,
};
use crate::lfvi::{
    gaussian_entropy_terms, generator_gradient, ratio_loss, ratio_spec, stage1_objective, stage2_tractable_objective,
    GeneratorObjective, Stage1Noise, VariationalState,
};
use crate::numerics::{gradient_check, mlp_backward, mlp_forward, Matrix, MlpParams, MlpSpec, RngStream};
use crate::simgen::GenotypeMatrix;

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Random network (4 → 6 → 5 → 2) under a quadratic-plus-linear readout;
/// checks parameter and input gradients.
pub fn mlp_error(batch_norm: bool, skip: bool, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let mut spec = MlpSpec::new(4, [6, 5], 2).with_batch_norm(batch_norm);
    if skip {
        spec = spec.with_skip(2..4);
    }
    let mut p = MlpParams::he_init(&spec, &mut rng)?;
    let mut flat = p.flat();
    flat.iter_mut().for_each(|v| *v += 0.1 * rng.normal());
    p.set_flat(&flat)?;
    let x = Matrix::from_fn(7, 4, |_, _| rng.normal());
    let target = Matrix::from_fn(7, 2, |_, _| rng.normal());
    let loss_grad = |out: &Matrix| {
        let mut loss = 0.0;
        let g = Matrix::from_fn(out.rows(), out.cols(), |i, j| {
            let d = out[(i, j)] - target[(i, j)];
            loss += 0.5 * d * d + 0.3 * out[(i, j)];
            d + 0.3
        });
        (loss, g)
    };
    let param_err = gradient_check(
        |theta: &[f64]| {
            let mut q = p.clone();
            q.set_flat(theta)?;
            let out = mlp_forward(&q, &x, true)?;
            let (loss, g) = loss_grad(&out.output);
            let (grads, _) = mlp_backward(&q, &out.cache, &g)?;
            Ok((loss, grads.flat()))
        },
        &flat,
    )?;
    let input_err = gradient_check(
        |xs: &[f64]| {
            let xm = Matrix::from_vec(7, 4, xs.to_vec())?;
            let out = mlp_forward(&p, &xm, true)?;
            let (loss, g) = loss_grad(&out.output);
            let (_, dx) = mlp_backward(&p, &out.cache, &g)?;
            Ok((loss, dx.into_vec()))
        },
        x.as_slice(),
    )?;
    Ok(param_err.max(input_err))
}

/// Binomial(2, σ(l)) log-pmf summed over six random (x, l) pairs.
pub fn binomial_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let xs: Vec<u8> = (0..6).map(|_| rng.below(3) as u8).collect();
    let logits: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
    gradient_check(
        |l| {
            let mut total = 0.0;
            let mut grad = Vec::with_capacity(l.len());
            for (&x, &v) in xs.iter().zip(l) {
                let (lp, d) = snp_log_prob(x, v)?;
                total += lp;
                grad.push(d);
            }
            Ok((total, grad))
        },
        &logits,
    )
}

/// Group-Lasso plus normal prior on a random trait network. Weights are
/// moved away from zero so the check point is not on a norm kink.
pub fn group_lasso_error(batch_norm: bool, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let cfg = IcmConfig { k: 2, trait_hidden: [4, 3], batch_norm, ..IcmConfig::default() };
    let mut p = TraitModelParams::init(&cfg, 5, &mut rng)?;
    let flat: Vec<f64> = p.flat().iter().map(|v| v + 0.1 * rng.normal()).collect();
    p.set_flat(&flat)?;
    gradient_check(
        |v| {
            let mut q = p.clone();
            q.set_flat(v)?;
            let pv = group_lasso_log_prior(&q, 0.7);
            Ok((pv.total(), pv.grad))
        },
        &flat,
    )
}

/// Gaussian entropy terms for fixed noise.
pub fn entropy_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let k = 3;
    let e: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let p0: Vec<f64> = (0..2 * k).map(|_| rng.normal()).collect();
    gradient_check(
        |p| {
            let t = gaussian_entropy_terms(&p[..k], &p[k..], &e);
            Ok((t.value, [t.d_mu, t.d_log_sigma].concat()))
        },
        &p0,
    )
}

/// Four individuals, three SNPs, K = 2, with randomized variational parameters.
pub fn stage1_instance(snp_model: SnpModel, seed: u64) -> Result<(GenotypeMatrix, VariationalState)> {
    let mut rng = RngStream::new(seed);
    let data: Vec<u8> = (0..12).map(|_| rng.below(3) as u8).collect();
    let x = GenotypeMatrix::new(4, 3, data)?;
    let cfg = IcmConfig { k: 2, snp_hidden: [5, 4], snp_model, ..IcmConfig::default() };
    let mut s = VariationalState::init(&cfg, 4, 3, seed)?;
    s.mu_z = Matrix::from_fn(4, 2, |_, _| rng.normal());
    s.mu_w = Matrix::from_fn(3, 2, |_, _| rng.normal());
    s.log_sigma_z = Matrix::from_fn(4, 2, |_, _| -0.5 + 0.3 * rng.normal());
    s.log_sigma_w = Matrix::from_fn(3, 2, |_, _| -0.5 + 0.3 * rng.normal());
    Ok((x, s))
}

/// Full reparameterized stage-1 objective on a two-SNP batch, with respect to
/// all variational parameters and φ.
pub fn stage1_error(snp_model: SnpModel, seed: u64) -> Result<f64> {
    let (x, s) = stage1_instance(snp_model, seed)?;
    let rows = [0usize, 1, 2, 3];
    let cols = [2usize, 0];
    let noise = Stage1Noise::draw(4, 2, 2, 2, &mut RngStream::new(seed + 100));
    let (nz, nw) = (8, 6);
    let p0 = [s.mu_z.as_slice(), s.log_sigma_z.as_slice(), s.mu_w.as_slice(), s.log_sigma_w.as_slice(), &s.phi.flat()].concat();
    let unpack = |p: &[f64]| -> Result<VariationalState> {
        let mut t = s.clone();
        t.mu_z = Matrix::from_vec(4, 2, p[..nz].to_vec())?;
        t.log_sigma_z = Matrix::from_vec(4, 2, p[nz..2 * nz].to_vec())?;
        t.mu_w = Matrix::from_vec(3, 2, p[2 * nz..2 * nz + nw].to_vec())?;
        t.log_sigma_w = Matrix::from_vec(3, 2, p[2 * nz + nw..2 * nz + 2 * nw].to_vec())?;
        t.phi.set_flat(&p[2 * nz + 2 * nw..])?;
        Ok(t)
    };
    gradient_check(
        |p| {
            let t = unpack(p)?;
            let (b, g) = stage1_objective(&x, &t, &rows, &cols, &noise)?;
            // batch-row gradients back to the full layout
            let mut full = vec![0.0; p.len()];
            full[..nz].copy_from_slice(g.mu_z.as_slice());
            full[nz..2 * nz].copy_from_slice(g.log_sigma_z.as_slice());
            for (i, &m) in cols.iter().enumerate() {
                for c in 0..2 {
                    full[2 * nz + m * 2 + c] = g.mu_w[(i, c)];
                    full[2 * nz + nw + m * 2 + c] = g.log_sigma_w[(i, c)];
                }
            }
            full[2 * nz + 2 * nw..].copy_from_slice(&g.phi);
            Ok((b.total(), full))
        },
        &p0,
    )
}

/// Neural SNP model: Binomial block likelihood with respect to φ and z.
pub fn snp_network_error(seed: u64) -> Result<f64> {
    let cfg = IcmConfig { k: 2, snp_hidden: [5, 4], snp_model: SnpModel::Neural, ..IcmConfig::default() };
    let mut rng = RngStream::new(seed);
    let phi = SnpModelParams::init(&cfg, &mut rng)?;
    let z = Matrix::from_fn(3, 2, |_, _| rng.normal());
    let w = Matrix::from_fn(4, 2, |_, _| rng.normal());
    let x = GenotypeMatrix::new(3, 4, (0..12).map(|_| rng.below(3) as u8).collect())?;
    let rows = [0, 1, 2];
    let cols = [0, 1, 2, 3];
    let loss = |phi: &SnpModelParams, z: &Matrix| -> Result<(f64, Vec<f64>, Matrix)> {
        let f = snp_logits(z, &w, phi, true)?;
        let (ll, d) = snp_block_log_lik(&x, &rows, &cols, &f.logits);
        let (dz, _, dp) = snp_logits_backward(z, &w, phi, &f, &d)?;
        Ok((ll, dp, dz))
    };
    let e_phi = gradient_check(
        |v| {
            let mut p = phi.clone();
            p.set_flat(v)?;
            let (l, g, _) = loss(&p, &z)?;
            Ok((l, g))
        },
        &phi.flat(),
    )?;
    let e_z = gradient_check(
        |v| {
            let zz = Matrix::from_vec(3, 2, v.to_vec())?;
            let (l, _, dz) = loss(&phi, &zz)?;
            Ok((l, dz.into_vec()))
        },
        z.as_slice(),
    )?;
    Ok(e_phi.max(e_z))
}

/// Tractable stage-2 objective (likelihood plus priors) with respect to θ.
pub fn stage2_error(kind: TraitKind, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let (n, m) = (6, 4);
    let cfg = IcmConfig { k: 2, trait_hidden: [4, 3], trait_kind: kind, ..IcmConfig::default() };
    let theta = TraitModelParams::init(&cfg, m, &mut rng)?;
    let x = Matrix::from_fn(n, m, |_, _| rng.below(3) as f64);
    let z = Matrix::from_fn(n, 2, |_, _| rng.normal());
    let y: Vec<f64> = (0..n)
        .map(|_| match kind {
            TraitKind::Categorical(l) => rng.below(l) as f64,
            _ => rng.normal(),
        })
        .collect();
    gradient_check(
        |v| {
            let mut t = theta.clone();
            t.set_flat(v)?;
            let (o, g, _) = stage2_tractable_objective(&x, &z, &y, &t, kind, 1.5, 0.5)?;
            Ok((o, g))
        },
        &theta.flat(),
    )
}

/// Ratio-estimator loss with respect to its parameters and the fake traits.
pub fn ratio_error(seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let mut p = MlpParams::he_init(&ratio_spec(3, [5, 5]), &mut rng)?;
    // zero biases would leave some rows on a ReLU kink
    for l in p.layers.iter_mut() {
        l.bias.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    let b = 4;
    let h = Matrix::from_fn(b, 3, |_, _| rng.normal());
    let yr: Vec<f64> = (0..b).map(|_| rng.normal()).collect();
    let yf: Vec<f64> = (0..b).map(|_| rng.normal()).collect();
    let e1 = gradient_check(
        |v| {
            let mut q = p.clone();
            q.set_flat(v)?;
            let l = ratio_loss(&q, &yr, &yf, &h)?;
            Ok((l.value, l.grad))
        },
        &p.flat(),
    )?;
    let e2 = gradient_check(
        |v| {
            let l = ratio_loss(&p, &yr, v, &h)?;
            Ok((l.value, l.d_y_fake))
        },
        &yf,
    )?;
    Ok(e1.max(e2))
}

/// Generator objective through a fixed ratio estimator, batch norm off.
pub fn generator_error(objective: GeneratorObjective, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let cfg = IcmConfig { k: 2, trait_hidden: [4, 3], batch_norm: false, ..IcmConfig::default() };
    let mut theta = TraitModelParams::init(&cfg, 3, &mut rng)?;
    let flat: Vec<f64> = theta.flat().iter().map(|v| v + 0.1 * rng.normal()).collect();
    theta.set_flat(&flat)?;
    let mut ratio = MlpParams::he_init(&ratio_spec(4, [5, 5]), &mut rng)?;
    for l in ratio.layers.iter_mut() {
        l.bias.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
    }
    let x = Matrix::from_fn(5, 3, |_, _| rng.below(3) as f64);
    let z = Matrix::from_fn(5, 2, |_, _| rng.normal());
    let eps: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
    gradient_check(
        |v| {
            let mut t = theta.clone();
            t.set_flat(v)?;
            let b = trait_forward_batch(&x, &z, &eps, &t, TraitKind::RealImplicit, true)?;
            generator_gradient(&t, &ratio, &b, &y, 2.0, objective)
        },
        &flat,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_error <= GRADIENT_TOLERANCE
    }
}

type Check = (&'static str, Box<dyn Fn(u64) -> Result<f64>>);

/// Every check run over `instances` seeds. A check that errors reports an
/// infinite error.
pub fn gradient_suite(instances: usize) -> Vec<GradCheckRow> {
    let checks: Vec<Check> = vec![
        ("mlp", Box::new(|s| mlp_error(false, false, s))),
        ("mlp_batch_norm", Box::new(|s| mlp_error(true, false, s))),
        ("mlp_skip", Box::new(|s| mlp_error(false, true, s))),
        ("mlp_batch_norm_skip", Box::new(|s| mlp_error(true, true, s))),
        ("binomial_log_pmf", Box::new(binomial_error)),
        ("group_lasso_prior", Box::new(|s| group_lasso_error(s % 2 == 0, s))),
        ("gaussian_entropy", Box::new(entropy_error)),
        ("elbo_logistic", Box::new(|s| stage1_error(SnpModel::LogisticFa, s))),
        ("elbo_neural", Box::new(|s| stage1_error(SnpModel::Neural, s))),
        ("snp_network", Box::new(snp_network_error)),
        ("ratio_loss", Box::new(ratio_error)),
        ("trait_location", Box::new(|s| stage2_error(TraitKind::RealLocationShift, s))),
        ("trait_categorical", Box::new(|s| stage2_error(TraitKind::Categorical(3), s))),
        ("generator_contrast", Box::new(|s| generator_error(GeneratorObjective::Contrast, s))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let max_error = (0..instances as u64)
                .map(|s| f(1000 + s).unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            GradCheckRow { name, instances, max_error }
        })
        .collect()
}
