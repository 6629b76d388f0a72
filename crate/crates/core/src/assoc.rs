//! Per-SNP association tests, baselines, and the precision protocol.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::icm::{IcmConfig, TraitModelParams};
use crate::lfvi::{stage1_fit, Stage1Config, VariationalState};
use crate::numerics::stats::{chi2_1_isf, chi2_1_sf, mean_and_se, median, t_two_sided_p};
use crate::numerics::{top_principal_components, Matrix, RngStream};
use crate::simgen::{simulate, Family, GenotypeMatrix, SimConfig};

/// Default p-value threshold of the simulation study.
pub const DEFAULT_THRESHOLD: f64 = 0.0025;
/// Genome-wide threshold used for the real-data workflow.
pub const GENOME_WIDE_THRESHOLD: f64 = 7.2e-8;
/// Median of the 1-d.o.f. chi-square distribution.
pub const CHI2_1_MEDIAN: f64 = 0.454_936_423_119_572;

const SNP_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Uncorrected,
    Pca,
    Icm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Icm, Method::Pca, Method::Uncorrected];

    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Uncorrected => "uncorrected",
            Method::Pca => "pca",
            Method::Icm => "icm",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uncorrected" => Ok(Method::Uncorrected),
            "pca" => Ok(Method::Pca),
            "icm" => Ok(Method::Icm),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationResult {
    pub method: Method,
    /// t statistic of the SNP coefficient.
    pub statistic: Vec<f64>,
    pub p_value: Vec<f64>,
    /// SNPs whose residualized column vanished (constant or collinear).
    pub degenerate: Vec<bool>,
    pub threshold: f64,
    pub lambda_gc: f64,
}

impl AssociationResult {
    pub fn snps(&self) -> usize {
        self.p_value.len()
    }

    pub fn significant_set(&self) -> Vec<usize> {
        self.significant_at(self.threshold)
    }

    pub fn significant_at(&self, t: f64) -> Vec<usize> {
        (0..self.snps()).filter(|&m| self.p_value[m] <= t).collect()
    }

    pub fn with_threshold(mut self, t: f64) -> Self {
        self.threshold = t;
        self
    }
}

/// Orthonormal basis for the span of the columns, dropping columns that are
/// numerically dependent on earlier ones.
fn orthonormal_basis(columns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in columns {
        let norm0 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = c.clone();
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn residualize(v: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
    }
}

/// Per-SNP OLS of `y` on `[1, x_m, covariates]` with a two-sided t-test on
/// the `x_m` coefficient, computed by residualizing `y` and each SNP on the
/// shared covariates.
pub fn test_with_covariates(
    y: &[f64],
    x: &GenotypeMatrix,
    covariates: Option<&Matrix>,
    method: Method,
    threshold: f64,
) -> Result<AssociationResult> {
    let (n, m) = (x.individuals(), x.snps());
    if y.len() != n {
        return Err(dim_err(format!("{} traits for {n} individuals", y.len())));
    }
    let mut cols = vec![vec![1.0; n]];
    if let Some(c) = covariates {
        if c.rows() != n {
            return Err(dim_err(format!("covariates have {} rows for {n} individuals", c.rows())));
        }
        cols.extend((0..c.cols()).map(|j| c.col(j)));
    }
    let basis = orthonormal_basis(&cols);
    let df = n as f64 - basis.len() as f64 - 1.0;
    if df < 1.0 {
        return Err(dim_err("not enough individuals for the covariates"));
    }
    let mut ry = y.to_vec();
    residualize(&mut ry, &basis);
    let ryy: f64 = ry.iter().map(|v| v * v).sum();
    let yy: f64 = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let y_constant = ryy <= 1e-24 * yy;

    let chunks: Vec<Vec<usize>> = (0..m).collect::<Vec<_>>().chunks(SNP_CHUNK).map(|c| c.to_vec()).collect();
    let parts: Vec<Vec<(f64, f64, bool)>> = chunks
        .par_iter()
        .map(|snps| {
            snps.iter()
                .map(|&j| {
                    let mut rx = x.snp_column(j);
                    let xx: f64 = rx.iter().map(|v| v * v).sum();
                    residualize(&mut rx, &basis);
                    let rxx: f64 = rx.iter().map(|v| v * v).sum();
                    if xx == 0.0 || rxx <= 1e-9 * xx {
                        return (0.0, 1.0, true);
                    }
                    if y_constant {
                        return (0.0, 1.0, false);
                    }
                    let rxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
                    let beta = rxy / rxx;
                    let rss = (ryy - beta * rxy).max(0.0);
                    let se = (rss / df / rxx).sqrt();
                    if se == 0.0 {
                        return (f64::INFINITY.copysign(beta), 0.0, false);
                    }
                    let t = beta / se;
                    (t, t_two_sided_p(t, df), false)
                })
                .collect()
        })
        .collect();
    let mut statistic = Vec::with_capacity(m);
    let mut p_value = Vec::with_capacity(m);
    let mut degenerate = Vec::with_capacity(m);
    for (t, p, d) in parts.into_iter().flatten() {
        statistic.push(t);
        p_value.push(p);
        degenerate.push(d);
    }
    let lambda_gc = inflation_factor(&p_value);
    Ok(AssociationResult { method, statistic, p_value, degenerate, threshold, lambda_gc })
}

/// Test conditioned on the stage-1 posterior-mean confounders.
pub fn test_corrected(y: &[f64], x: &GenotypeMatrix, z_hat: &Matrix, threshold: f64) -> Result<AssociationResult> {
    test_with_covariates(y, x, Some(z_hat), Method::Icm, threshold)
}

/// Top-`k_pc` genotype principal-component scores as covariates.
pub fn test_pca_baseline(y: &[f64], x: &GenotypeMatrix, k_pc: usize, threshold: f64) -> Result<AssociationResult> {
    if k_pc == 0 {
        return test_with_covariates(y, x, None, Method::Pca, threshold);
    }
    let scores = pca_scores(x, k_pc)?;
    test_with_covariates(y, x, Some(&scores), Method::Pca, threshold)
}

pub fn pca_scores(x: &GenotypeMatrix, k_pc: usize) -> Result<Matrix> {
    if k_pc > x.individuals().min(x.snps()) {
        return Err(Error::Domain(format!("K_pc = {k_pc} exceeds min(N, M)")));
    }
    Ok(top_principal_components(&x.to_matrix(), k_pc)?.scores)
}

pub fn test_uncorrected(y: &[f64], x: &GenotypeMatrix, threshold: f64) -> Result<AssociationResult> {
    test_with_covariates(y, x, None, Method::Uncorrected, threshold)
}

/// `‖first-layer weight group of SNP m‖₂` (or `|θ_m|` for the linear model).
/// Higher scores rank SNPs as more likely causal; no p-value is implied.
pub fn nn_snp_scores(theta: &TraitModelParams) -> Vec<f64> {
    match theta {
        TraitModelParams::Linear { m, coef, .. } => coef[..*m].iter().map(|c| c.abs()).collect(),
        TraitModelParams::Neural { m, net, .. } => (0..*m)
            .map(|j| net.layers[0].weight.row(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    }
}

/// True positives over all discoveries; `None` when nothing is significant.
pub fn precision(result: &AssociationResult, causal: &[usize]) -> Option<f64> {
    precision_of(&result.significant_set(), causal)
}

pub fn precision_of(significant: &[usize], causal: &[usize]) -> Option<f64> {
    if significant.is_empty() {
        return None;
    }
    let tp = significant.iter().filter(|m| causal.contains(m)).count();
    Some(tp as f64 / significant.len() as f64)
}

/// Expected false discoveries of a calibrated test over `null_snps` SNPs.
pub fn expected_false_positives(null_snps: usize, threshold: f64) -> f64 {
    null_snps as f64 * threshold
}

/// Median 1-d.o.f. chi-square quantile of the p-values over its null median.
pub fn inflation_factor(p_values: &[f64]) -> f64 {
    let q: Vec<f64> = p_values.iter().map(|&p| chi2_1_isf(p)).collect();
    median(&q) / CHI2_1_MEDIAN
}

/// Genomic control: divides chi-square statistics by `λ_GC` when it exceeds
/// one (no deflation otherwise).
pub fn genomic_control(result: &AssociationResult) -> Result<(f64, AssociationResult)> {
    if result.snps() < 100 {
        return Err(Error::Domain(format!("genomic control needs >= 100 p-values, got {}", result.snps())));
    }
    let lambda = inflation_factor(&result.p_value);
    let mut out = result.clone();
    out.lambda_gc = lambda;
    if lambda > 1.0 {
        for m in 0..out.snps() {
            if out.degenerate[m] {
                continue;
            }
            let q = chi2_1_isf(result.p_value[m]);
            out.p_value[m] = chi2_1_sf(q / lambda);
            out.statistic[m] = result.statistic[m] / lambda.sqrt();
        }
    }
    Ok((lambda, out))
}

/// Full-scale reference precisions (percent) for ICM, PCA, LMM, GCAT.
pub fn reference_precision(family: Family, a: f64) -> Option<[f64; 4]> {
    let key = (a * 100.0).round() as i64;
    match (family, key) {
        (Family::Psd, 100) => Some([97.0, 80.4, 92.3, 95.3]),
        (Family::Psd, 50) => Some([94.3, 79.5, 90.1, 93.6]),
        (Family::Psd, 10) => Some([92.2, 38.1, 38.6, 90.4]),
        (Family::Psd, 1) => Some([92.7, 24.2, 35.1, 90.7]),
        (Family::Spatial, 100) => Some([90.9, 56.4, 60.0, 75.2]),
        (Family::Spatial, 50) => Some([86.2, 50.5, 46.6, 72.5]),
        (Family::Spatial, 10) => Some([80.9, 2.4, 26.6, 35.6]),
        (Family::Spatial, 1) => Some([75.5, 1.8, 15.3, 30.2]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub family: Family,
    pub a: f64,
    pub snps: usize,
    pub individuals: usize,
    pub n_causal: usize,
    pub replicates: usize,
    pub seed: u64,
    pub threshold: f64,
    pub k_pc: usize,
    pub methods: Vec<Method>,
    pub icm: IcmConfig,
    pub stage1: Stage1Config,
}

impl StudyConfig {
    pub fn desk(family: Family, a: f64, replicates: usize, seed: u64) -> Self {
        StudyConfig {
            family,
            a,
            snps: 5000,
            individuals: 500,
            n_causal: 10,
            replicates,
            seed,
            threshold: DEFAULT_THRESHOLD,
            k_pc: 3,
            methods: Method::ALL.to_vec(),
            icm: IcmConfig::default(),
            stage1: desk_stage1(),
        }
    }
}

/// Stage-1 settings used for desk-scale studies.
pub fn desk_stage1() -> Stage1Config {
    Stage1Config { snp_batch_size: 256, step_size_z: 0.1, step_size_w: 0.1, step_size_phi: 0.005, epochs: 60, ..Stage1Config::default() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    /// Precision per configured method, in `methods` order.
    pub precision: Vec<Option<f64>>,
    pub discoveries: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub family: Family,
    pub a: f64,
    pub method: Method,
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub rows: Vec<StudyRow>,
    pub replicates: Vec<ReplicateOutcome>,
    pub reference: Option<[f64; 4]>,
}

impl StudyTable {
    pub fn row(&self, method: Method) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Seed of replicate `index`; independent of the replicate count.
pub fn replicate_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    RngStream::new(seed).derive(0x5eed_0000 + index as u64).next_u64()
}

fn run_replicate(cfg: &StudyConfig, index: usize) -> Result<(Vec<Option<f64>>, Vec<usize>)> {
    let seed = replicate_seed(cfg.seed, index);
    let sim = simulate(&SimConfig {
        family: cfg.family,
        a: cfg.a,
        snps: cfg.snps,
        individuals: cfg.individuals,
        n_causal: cfg.n_causal,
        seed,
    })?;
    let mut state = None;
    let mut precisions = Vec::new();
    let mut discoveries = Vec::new();
    for &method in &cfg.methods {
        let result = match method {
            Method::Uncorrected => test_uncorrected(&sim.traits, &sim.genotypes, cfg.threshold)?,
            Method::Pca => test_pca_baseline(&sim.traits, &sim.genotypes, cfg.k_pc, cfg.threshold)?,
            Method::Icm => {
                if state.is_none() {
                    let mut s = VariationalState::init(&cfg.icm, cfg.individuals, cfg.snps, seed)?;
                    stage1_fit(&sim.genotypes, &mut s, &Stage1Config { seed, ..cfg.stage1.clone() })?;
                    state = Some(s);
                }
                test_corrected(&sim.traits, &sim.genotypes, state.as_ref().expect("fitted").z_hat(), cfg.threshold)?
            }
        };
        let sig = result.significant_set();
        discoveries.push(sig.len());
        precisions.push(precision_of(&sig, &sim.causal_set));
    }
    Ok((precisions, discoveries))
}

/// simulate → stage 1 → per-method tests → precision, per replicate.
/// Failed replicates are recorded and the study continues.
pub fn run_replicated_study(cfg: &StudyConfig) -> Result<StudyTable> {
    if cfg.methods.is_empty() {
        return Err(Error::Config("study needs at least one method".into()));
    }
    let replicates: Vec<ReplicateOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|index| {
            let seed = replicate_seed(cfg.seed, index);
            match run_replicate(cfg, index) {
                Ok((precision, discoveries)) => ReplicateOutcome { index, seed, precision, discoveries, error: None },
                Err(e) => {
                    log::error!("replicate {index} failed: {e}");
                    ReplicateOutcome {
                        index,
                        seed,
                        precision: vec![None; cfg.methods.len()],
                        discoveries: vec![0; cfg.methods.len()],
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let rows = if replicates.is_empty() {
        Vec::new()
    } else {
        cfg.methods
            .iter()
            .enumerate()
            .map(|(i, &method)| {
                let ok: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| r.error.is_none()).collect();
                let vals: Vec<f64> = ok.iter().filter_map(|r| r.precision[i]).collect();
                let (mean, se) = if vals.is_empty() { (None, None) } else {
                    let (m, s) = mean_and_se(&vals);
                    (Some(m), s)
                };
                StudyRow {
                    family: cfg.family,
                    a: cfg.a,
                    method,
                    mean,
                    se,
                    defined: vals.len(),
                    undefined: ok.len() - vals.len(),
                    failed: replicates.len() - ok.len(),
                }
            })
            .collect()
    };
    Ok(StudyTable { rows, replicates, reference: reference_precision(cfg.family, cfg.a) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ols_ttest;
    use crate::numerics::stats::ks_uniform;

    fn random_genotypes(n: usize, m: usize, seed: u64) -> GenotypeMatrix {
        let mut rng = RngStream::new(seed);
        let p: Vec<f64> = (0..m).map(|_| rng.uniform_range(0.1, 0.9)).collect();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            for pj in &p {
                data.push((rng.uniform() < *pj) as u8 + (rng.uniform() < *pj) as u8);
            }
        }
        GenotypeMatrix::new(n, m, data).unwrap()
    }

    #[test]
    fn residualized_test_matches_full_ols() {
        let x = random_genotypes(80, 6, 1);
        let mut rng = RngStream::new(2);
        let z = Matrix::from_fn(80, 2, |_, _| rng.normal());
        let y: Vec<f64> = (0..80).map(|i| 0.5 * x.get(i, 1) as f64 + z[(i, 0)] + rng.normal()).collect();
        let r = test_corrected(&y, &x, &z, 0.05).unwrap();
        for m in 0..6 {
            let design = Matrix::from_fn(80, 4, |i, j| match j {
                0 => 1.0,
                1 => x.get(i, m) as f64,
                _ => z[(i, j - 2)],
            });
            let fit = ols_ttest(&y, &design).unwrap();
            let c = fit.coefficients[1];
            assert!((c.t_stat - r.statistic[m]).abs() < 1e-9 * (1.0 + c.t_stat.abs()));
            assert!((c.p_value - r.p_value[m]).abs() < 1e-10);
        }
    }

    #[test]
    fn strong_signal_detected() {
        let x = random_genotypes(500, 50, 3);
        let mut rng = RngStream::new(4);
        let y: Vec<f64> = (0..500).map(|i| 2.0 * x.get(i, 0) as f64 + rng.normal()).collect();
        let z = Matrix::from_fn(500, 3, |_, _| rng.normal());
        let r = test_corrected(&y, &x, &z, DEFAULT_THRESHOLD).unwrap();
        assert!(r.p_value[0] < 1e-6);
        let u = test_uncorrected(&y, &x, DEFAULT_THRESHOLD).unwrap();
        let best = (0..50).min_by(|&a, &b| u.p_value[a].total_cmp(&u.p_value[b])).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn null_pvalues_uniform_and_calibrated() {
        let x = random_genotypes(300, 5000, 5);
        let mut rng = RngStream::new(6);
        let y: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let z = Matrix::from_fn(300, 3, |_, _| rng.normal());
        for r in [
            test_corrected(&y, &x, &z, DEFAULT_THRESHOLD).unwrap(),
            test_uncorrected(&y, &x, DEFAULT_THRESHOLD).unwrap(),
            test_pca_baseline(&y, &x, 3, DEFAULT_THRESHOLD).unwrap(),
        ] {
            assert!(ks_uniform(&r.p_value) < 0.05, "{}", r.method);
            let rate = r.significant_set().len() as f64 / 5000.0;
            assert!((DEFAULT_THRESHOLD / 2.0..=2.0 * DEFAULT_THRESHOLD).contains(&rate), "{} {rate}", r.method);
        }
    }

    #[test]
    fn constant_trait_and_snp() {
        let mut x = random_genotypes(40, 5, 7);
        for i in 0..40 {
            x.set(i, 2, 1);
        }
        let r = test_uncorrected(&[3.0; 40], &x, 0.05).unwrap();
        assert!(r.p_value.iter().all(|&p| p == 1.0));
        assert!(r.degenerate[2] && !r.degenerate[0]);
    }

    #[test]
    fn pca_baseline_equals_corrected_on_scores() {
        let x = random_genotypes(60, 40, 8);
        let mut rng = RngStream::new(9);
        let y: Vec<f64> = (0..60).map(|_| rng.normal()).collect();
        let scores = pca_scores(&x, 3).unwrap();
        let a = test_pca_baseline(&y, &x, 3, 0.05).unwrap();
        let b = test_corrected(&y, &x, &scores, 0.05).unwrap();
        assert_eq!(a.p_value, b.p_value);
        let c = test_pca_baseline(&y, &x, 0, 0.05).unwrap();
        assert_eq!(c.p_value, test_uncorrected(&y, &x, 0.05).unwrap().p_value);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn affine_invariance(scale in 0.01f64..100.0, shift in -50.0f64..50.0, seed in 0u64..1000) {
            let x = random_genotypes(50, 8, seed);
            let mut rng = RngStream::new(seed + 1);
            let y: Vec<f64> = (0..50).map(|i| x.get(i, 0) as f64 + rng.normal()).collect();
            let y2: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
            let a = test_uncorrected(&y, &x, 0.05).unwrap();
            let b = test_uncorrected(&y2, &x, 0.05).unwrap();
            for (p, q) in a.p_value.iter().zip(&b.p_value) {
                proptest::prop_assert!((p - q).abs() < 1e-8);
            }
        }

        #[test]
        fn significant_set_monotone(t1 in 0.0f64..0.5, dt in 0.0f64..0.5, seed in 0u64..1000) {
            let x = random_genotypes(40, 30, seed);
            let mut rng = RngStream::new(seed);
            let y: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
            let r = test_uncorrected(&y, &x, t1).unwrap();
            let small = r.significant_at(t1);
            let big = r.significant_at(t1 + dt);
            proptest::prop_assert!(small.iter().all(|m| big.contains(m)));
        }

        #[test]
        fn precision_bounds(tp in 0usize..10, fp in 0usize..20) {
            let causal: Vec<usize> = (0..10).collect();
            let sig: Vec<usize> = (0..tp).chain(100..100 + fp).collect();
            match precision_of(&sig, &causal) {
                None => proptest::prop_assert!(tp + fp == 0),
                Some(p) => {
                    proptest::prop_assert!((0.0..=1.0).contains(&p));
                    if tp < 10 {
                        let more: Vec<usize> = (0..=tp).chain(100..100 + fp).collect();
                        proptest::prop_assert!(precision_of(&more, &causal).unwrap() >= p);
                    }
                }
            }
        }
    }

    #[test]
    fn precision_arithmetic() {
        let causal: Vec<usize> = (0..10).collect();
        assert_eq!(precision_of(&causal, &causal), Some(1.0));
        let sig: Vec<usize> = (0..8).chain([50, 60]).collect();
        assert_eq!(precision_of(&sig, &causal), Some(0.8));
        assert_eq!(precision_of(&[], &causal), None);
    }

    #[test]
    fn expected_false_positive_count() {
        assert!((expected_false_positives(100_000 - 10, 0.0025) - 249.975).abs() < 1e-9);
    }

    fn result_from_p(p: Vec<f64>) -> AssociationResult {
        let statistic = p.iter().map(|&v| chi2_1_isf(v).sqrt()).collect();
        let n = p.len();
        AssociationResult { method: Method::Uncorrected, statistic, p_value: p, degenerate: vec![false; n], threshold: 0.05, lambda_gc: 1.0 }
    }

    #[test]
    fn genomic_control_on_uniform_and_inflated() {
        let p: Vec<f64> = (0..10_000).map(|i| (i as f64 + 0.5) / 10_000.0).collect();
        let (l, _) = genomic_control(&result_from_p(p.clone())).unwrap();
        assert!((l - 1.0).abs() < 0.05);

        let inflated: Vec<f64> = p.iter().map(|&v| chi2_1_sf(2.0 * chi2_1_isf(v))).collect();
        let (l, corrected) = genomic_control(&result_from_p(inflated.clone())).unwrap();
        assert!((l - 2.0).abs() < 0.05, "{l}");
        assert!(ks_uniform(&corrected.p_value) < 0.05);
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            idx
        };
        assert_eq!(order(&inflated), order(&corrected.p_value));
    }

    #[test]
    fn deflated_input_is_identity() {
        let p: Vec<f64> = (0..200).map(|i| 0.5 + 0.5 * (i as f64 + 0.5) / 200.0).collect();
        let r = result_from_p(p.clone());
        let (l, c) = genomic_control(&r).unwrap();
        assert!(l < 1.0);
        assert_eq!(c.p_value, p);
    }

    #[test]
    fn nn_scores_properties() {
        let cfg = IcmConfig { k: 2, trait_hidden: [4, 3], ..IcmConfig::default() };
        let mut theta = TraitModelParams::init(&cfg, 5, &mut RngStream::new(1)).unwrap();
        let TraitModelParams::Neural { net, .. } = &mut theta else { panic!() };
        net.layers[0].weight = Matrix::zeros(net.layers[0].weight.rows(), 4);
        let s = nn_snp_scores(&theta);
        assert!(s.iter().all(|&v| v == s[0]));

        let mut theta = TraitModelParams::init(&cfg, 5, &mut RngStream::new(2)).unwrap();
        let before = nn_snp_scores(&theta);
        let TraitModelParams::Neural { net, .. } = &mut theta else { panic!() };
        let w = net.layers[0].weight.clone();
        net.layers[0].weight = Matrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, (j + 1) % w.cols())]);
        let after = nn_snp_scores(&theta);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_study_and_method_parsing() {
        let cfg = StudyConfig { replicates: 0, ..StudyConfig::desk(Family::Psd, 0.1, 0, 1) };
        let t = run_replicated_study(&cfg).unwrap();
        assert!(t.rows.is_empty() && t.replicates.is_empty());
        assert_eq!(t.reference, Some([92.2, 38.1, 38.6, 90.4]));
        assert_eq!(Method::parse_list("uncorrected,pca,icm").unwrap(), vec![Method::Uncorrected, Method::Pca, Method::Icm]);
        assert!(Method::parse_list("gcat").is_err());
    }

    #[test]
    fn replicate_seeds_do_not_depend_on_count() {
        let a: Vec<u64> = (0..3).map(|i| replicate_seed(9, i)).collect();
        let b: Vec<u64> = (0..6).map(|i| replicate_seed(9, i)).collect();
        assert_eq!(a, b[..3]);
    }
}
