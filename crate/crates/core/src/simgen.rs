//! Synthetic GWAS data with known ground truth.
//!
//! Allele frequencies factor as `F = Γ·S` (`M × K_pop` times `K_pop × N`).
//! Genotypes are `Binomial(2, π)` with `π = clamp(F, ε_f, 1 − ε_f)`; traits
//! are linear in the first `n_causal` SNPs plus a group offset and
//! group-specific noise, where groups come from K-means on the columns of S.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::numerics::kmeans::kmeans;
use crate::numerics::sample::{beta as beta_draw, dirichlet, Dist};
use crate::numerics::{Matrix, RngStream};

pub const FREQ_CLAMP: f64 = 1e-4;
pub const K_POP: usize = 3;
pub const DEFAULT_CAUSAL: usize = 10;
pub const HAPMAP_PROPORTIONS: [f64; 3] = [60.0 / 210.0, 60.0 / 210.0, 90.0 / 210.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    BnSurrogate,
    Psd,
    Spatial,
    PcSurrogate,
}

impl Family {
    pub fn code(self) -> u8 {
        match self {
            Family::BnSurrogate => 0,
            Family::Psd => 1,
            Family::Spatial => 2,
            Family::PcSurrogate => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Family::BnSurrogate,
            1 => Family::Psd,
            2 => Family::Spatial,
            3 => Family::PcSurrogate,
            _ => return Err(Error::Format(format!("unknown family code {c}"))),
        })
    }

    pub fn uses_sparsity(self) -> bool {
        matches!(self, Family::Psd | Family::Spatial)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::BnSurrogate => "bn",
            Family::Psd => "psd",
            Family::Spatial => "spatial",
            Family::PcSurrogate => "pc",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" | "bn_surrogate" | "hapmap" => Ok(Family::BnSurrogate),
            "psd" => Ok(Family::Psd),
            "spatial" => Ok(Family::Spatial),
            "pc" | "pc_surrogate" | "tgp" | "hgdp" => Ok(Family::PcSurrogate),
            _ => Err(Error::Config(format!("unknown simulation family '{s}'"))),
        }
    }
}

/// `N × M` genotypes in `{0, 1, 2}`, row-major by individual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenotypeMatrix {
    n: usize,
    m: usize,
    data: Vec<u8>,
}

impl GenotypeMatrix {
    pub fn new(n: usize, m: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * m {
            return Err(dim_err(format!("{} genotype bytes for {n}x{m}", data.len())));
        }
        if let Some(pos) = data.iter().position(|&g| g > 2) {
            return Err(Error::Domain(format!("genotype {} at byte {pos} outside {{0,1,2}}", data[pos])));
        }
        Ok(GenotypeMatrix { n, m, data })
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        GenotypeMatrix { n, m, data: vec![0; n * m] }
    }

    pub fn individuals(&self) -> usize {
        self.n
    }

    pub fn snps(&self) -> usize {
        self.m
    }

    pub fn get(&self, n: usize, m: usize) -> u8 {
        self.data[n * self.m + m]
    }

    pub fn set(&mut self, n: usize, m: usize, g: u8) {
        debug_assert!(g <= 2);
        self.data[n * self.m + m] = g;
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn individual(&self, n: usize) -> &[u8] {
        &self.data[n * self.m..(n + 1) * self.m]
    }

    /// Column `m` as reals (one entry per individual).
    pub fn snp_column(&self, m: usize) -> Vec<f64> {
        (0..self.n).map(|n| self.data[n * self.m + m] as f64).collect()
    }

    /// `N × |cols|` real matrix of the selected SNPs.
    pub fn columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.n, cols.len(), |i, j| self.data[i * self.m + cols[j]] as f64)
    }

    /// `|rows| × M` real matrix of the selected individuals.
    pub fn rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.m);
        for (i, &n) in rows.iter().enumerate() {
            for (v, &g) in out.row_mut(i).iter_mut().zip(self.individual(n)) {
                *v = g as f64;
            }
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.n, self.m, |i, j| self.data[i * self.m + j] as f64)
    }

    /// Copy with SNP columns reordered so new column `j` is old `order[j]`.
    pub fn permute_snps(&self, order: &[usize]) -> GenotypeMatrix {
        let mut out = GenotypeMatrix::zeros(self.n, self.m);
        for i in 0..self.n {
            for (j, &o) in order.iter().enumerate() {
                out.data[i * self.m + j] = self.data[i * self.m + o];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrices {
    /// `M × K_pop`
    pub gamma: Matrix,
    /// `K_pop × N`
    pub s: Matrix,
    pub family: Family,
    pub sparsity_a: f64,
    /// Discrete subpopulation of each individual (BN only).
    pub populations: Option<Vec<usize>>,
}

impl StructureMatrices {
    pub fn snps(&self) -> usize {
        self.gamma.rows()
    }

    pub fn individuals(&self) -> usize {
        self.s.cols()
    }

    /// Clamped allele frequency `π_mn`.
    pub fn frequency(&self, m: usize, n: usize) -> f64 {
        let f: f64 = (0..self.gamma.cols()).map(|k| self.gamma[(m, k)] * self.s[(k, n)]).sum();
        f.clamp(FREQ_CLAMP, 1.0 - FREQ_CLAMP)
    }

    /// Mean over individuals of the largest structure weight (rows of S
    /// excluding an all-ones intercept row).
    pub fn mean_max_membership(&self) -> f64 {
        let rows = match self.family {
            Family::Spatial | Family::PcSurrogate => self.s.rows() - 1,
            _ => self.s.rows(),
        };
        let n = self.s.cols();
        (0..n)
            .map(|j| (0..rows).map(|k| self.s[(k, j)]).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / n as f64
    }
}

/// Balding–Nichols draw around ancestral frequency `p` with divergence `f`.
pub fn balding_nichols(p: f64, f: f64, rng: &mut RngStream) -> Result<f64> {
    if !(0.0 < p && p < 1.0 && 0.0 < f && f < 1.0) {
        return Err(Error::Domain(format!("balding-nichols needs p, F in (0,1), got ({p}, {f})")));
    }
    let c = (1.0 - f) / f;
    Ok(beta_draw(p * c, (1.0 - p) * c, rng))
}

fn bn_gamma(m: usize, k_pop: usize, rng: &mut RngStream) -> Result<Matrix> {
    let mut gamma = Matrix::zeros(m, k_pop);
    for row in 0..m {
        let p = rng.uniform_range(0.1, 0.9);
        let f = rng.uniform_range(0.01, 0.2);
        for k in 0..k_pop {
            gamma[(row, k)] = balding_nichols(p, f, rng)?;
        }
    }
    Ok(gamma)
}

fn spatial_gamma(m: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(m, 3, |_, k| if k < 2 { 0.9 * rng.uniform_range(0.0, 0.5) } else { 0.05 })
}

fn rescale_unit(v: &mut [f64]) {
    const MARGIN: f64 = 0.01;
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x = MARGIN + (1.0 - 2.0 * MARGIN) * (*x - lo) / span);
}

pub fn make_structure(family: Family, a: f64, m: usize, n: usize, k_pop: usize, rng: &mut RngStream) -> Result<StructureMatrices> {
    if m == 0 || n == 0 {
        return Err(dim_err("structure needs at least one SNP and one individual"));
    }
    if k_pop != K_POP {
        return Err(Error::Domain(format!("{family} structure is defined for K_pop = 3, got {k_pop}")));
    }
    if family.uses_sparsity() && !(a > 0.0 && a.is_finite()) {
        return Err(Error::Domain(format!("sparsity a must be positive, got {a}")));
    }
    let (gamma, s, populations) = match family {
        Family::BnSurrogate => {
            let gamma = bn_gamma(m, k_pop, rng)?;
            let pops: Vec<usize> = (0..n)
                .map(|_| {
                    let u = rng.uniform();
                    if u < HAPMAP_PROPORTIONS[0] {
                        0
                    } else if u < HAPMAP_PROPORTIONS[0] + HAPMAP_PROPORTIONS[1] {
                        1
                    } else {
                        2
                    }
                })
                .collect();
            let s = Matrix::from_fn(k_pop, n, |k, j| if pops[j] == k { 1.0 } else { 0.0 });
            (gamma, s, Some(pops))
        }
        Family::Psd => {
            let gamma = bn_gamma(m, k_pop, rng)?;
            let mut s = Matrix::zeros(k_pop, n);
            let alpha = vec![a; k_pop];
            for j in 0..n {
                for (k, w) in dirichlet(&alpha, rng).into_iter().enumerate() {
                    s[(k, j)] = w;
                }
            }
            (gamma, s, None)
        }
        Family::Spatial => {
            let gamma = spatial_gamma(m, rng);
            let mut s = Matrix::filled(3, n, 1.0);
            for k in 0..2 {
                for j in 0..n {
                    s[(k, j)] = beta_draw(a, a, rng);
                }
            }
            (gamma, s, None)
        }
        Family::PcSurrogate => {
            let gamma = spatial_gamma(m, rng);
            let mut t: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            t.sort_by(f64::total_cmp);
            let phase = rng.uniform_range(0.0, std::f64::consts::PI);
            let mut axis1 = t.clone();
            let mut axis2: Vec<f64> = t.iter().map(|&v| (1.5 * std::f64::consts::PI * v + phase).sin()).collect();
            rescale_unit(&mut axis1);
            rescale_unit(&mut axis2);
            let mut s = Matrix::filled(3, n, 1.0);
            s.row_mut(0).copy_from_slice(&axis1);
            s.row_mut(1).copy_from_slice(&axis2);
            (gamma, s, None)
        }
    };
    Ok(StructureMatrices { gamma, s, family, sparsity_a: a, populations })
}

/// Genotypes as the sum of two Bernoulli(π) trials (`u < π`). SNP `m` draws
/// from the stream `rng.derive(m)`, so output does not depend on thread count.
pub fn simulate_genotypes(structure: &StructureMatrices, rng: &RngStream) -> GenotypeMatrix {
    let (m, n) = (structure.snps(), structure.individuals());
    let columns: Vec<Vec<u8>> = (0..m)
        .into_par_iter()
        .map(|snp| {
            let mut local = rng.derive(snp as u64);
            (0..n)
                .map(|ind| {
                    let pi = structure.frequency(snp, ind);
                    (local.uniform() < pi) as u8 + (local.uniform() < pi) as u8
                })
                .collect()
        })
        .collect();
    let mut g = GenotypeMatrix::zeros(n, m);
    for (snp, col) in columns.iter().enumerate() {
        for (ind, &v) in col.iter().enumerate() {
            g.data[ind * m + snp] = v;
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitOptions {
    pub n_causal: usize,
    /// Variance of the causal effect sizes.
    pub beta_var: f64,
    pub clusters: usize,
    pub offsets: bool,
    pub noise: bool,
    pub zero_effects: bool,
}

impl Default for TraitOptions {
    fn default() -> Self {
        TraitOptions { n_causal: DEFAULT_CAUSAL, beta_var: 0.5, clusters: 3, offsets: true, noise: true, zero_effects: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraitDraw {
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Group of each individual from K-means on the columns of S.
    pub partition: Vec<usize>,
}

pub fn simulate_traits(x: &GenotypeMatrix, s: &Matrix, opts: &TraitOptions, rng: &mut RngStream) -> Result<TraitDraw> {
    let (n, m) = (x.individuals(), x.snps());
    if opts.n_causal > m {
        return Err(Error::Domain(format!("{} causal SNPs among {m}", opts.n_causal)));
    }
    if s.cols() != n {
        return Err(dim_err(format!("S has {} columns for {n} individuals", s.cols())));
    }
    let effect = Dist::Normal { mean: 0.0, sd: opts.beta_var.sqrt() };
    let mut beta = vec![0.0; m];
    for b in beta.iter_mut().take(opts.n_causal) {
        let v = effect.sample_scalar(rng)?;
        *b = if opts.zero_effects { 0.0 } else { v };
    }
    let k = opts.clusters.min(n).max(1);
    let points = s.transpose();
    let partition = kmeans(&points, k, &mut rng.derive(0x6b6d))?.labels;
    let tau: Vec<f64> = (0..k)
        .map(|_| Dist::InverseGamma { shape: 3.0, scale: 1.0 }.sample_scalar(rng).map(f64::sqrt))
        .collect::<Result<_>>()?;
    let lambda: Vec<f64> = partition.iter().map(|&c| if opts.offsets { (c + 1) as f64 } else { 0.0 }).collect();
    let sigma: Vec<f64> = partition.iter().map(|&c| tau[c]).collect();
    let y = (0..n)
        .map(|i| {
            let row = x.individual(i);
            let genetic: f64 = (0..opts.n_causal).map(|j| beta[j] * row[j] as f64).sum();
            let eps = if opts.noise { sigma[i] * rng.normal() } else { 0.0 };
            genetic + lambda[i] + eps
        })
        .collect();
    Ok(TraitDraw { y, beta, lambda, sigma, partition })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub family: Family,
    pub a: f64,
    pub snps: usize,
    pub individuals: usize,
    pub n_causal: usize,
    pub seed: u64,
}

impl SimConfig {
    /// Desk-scale defaults: 5,000 SNPs, 500 individuals, 10 causal.
    pub fn desk(family: Family, a: f64, seed: u64) -> Self {
        SimConfig { family, a, snps: 5_000, individuals: 500, n_causal: DEFAULT_CAUSAL, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub genotypes: GenotypeMatrix,
    pub traits: Vec<f64>,
    pub beta: Vec<f64>,
    pub causal_set: Vec<usize>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
    pub partition: Vec<usize>,
    pub structure: StructureMatrices,
    pub seed: u64,
}

/// `make_structure → simulate_genotypes → simulate_traits` on streams derived
/// from `config.seed`.
pub fn simulate(config: &SimConfig) -> Result<SimulatedDataset> {
    simulate_with(config, &TraitOptions { n_causal: config.n_causal, ..TraitOptions::default() })
}

pub fn simulate_with(config: &SimConfig, opts: &TraitOptions) -> Result<SimulatedDataset> {
    let root = RngStream::new(config.seed);
    let structure = make_structure(config.family, config.a, config.snps, config.individuals, K_POP, &mut root.derive(1))?;
    let genotypes = simulate_genotypes(&structure, &root.derive(2));
    let t = simulate_traits(&genotypes, &structure.s, opts, &mut root.derive(3))?;
    let causal_set = t.beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(i, _)| i).collect();
    Ok(SimulatedDataset {
        genotypes,
        traits: t.y,
        beta: t.beta,
        causal_set,
        lambda: t.lambda,
        sigma: t.sigma,
        partition: t.partition,
        structure,
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ols_ttest;
    use crate::numerics::stats::chi_square_gof_passes;

    #[test]
    fn balding_nichols_mean() {
        let mut rng = RngStream::new(1);
        let n = 100_000;
        let mean = (0..n).map(|_| balding_nichols(0.3, 0.1, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 0.3).abs() < 0.01);
    }

    #[test]
    fn psd_uniform_memberships() {
        let st = make_structure(Family::Psd, 1.0, 10, 20_000, 3, &mut RngStream::new(2)).unwrap();
        for k in 0..3 {
            let mean = st.s.row(k).iter().sum::<f64>() / 20_000.0;
            assert!((mean - 1.0 / 3.0).abs() < 0.01);
        }
        for j in 0..20_000 {
            assert!(((0..3).map(|k| st.s[(k, j)]).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_intercepts() {
        let st = make_structure(Family::Spatial, 0.1, 50, 40, 3, &mut RngStream::new(3)).unwrap();
        assert!((0..50).all(|m| st.gamma[(m, 2)] == 0.05));
        assert!(st.s.row(2).iter().all(|&v| v == 1.0));
        assert!((0..50).all(|m| (0..2).all(|k| (0.0..=0.45).contains(&st.gamma[(m, k)]))));
    }

    #[test]
    fn invalid_sparsity_rejected() {
        for a in [0.0, -1.0] {
            assert!(matches!(
                make_structure(Family::Psd, a, 5, 5, 3, &mut RngStream::new(0)),
                Err(Error::Domain(_))
            ));
        }
        assert!(make_structure(Family::BnSurrogate, 1.0, 5, 5, 4, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn frequencies_clamped_for_every_family() {
        for fam in [Family::BnSurrogate, Family::Psd, Family::Spatial, Family::PcSurrogate] {
            for a in [0.01, 1.0] {
                let st = make_structure(fam, a, 200, 60, 3, &mut RngStream::new(4)).unwrap();
                for m in 0..200 {
                    for n in 0..60 {
                        let f = st.frequency(m, n);
                        assert!((FREQ_CLAMP..=1.0 - FREQ_CLAMP).contains(&f));
                    }
                }
            }
        }
    }

    fn constant_structure(pi: f64, m: usize, n: usize) -> StructureMatrices {
        StructureMatrices {
            gamma: Matrix::filled(m, 1, pi),
            s: Matrix::filled(1, n, 1.0),
            family: Family::Psd,
            sparsity_a: 1.0,
            populations: None,
        }
    }

    #[test]
    fn boundary_frequency_gives_near_zero_genotypes() {
        let g = simulate_genotypes(&constant_structure(0.0, 400, 250), &RngStream::new(5));
        let mean = g.bytes().iter().map(|&v| v as f64).sum::<f64>() / g.bytes().len() as f64;
        assert!(mean < 3.0 * FREQ_CLAMP);
    }

    #[test]
    fn half_frequency_gives_unit_mean() {
        let g = simulate_genotypes(&constant_structure(0.5, 400, 250), &RngStream::new(6));
        let mean = g.bytes().iter().map(|&v| v as f64).sum::<f64>() / g.bytes().len() as f64;
        assert!((mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn binomial_pmf_chi_square() {
        // Exact Binomial(2, 0.3) pmf.
        let pmf = [0.49, 0.42, 0.09];
        let g = simulate_genotypes(&constant_structure(0.3, 1000, 100), &RngStream::new(7));
        let mut counts = [0u64; 3];
        g.bytes().iter().for_each(|&v| counts[v as usize] += 1);
        assert!(chi_square_gof_passes(&counts, &pmf, 0.01), "{counts:?}");
    }

    #[test]
    fn psd_sparsity_monotone() {
        let lo = make_structure(Family::Psd, 0.01, 1, 1000, 3, &mut RngStream::new(8)).unwrap();
        let hi = make_structure(Family::Psd, 1.0, 1, 1000, 3, &mut RngStream::new(8)).unwrap();
        assert!(lo.mean_max_membership() > hi.mean_max_membership());
    }

    #[test]
    fn pure_noise_trait_variance() {
        let cfg = SimConfig { family: Family::BnSurrogate, a: 1.0, snps: 20, individuals: 20_000, n_causal: 10, seed: 9 };
        let root = RngStream::new(cfg.seed);
        let st = make_structure(cfg.family, 1.0, 20, 20_000, 3, &mut root.derive(1)).unwrap();
        let g = simulate_genotypes(&st, &root.derive(2));
        let single = Matrix::filled(1, 20_000, 1.0);
        let opts = TraitOptions { zero_effects: true, clusters: 1, ..TraitOptions::default() };
        let t = simulate_traits(&g, &single, &opts, &mut root.derive(3)).unwrap();
        let mean = t.y.iter().sum::<f64>() / 20_000.0;
        let var = t.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20_000.0;
        let tau2 = t.sigma[0].powi(2);
        assert!((var / tau2 - 1.0).abs() < 0.1, "{var} vs {tau2}");
        assert!(t.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn noiseless_trait_is_linear_map() {
        let cfg = SimConfig { family: Family::Psd, a: 0.5, snps: 30, individuals: 50, n_causal: 10, seed: 10 };
        let opts = TraitOptions { offsets: false, noise: false, ..TraitOptions::default() };
        let d = simulate_with(&cfg, &opts).unwrap();
        for i in 0..50 {
            let expect: f64 = (0..10).map(|j| d.beta[j] * d.genotypes.get(i, j) as f64).sum();
            assert_eq!(d.traits[i], expect);
        }
    }

    #[test]
    fn ols_recovers_effects_on_generating_model() {
        let cfg = SimConfig { family: Family::Psd, a: 0.5, snps: 40, individuals: 5000, n_causal: 10, seed: 11 };
        let d = simulate(&cfg).unwrap();
        let design = Matrix::from_fn(5000, 12, |i, j| match j {
            0 => 1.0,
            1 => d.lambda[i],
            _ => d.genotypes.get(i, j - 2) as f64,
        });
        let fit = ols_ttest(&d.traits, &design).unwrap();
        let within = (0..10)
            .filter(|&j| {
                let c = fit.coefficients[j + 2];
                (c.estimate - d.beta[j]).abs() <= 3.0 * c.std_error
            })
            .count();
        assert!(within >= 9, "{within}/10");
    }

    #[test]
    fn causal_set_is_prefix() {
        let d = simulate(&SimConfig { snps: 100, individuals: 40, ..SimConfig::desk(Family::Spatial, 0.1, 12) }).unwrap();
        assert_eq!(d.causal_set, (0..10).collect::<Vec<_>>());
        assert_eq!(d.beta.iter().filter(|b| **b != 0.0).count(), 10);
        assert!(d.genotypes.bytes().iter().all(|&g| g <= 2));
    }

    #[test]
    fn seeded_pipeline_is_reproducible() {
        let cfg = SimConfig { snps: 300, individuals: 80, ..SimConfig::desk(Family::PcSurrogate, 1.0, 13) };
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
    }
}
