//! `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Unknown and repeated keys
//! are errors. [`RunConfig::to_text`] prints every key with its current value,
//! so `RunConfig::default().to_text()` is the reference list of defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assoc::{desk_stage1, Method, StudyConfig, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::icm::{IcmConfig, SnpModel, TraitKind, TraitModel};
use crate::lfvi::{GeneratorObjective, Stage1Config, Stage2Config};
use crate::simgen::{Family, SimConfig, DEFAULT_CAUSAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Mode {
    /// Tractable path for location-shift and categorical traits, likelihood-free
    /// for implicit ones; skipped when the dataset has no traits.
    Auto,
    Off,
    Tractable,
    Lfvi,
}

impl std::fmt::Display for Stage2Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage2Mode::Auto => "auto",
            Stage2Mode::Off => "off",
            Stage2Mode::Tractable => "tractable",
            Stage2Mode::Lfvi => "lfvi",
        })
    }
}

impl FromStr for Stage2Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Stage2Mode::Auto),
            "off" => Ok(Stage2Mode::Off),
            "tractable" => Ok(Stage2Mode::Tractable),
            "lfvi" => Ok(Stage2Mode::Lfvi),
            _ => Err(Error::Config(format!("unknown stage2 mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub family: Family,
    pub a: f64,
    pub snps: usize,
    pub individuals: usize,
    pub n_causal: usize,
    pub seed: Option<u64>,

    pub k: usize,
    pub snp_model: SnpModel,
    pub trait_model: TraitModel,
    pub trait_kind: TraitKind,
    pub snp_hidden: [usize; 2],
    pub trait_hidden: [usize; 2],
    pub batch_norm: bool,
    pub group_lasso_scale: f64,

    pub snp_batch_size: usize,
    pub individual_batch_size: Option<usize>,
    pub stage1_epochs: usize,
    pub step_size_z: f64,
    pub step_size_w: f64,
    pub step_size_phi: f64,
    pub mc_samples: usize,

    pub stage2: Stage2Mode,
    pub stage2_epochs: usize,
    pub stage2_batch_size: usize,
    pub stage2_step_size: f64,
    pub ratio_step_size: f64,
    pub ratio_hidden: [usize; 2],
    pub ratio_steps: usize,
    pub generator: GeneratorObjective,

    pub threshold: f64,
    pub k_pc: usize,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let icm = IcmConfig::default();
        let s1 = desk_stage1();
        let s2 = Stage2Config::default();
        RunConfig {
            family: Family::Psd,
            a: 0.1,
            snps: 5000,
            individuals: 500,
            n_causal: DEFAULT_CAUSAL,
            seed: None,
            k: icm.k,
            snp_model: icm.snp_model,
            trait_model: icm.trait_model,
            trait_kind: icm.trait_kind,
            snp_hidden: icm.snp_hidden,
            trait_hidden: icm.trait_hidden,
            batch_norm: icm.batch_norm,
            group_lasso_scale: icm.group_lasso_scale,
            snp_batch_size: s1.snp_batch_size,
            individual_batch_size: s1.individual_batch_size,
            stage1_epochs: s1.epochs,
            step_size_z: s1.step_size_z,
            step_size_w: s1.step_size_w,
            step_size_phi: s1.step_size_phi,
            mc_samples: s1.mc_samples,
            stage2: Stage2Mode::Auto,
            stage2_epochs: s2.epochs,
            stage2_batch_size: s2.batch_size,
            stage2_step_size: s2.step_size,
            ratio_step_size: s2.ratio_step_size,
            ratio_hidden: s2.ratio_hidden,
            ratio_steps: s2.ratio_steps,
            generator: s2.generator,
            threshold: DEFAULT_THRESHOLD,
            k_pc: 3,
            methods: Method::ALL.to_vec(),
            replicates: 10,
            out: PathBuf::from("."),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_pair(key: &str, v: &str) -> Result<[usize; 2]> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([parse(key, a)?, parse(key, b)?]),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated sizes, got '{v}'"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn fmt_optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    pub const KEYS: [&'static str; 34] = [
        "family", "a", "snps", "individuals", "n_causal", "seed",
        "k", "snp_model", "trait_model", "trait_kind", "snp_hidden", "trait_hidden", "batch_norm", "group_lasso_scale",
        "snp_batch_size", "individual_batch_size", "stage1_epochs", "step_size_z", "step_size_w", "step_size_phi", "mc_samples",
        "stage2", "stage2_epochs", "stage2_batch_size", "stage2_step_size", "ratio_step_size", "ratio_hidden", "ratio_steps", "generator",
        "threshold", "k_pc", "methods", "replicates", "out",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "family" => self.family = v.parse()?,
            "a" => self.a = parse(key, v)?,
            "snps" => self.snps = parse(key, v)?,
            "individuals" => self.individuals = parse(key, v)?,
            "n_causal" => self.n_causal = parse(key, v)?,
            "seed" => self.seed = parse_optional(key, v)?,
            "k" => self.k = parse(key, v)?,
            "snp_model" => self.snp_model = v.parse()?,
            "trait_model" => self.trait_model = v.parse()?,
            "trait_kind" => self.trait_kind = v.parse()?,
            "snp_hidden" => self.snp_hidden = parse_pair(key, v)?,
            "trait_hidden" => self.trait_hidden = parse_pair(key, v)?,
            "batch_norm" => self.batch_norm = parse_bool(key, v)?,
            "group_lasso_scale" => self.group_lasso_scale = parse(key, v)?,
            "snp_batch_size" => self.snp_batch_size = parse(key, v)?,
            "individual_batch_size" => self.individual_batch_size = parse_optional(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "step_size_z" => self.step_size_z = parse(key, v)?,
            "step_size_w" => self.step_size_w = parse(key, v)?,
            "step_size_phi" => self.step_size_phi = parse(key, v)?,
            "mc_samples" => self.mc_samples = parse(key, v)?,
            "stage2" => self.stage2 = v.parse()?,
            "stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "stage2_batch_size" => self.stage2_batch_size = parse(key, v)?,
            "stage2_step_size" => self.stage2_step_size = parse(key, v)?,
            "ratio_step_size" => self.ratio_step_size = parse(key, v)?,
            "ratio_hidden" => self.ratio_hidden = parse_pair(key, v)?,
            "ratio_steps" => self.ratio_steps = parse(key, v)?,
            "generator" => self.generator = v.parse()?,
            "threshold" => self.threshold = parse(key, v)?,
            "k_pc" => self.k_pc = parse(key, v)?,
            "methods" => self.methods = Method::parse_list(v)?,
            "replicates" => self.replicates = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key '{key}' given twice", i + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let methods: Vec<String> = self.methods.iter().map(Method::to_string).collect();
        let pair = |p: [usize; 2]| format!("{},{}", p[0], p[1]);
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("family", self.family.to_string());
        put("a", self.a.to_string());
        put("snps", self.snps.to_string());
        put("individuals", self.individuals.to_string());
        put("n_causal", self.n_causal.to_string());
        put("seed", fmt_optional(&self.seed));
        put("k", self.k.to_string());
        put("snp_model", self.snp_model.to_string());
        put("trait_model", self.trait_model.to_string());
        put("trait_kind", self.trait_kind.to_string());
        put("snp_hidden", pair(self.snp_hidden));
        put("trait_hidden", pair(self.trait_hidden));
        put("batch_norm", self.batch_norm.to_string());
        put("group_lasso_scale", self.group_lasso_scale.to_string());
        put("snp_batch_size", self.snp_batch_size.to_string());
        put("individual_batch_size", fmt_optional(&self.individual_batch_size));
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("step_size_z", self.step_size_z.to_string());
        put("step_size_w", self.step_size_w.to_string());
        put("step_size_phi", self.step_size_phi.to_string());
        put("mc_samples", self.mc_samples.to_string());
        put("stage2", self.stage2.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("stage2_batch_size", self.stage2_batch_size.to_string());
        put("stage2_step_size", self.stage2_step_size.to_string());
        put("ratio_step_size", self.ratio_step_size.to_string());
        put("ratio_hidden", pair(self.ratio_hidden));
        put("ratio_steps", self.ratio_steps.to_string());
        put("generator", self.generator.to_string());
        put("threshold", self.threshold.to_string());
        put("k_pc", self.k_pc.to_string());
        put("methods", methods.join(","));
        put("replicates", self.replicates.to_string());
        put("out", self.out.display().to_string());
        s
    }

    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config(format!("{command} needs a seed (--seed or seed = ...)")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1], got {}", self.threshold)));
        }
        self.icm().validate()?;
        self.stage1(0).validate()?;
        self.stage2_config(0).validate()
    }

    pub fn sim(&self, seed: u64) -> SimConfig {
        SimConfig { family: self.family, a: self.a, snps: self.snps, individuals: self.individuals, n_causal: self.n_causal, seed }
    }

    pub fn icm(&self) -> IcmConfig {
        IcmConfig {
            k: self.k,
            snp_hidden: self.snp_hidden,
            trait_hidden: self.trait_hidden,
            trait_kind: self.trait_kind,
            snp_model: self.snp_model,
            trait_model: self.trait_model,
            group_lasso_scale: self.group_lasso_scale,
            batch_norm: self.batch_norm,
        }
    }

    pub fn stage1(&self, seed: u64) -> Stage1Config {
        Stage1Config {
            snp_batch_size: self.snp_batch_size,
            individual_batch_size: self.individual_batch_size,
            epochs: self.stage1_epochs,
            step_size_z: self.step_size_z,
            step_size_w: self.step_size_w,
            step_size_phi: self.step_size_phi,
            mc_samples: self.mc_samples,
            seed,
        }
    }

    pub fn stage2_config(&self, seed: u64) -> Stage2Config {
        Stage2Config {
            epochs: self.stage2_epochs,
            batch_size: self.stage2_batch_size,
            step_size: self.stage2_step_size,
            ratio_step_size: self.ratio_step_size,
            ratio_hidden: self.ratio_hidden,
            ratio_steps: self.ratio_steps,
            generator: self.generator,
            seed,
        }
    }

    pub fn study(&self, seed: u64) -> StudyConfig {
        StudyConfig {
            family: self.family,
            a: self.a,
            snps: self.snps,
            individuals: self.individuals,
            n_causal: self.n_causal,
            replicates: self.replicates,
            seed,
            threshold: self.threshold,
            k_pc: self.k_pc,
            methods: self.methods.clone(),
            icm: self.icm(),
            stage1: self.stage1(seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn every_key_is_printed() {
        let text = RunConfig::default().to_text();
        for k in RunConfig::KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k} ="))), "{k}");
        }
    }

    #[test]
    fn values_and_comments_parse() {
        let c = RunConfig::parse_text("# desk run\nfamily = spatial\na=0.5 # inline\n\nseed = 9\ntrait_hidden = 8, 16\nmethods = pca,icm\n")
            .unwrap();
        assert_eq!(c.family, Family::Spatial);
        assert_eq!(c.a, 0.5);
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.trait_hidden, [8, 16]);
        assert_eq!(c.methods, vec![Method::Pca, Method::Icm]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::parse_text("snpz = 10\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("line 1") && m.contains("snpz")), "{e}");
    }

    #[test]
    fn repeated_key_and_bad_value_are_rejected() {
        assert!(RunConfig::parse_text("k = 3\nk = 4\n").is_err());
        assert!(RunConfig::parse_text("k = three\n").is_err());
        assert!(RunConfig::parse_text("batch_norm = maybe\n").is_err());
        assert!(RunConfig::parse_text("just words\n").is_err());
    }

    #[test]
    fn seed_is_mandatory_where_required() {
        let c = RunConfig::default();
        assert!(matches!(c.require_seed("fit"), Err(Error::Config(_))));
        assert_eq!(RunConfig { seed: Some(2), ..c }.require_seed("fit").unwrap(), 2);
    }

    #[test]
    fn invalid_threshold_fails_validation() {
        assert!(RunConfig { threshold: 0.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
