use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::assoc::{
    genomic_control, precision, run_replicated_study, test_corrected, test_pca_baseline, test_uncorrected, AssociationResult,
    Method,
};
use crate::error::{dim_err, Error, Result};
use crate::icm::{TraitKind, TraitModel};
use crate::lfvi::{epoch_stream, stage1_fit, stage2_fit_lfvi, stage2_fit_tractable, ElboBlocks, Stage1Report, Stage2Report, VariationalState};
use crate::simgen::simulate;
use crate::verify::{gradient_suite, GradCheckRow};

use super::config::{RunConfig, Stage2Mode};
use super::format::{write_atomic, Checkpoint, Dataset, Truth};

pub const DATASET_FILE: &str = "dataset.icmg";
pub const SUMMARY_FILE: &str = "dataset.summary.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.icmc";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const STAGE2_METRICS_FILE: &str = "stage2_metrics.tsv";
pub const STUDY_FILE: &str = "study.tsv";
pub const REPLICATES_FILE: &str = "replicates.tsv";

const AF_BINS: usize = 10;

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Simulates a dataset with truth block and writes it with a text summary.
/// Returns the dataset path.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    let seed = cfg.require_seed("simulate")?;
    cfg.validate()?;
    let sim = simulate(&cfg.sim(seed))?;
    let dir = out_dir(cfg)?;
    let summary = simulation_summary(cfg, seed, &sim.genotypes, &sim.traits, sim.structure.mean_max_membership());
    let data = Dataset::from(sim);
    let path = dir.join(DATASET_FILE);
    data.save(&path)?;
    write_atomic(&dir.join(SUMMARY_FILE), summary.as_bytes())?;
    Ok(path)
}

fn simulation_summary(cfg: &RunConfig, seed: u64, x: &crate::simgen::GenotypeMatrix, y: &[f64], membership: f64) -> String {
    let mut bins = [0usize; AF_BINS];
    for m in 0..x.snps() {
        let col = x.snp_column(m);
        let af = col.iter().sum::<f64>() / (2.0 * col.len() as f64);
        bins[((af * AF_BINS as f64) as usize).min(AF_BINS - 1)] += 1;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut s = String::new();
    let _ = writeln!(s, "family\t{}", cfg.family);
    let _ = writeln!(s, "a\t{}", cfg.a);
    let _ = writeln!(s, "snps\t{}", x.snps());
    let _ = writeln!(s, "individuals\t{}", x.individuals());
    let _ = writeln!(s, "n_causal\t{}", cfg.n_causal);
    let _ = writeln!(s, "seed\t{seed}");
    let _ = writeln!(s, "mean_max_membership\t{membership}");
    let _ = writeln!(s, "trait_mean\t{mean}");
    let _ = writeln!(s, "trait_variance\t{var}");
    for (i, c) in bins.iter().enumerate() {
        let lo = i as f64 / AF_BINS as f64;
        let _ = writeln!(s, "allele_frequency[{lo:.1},{:.1})\t{c}", lo + 0.1);
    }
    s
}

/// Reads a numeric field from a simulation summary.
pub fn summary_value(text: &str, key: &str) -> Option<f64> {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix('\t')?.parse().ok())
}

pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub stage2: Option<PathBuf>,
}

fn stage2_plan(cfg: &RunConfig, has_traits: bool) -> Result<Option<Stage2Mode>> {
    let mode = match cfg.stage2 {
        Stage2Mode::Off => return Ok(None),
        Stage2Mode::Auto if !has_traits => return Ok(None),
        Stage2Mode::Auto => match (cfg.trait_kind, cfg.trait_model) {
            (TraitKind::RealImplicit, TraitModel::Neural) => Stage2Mode::Lfvi,
            (TraitKind::RealImplicit, TraitModel::Linear) => {
                return Err(Error::Config("implicit traits need trait_model = neural for stage 2 (or stage2 = off)".into()))
            }
            _ => Stage2Mode::Tractable,
        },
        m => m,
    };
    if !has_traits {
        return Err(Error::Config(format!("stage2 = {mode} requested but the dataset has no trait block")));
    }
    Ok(Some(mode))
}

fn checkpoint_for(state: &VariationalState, seed: u64) -> Checkpoint {
    let rng = epoch_stream(seed, 1, state.stage1_epochs).position();
    Checkpoint { seed, rng, state: state.clone() }
}

fn metrics_text(report: &Stage1Report) -> String {
    let mut s = String::from("epoch\tblock\tvalue\tse\n");
    for e in &report.epochs {
        let vals = e.blocks.values();
        for (name, v) in ElboBlocks::NAMES.iter().zip(vals) {
            let (v, se) = if *name == "elbo" { (e.elbo_mean, opt_num(e.elbo_se)) } else { (v, String::new()) };
            let _ = writeln!(s, "{}\t{name}\t{v}\t{se}", e.epoch);
        }
    }
    s
}

fn stage2_text(start: usize, report: &Stage2Report) -> String {
    let mut s = String::from("epoch\tobjective\tratio_loss\n");
    for (i, o) in report.objective.iter().enumerate() {
        let _ = writeln!(s, "{}\t{o}\t{}", start + i, opt_num(report.ratio_loss.get(i).copied()));
    }
    s
}

/// Stage 1 (always) and stage 2 (when traits are present or requested).
/// With `resume`, training continues from the checkpoint's completed epochs.
pub fn cmd_fit(cfg: &RunConfig, dataset: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    let seed = cfg.require_seed("fit")?;
    cfg.validate()?;
    let data = Dataset::load(dataset)?;
    let x = &data.genotypes;
    let plan = stage2_plan(cfg, data.traits.is_some())?;
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.state.config.k != cfg.k {
                return Err(Error::Config(format!("checkpoint has K = {}, configuration has k = {}", ck.state.config.k, cfg.k)));
            }
            if ck.state.config != cfg.icm() {
                return Err(Error::Config("checkpoint model settings differ from the configuration".into()));
            }
            if ck.seed != seed {
                return Err(Error::Config(format!("checkpoint was fitted with seed {}, not {seed}", ck.seed)));
            }
            ck.state
        }
        None => VariationalState::init(&cfg.icm(), x.individuals(), x.snps(), seed)?,
    };
    if state.individuals() != x.individuals() || state.snps() != x.snps() {
        return Err(dim_err(format!(
            "checkpoint is {}x{}, dataset is {}x{}",
            state.individuals(),
            state.snps(),
            x.individuals(),
            x.snps()
        )));
    }
    let dir = out_dir(cfg)?;
    let report = stage1_fit(x, &mut state, &cfg.stage1(seed))?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    checkpoint_for(&state, seed).save(&checkpoint)?;
    let metrics = dir.join(METRICS_FILE);
    write_atomic(&metrics, metrics_text(&report).as_bytes())?;

    let mut stage2 = None;
    if let Some(mode) = plan {
        let y = data.traits.as_ref().expect("planned only with traits");
        let start = state.stage2_epochs;
        let s2 = cfg.stage2_config(seed);
        let r = match mode {
            Stage2Mode::Lfvi => stage2_fit_lfvi(x, y, &mut state, &s2)?,
            _ => stage2_fit_tractable(x, y, &mut state, &s2)?,
        };
        checkpoint_for(&state, seed).save(&checkpoint)?;
        let p = dir.join(STAGE2_METRICS_FILE);
        write_atomic(&p, stage2_text(start, &r).as_bytes())?;
        stage2 = Some(p);
    }
    Ok(FitOutcome { checkpoint, metrics, stage2 })
}

pub fn assoc_file(method: Method) -> String {
    format!("assoc_{method}.tsv")
}

fn assoc_text(r: &AssociationResult, lambda_gc: f64, truth: Option<&Truth>) -> String {
    let mut s = String::from("snp\tstatistic\tp_value\tsignificant\tdegenerate\n");
    for m in 0..r.snps() {
        let sig = (r.p_value[m] <= r.threshold) as u8;
        let _ = writeln!(s, "{m}\t{}\t{}\t{sig}\t{}", r.statistic[m], r.p_value[m], r.degenerate[m] as u8);
    }
    let _ = writeln!(s, "# method\t{}", r.method);
    let _ = writeln!(s, "# threshold\t{}", r.threshold);
    let _ = writeln!(s, "# discoveries\t{}", r.significant_set().len());
    let _ = writeln!(s, "# lambda_gc\t{lambda_gc}");
    if let Some(t) = truth {
        let p = precision(r, &t.causal).map_or_else(|| "NA".to_string(), |v| v.to_string());
        let _ = writeln!(s, "# precision\t{p}");
    }
    s
}

/// One results file per configured method. `icm` needs a checkpoint fitted
/// on the same dataset.
pub fn cmd_assoc(cfg: &RunConfig, dataset: &Path, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = Dataset::load(dataset)?;
    let x = &data.genotypes;
    let y = data.traits.as_ref().ok_or_else(|| Error::Config("association testing needs a dataset with traits".into()))?;
    let z_hat = if cfg.methods.contains(&Method::Icm) {
        let p = checkpoint.ok_or_else(|| Error::Config("method icm needs a checkpoint".into()))?;
        let ck = Checkpoint::load(p)?;
        if ck.state.individuals() != x.individuals() || ck.state.snps() != x.snps() {
            return Err(dim_err(format!(
                "checkpoint is {}x{}, dataset is {}x{}",
                ck.state.individuals(),
                ck.state.snps(),
                x.individuals(),
                x.snps()
            )));
        }
        Some(ck.state.mu_z)
    } else {
        None
    };
    let dir = out_dir(cfg)?;
    let mut written = Vec::new();
    for &method in &cfg.methods {
        let r = match method {
            Method::Uncorrected => test_uncorrected(y, x, cfg.threshold)?,
            Method::Pca => test_pca_baseline(y, x, cfg.k_pc, cfg.threshold)?,
            Method::Icm => test_corrected(y, x, z_hat.as_ref().expect("loaded above"), cfg.threshold)?,
        };
        let lambda = if r.snps() >= 100 { genomic_control(&r)?.0 } else { f64::NAN };
        let path = dir.join(assoc_file(method));
        write_atomic(&path, assoc_text(&r, lambda, data.truth.as_ref()).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Parses an association results file into `(significant flags, footer)`.
pub fn read_assoc(text: &str) -> Result<(Vec<bool>, Vec<(String, String)>)> {
    let mut flags = Vec::new();
    let mut footer = Vec::new();
    for line in text.lines().skip(1) {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest.split_once('\t').ok_or_else(|| Error::Format(format!("bad footer line '{line}'")))?;
            footer.push((k.to_string(), v.to_string()));
        } else {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("bad results row '{line}'")));
            }
            flags.push(f[3] == "1");
        }
    }
    Ok((flags, footer))
}

pub struct StudyOutcome {
    pub table: PathBuf,
    pub replicates: PathBuf,
    pub failures: usize,
}

pub fn cmd_study(cfg: &RunConfig) -> Result<StudyOutcome> {
    cfg.validate()?;
    if cfg.replicates == 0 {
        return Err(Error::Config("study needs replicates >= 1".into()));
    }
    let seed = cfg.seed.unwrap_or(0);
    let table = run_replicated_study(&cfg.study(seed))?;
    let dir = out_dir(cfg)?;
    let mut s = String::from("family\ta\tmethod\tmean\tse\tdefined\tundefined\tfailed\treference\n");
    for row in &table.rows {
        // reference order: ICM, PCA, LMM, GCAT
        let reference = table.reference.and_then(|r| match row.method {
            Method::Icm => Some(r[0]),
            Method::Pca => Some(r[1]),
            Method::Uncorrected => None,
        });
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.family,
            row.a,
            row.method,
            opt_num(row.mean),
            opt_num(row.se),
            row.defined,
            row.undefined,
            row.failed,
            opt_num(reference)
        );
    }
    let mut r = String::from("replicate\tseed\tmethod\tprecision\tdiscoveries\terror\n");
    for rep in &table.replicates {
        for (i, m) in cfg.methods.iter().enumerate() {
            let p = rep.precision[i].map_or_else(|| "NA".to_string(), |v| v.to_string());
            let err = rep.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
            let _ = writeln!(r, "{}\t{}\t{m}\t{p}\t{}\t{err}", rep.index, rep.seed, rep.discoveries[i]);
        }
    }
    let tpath = dir.join(STUDY_FILE);
    let rpath = dir.join(REPLICATES_FILE);
    write_atomic(&tpath, s.as_bytes())?;
    write_atomic(&rpath, r.as_bytes())?;
    Ok(StudyOutcome { table: tpath, replicates: rpath, failures: table.failures() })
}

pub fn cmd_gradcheck(instances: usize) -> Vec<GradCheckRow> {
    gradient_suite(instances)
}

/// Per-epoch mean ELBO values from a metrics file.
pub fn metrics_elbo(text: &str) -> Vec<f64> {
    text.lines()
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() == 4 && f[1] == "elbo" { f[2].parse().ok() } else { None }
        })
        .collect()
}
