//! Command-line front end: `simulate`, `fit`, `assoc`, `study`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
//! 3 I/O or file-format failure.

pub mod commands;
pub mod config;
pub mod format;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::assoc::Method;
use crate::error::{Error, Result};

pub use commands::{cmd_assoc, cmd_fit, cmd_gradcheck, cmd_simulate, cmd_study};
pub use config::{RunConfig, Stage2Mode};
pub use format::{Checkpoint, Dataset, Truth};

pub const LOG_ENV: &str = "ICM_LOG";

#[derive(Debug, Parser)]
#[command(name = "icm", version, about = "Confounder-corrected association testing with implicit generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// key = value configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated methods: icm, pca, uncorrected
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// p-value threshold t
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate genotypes and a trait; writes dataset.icmg and a summary
    Simulate,
    /// Fit stage 1 (and stage 2 when traits are present); writes checkpoint.icmc and metrics.tsv
    Fit {
        dataset: PathBuf,
        /// Continue from an earlier checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Per-SNP association tests; writes assoc_<method>.tsv
    Assoc { dataset: PathBuf, checkpoint: Option<PathBuf> },
    /// Replicated precision study; writes study.tsv and replicates.tsv
    Study,
    /// Finite-difference checks of every gradient
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

impl Cli {
    /// File configuration with command-line flags applied on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(m) = &self.method {
            cfg.methods = Method::parse_list(m)?;
        }
        if let Some(t) = self.threshold {
            cfg.threshold = t;
        }
        Ok(cfg)
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn dispatch(cli: &Cli) -> Result<i32> {
    if let Command::Gradcheck { instances } = cli.command {
        let rows = cmd_gradcheck(instances);
        println!("check\tinstances\tmax_rel_error\tstatus");
        for r in &rows {
            println!("{}\t{}\t{:.3e}\t{}", r.name, r.instances, r.max_error, if r.passed() { "ok" } else { "FAIL" });
        }
        return Ok(if rows.iter().all(|r| r.passed()) { 0 } else { 2 });
    }
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Simulate => println!("{}", cmd_simulate(&cfg)?.display()),
        Command::Fit { dataset, resume } => {
            let o = cmd_fit(&cfg, dataset, resume.as_deref())?;
            println!("{}", o.checkpoint.display());
            println!("{}", o.metrics.display());
            if let Some(p) = o.stage2 {
                println!("{}", p.display());
            }
        }
        Command::Assoc { dataset, checkpoint } => {
            for p in cmd_assoc(&cfg, dataset, checkpoint.as_deref())? {
                println!("{}", p.display());
            }
        }
        Command::Study => {
            let o = cmd_study(&cfg)?;
            println!("{}", o.table.display());
            println!("{}", o.replicates.display());
            if o.failures > 0 {
                eprintln!("icm: {} replicate(s) failed; see {}", o.failures, o.replicates.display());
                return Ok(2);
            }
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
    }
    Ok(0)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Config("--threads must be >= 1".into())),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::Config(format!("cannot start {n} threads: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("icm: {e}");
            e.exit_code()
        }
    }
}
