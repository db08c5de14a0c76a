//! The `cihj` command line: load an experiment config, run one pipeline or
//! all of them, write a JSON summary plus CSV detail files.
//!
//! Exit status: 0 when every check passes, 1 on a failed check, 2 on a
//! configuration error, 3 when an enumeration would exceed the path cap.
//! Every flag can also come from the environment (`CIHJ_CONFIG`,
//! `CIHJ_OUT`, `CIHJ_THREADS`, `CIHJ_CAP`, `CIHJ_NORMALIZE_TIMESTAMPS`).

pub mod checks;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use log::{error, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::path_space::EnumeratedFamily;
use checks::{Artifact, CheckResult, Outcome};
pub use config::{ExperimentConfig, PhiSpec, CONFIG_SCHEMA};

pub const REPORT_SCHEMA: &str = "cihj.report.v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CAP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cihj", version, about = "Penalty, ci-derivative and comparison checks on discretized path spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true, env = "CIHJ_CONFIG")]
    pub config: Option<PathBuf>,

    /// Output directory; overrides the config's `output`.
    #[arg(long, global = true, env = "CIHJ_OUT")]
    pub out: Option<PathBuf>,

    /// Worker threads for the parallel sweeps.
    #[arg(long, global = true, env = "CIHJ_THREADS")]
    pub threads: Option<usize>,

    /// Override the path-count cap of every family.
    #[arg(long, global = true, env = "CIHJ_CAP")]
    pub cap: Option<u64>,

    /// Drop runtimes and wall-clock stamps so summaries compare byte for byte.
    #[arg(long, global = true, env = "CIHJ_NORMALIZE_TIMESTAMPS")]
    pub normalize_timestamps: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Exhaustive property sweep of the penalty functional.
    PenaltySuite,
    /// Finite-difference vs exact ci-derivatives, plus the switch-point exhibit.
    CiCheck,
    /// Doubling-of-variables comparison of two functionals.
    Compare,
    /// Dynamic programming on the configured Bellman problem.
    Solve,
    /// Everything above.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub schema: &'static str,
    pub command: Command,
    pub pass: bool,
    pub parallel: bool,
    pub checks: Vec<CheckResult>,
    pub input_digests: BTreeMap<String, String>,
    pub generated_unix: Option<u64>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CapExceeded { .. } => EXIT_CAP,
        Error::Config(_)
        | Error::Json(_)
        | Error::Expr(_)
        | Error::InvalidGrid(_)
        | Error::InvalidFamily(_)
        | Error::EmptyControls
        | Error::DimensionMismatch { .. }
        | Error::StepNotGridMultiple { .. } => EXIT_CONFIG,
        _ => EXIT_CHECK_FAILED,
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn families(cfg: &ExperimentConfig, cap: Option<u64>) -> Result<Vec<EnumeratedFamily>> {
    std::iter::once(&cfg.family)
        .chain(&cfg.extra_families)
        .map(|f| {
            let mut f = f.clone();
            if cap.is_some() {
                f.cap = cap;
            }
            f.build()?.members()
        })
        .collect()
}

fn execute(cli: &Cli) -> Result<(SuiteReport, Vec<Artifact>, PathBuf)> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let (cfg, text) = ExperimentConfig::load(path)?;
    let fams = families(&cfg, cli.cap)?;
    let mut digests = BTreeMap::new();
    digests.insert("config".to_string(), digest(text.as_bytes()));
    if let (_, Some(bytes)) = checks::load_problem(&cfg)? {
        digests.insert("problem".to_string(), digest(&bytes));
    }
    for (k, phi) in [("phi1", &cfg.compare.phi1), ("phi2", &cfg.compare.phi2)] {
        if let PhiSpec::Table { path } = phi {
            digests.insert(k.to_string(), digest(&std::fs::read(path)?));
        }
    }
    let out = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("cihj-out"));

    let fam = &fams[0];
    let seed = cfg.seeds.sampling;
    let outcomes: Vec<Outcome> = match cli.command {
        Command::PenaltySuite => vec![checks::penalty_suite_check(&cfg, fam)?],
        Command::CiCheck => vec![checks::ci_check(&cfg, fam)?],
        Command::Compare => vec![checks::compare_check(&cfg, fam)?],
        Command::Solve => vec![checks::solve_check(&cfg, &fams, seed)?],
        Command::All => vec![
            checks::penalty_suite_check(&cfg, fam)?,
            checks::ci_check(&cfg, fam)?,
            checks::solve_check(&cfg, &fams, seed)?,
            checks::compare_check(&cfg, fam)?,
        ],
    };
    let mut report = SuiteReport {
        schema: REPORT_SCHEMA,
        command: cli.command,
        pass: outcomes.iter().all(|o| o.check.pass),
        parallel: crate::par::is_parallel(),
        checks: Vec::new(),
        input_digests: digests,
        generated_unix: SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs()),
    };
    let mut artifacts = Vec::new();
    for mut o in outcomes {
        if cli.normalize_timestamps {
            o.check.runtime_ms = None;
        }
        report.checks.push(o.check);
        artifacts.extend(o.artifacts);
    }
    if cli.normalize_timestamps {
        report.generated_unix = None;
    }
    Ok((report, artifacts, out))
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(0) => Err(Error::Config("--threads must be positive".into())),
        #[cfg(feature = "parallel")]
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        #[cfg(not(feature = "parallel"))]
        Some(_) => {
            warn!("built without the `parallel` feature; --threads is ignored");
            Ok(f())
        }
        None => Ok(f()),
    }
}

/// Run the command line; returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = with_threads(cli.threads, || execute(&cli)).and_then(|r| r);
    let (report, artifacts, out) = match result {
        Ok(r) => r,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let written = (|| -> Result<()> {
        std::fs::create_dir_all(&out)?;
        for a in &artifacts {
            write_atomic(&out, &a.name, &a.bytes)?;
        }
        let mut json = serde_json::to_vec_pretty(&report)?;
        json.push(b'\n');
        write_atomic(&out, "summary.json", &json)
    })();
    if let Err(e) = written {
        eprintln!("error: writing {}: {e}", out.display());
        return EXIT_CHECK_FAILED;
    }
    for c in report.checks.iter().filter(|c| !c.pass) {
        warn!("check `{}` failed", c.name);
        eprintln!("check failed: {}", c.name);
    }
    if report.pass {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    }
}
