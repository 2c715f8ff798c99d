//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use theraloop_core::domain::{encode_pretty, Target};
use theraloop_core::evidence::{EvidenceIndex, FactorTable};
use theraloop_core::gateway::{Gateway, GatewayConfig};
use theraloop_core::memory::MemoryStore;
use theraloop_core::pipeline::{
    self, AblationRow, LabeledCase, PatientResult, PipelineError, RunConfig, RunReport, Stores,
};
use theraloop_core::synth::{Generator, SynthError, TierMix};
use theraloop_core::{schemas, stub};

use crate::config::{BackendChoice, ConfigError, FileConfig, Mode, API_KEY_ENV};
use crate::files::{self, DataError};
use crate::http::HttpBackend;
use crate::kb;
use crate::runner::Parallel;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_GATEWAY: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("gateway unavailable: {0}")]
    Gateway(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Synth(SynthError::InvalidMix(_)) => EXIT_CONFIG,
            CliError::Pipeline(PipelineError::Gateway { .. }) | CliError::Gateway(_) => EXIT_GATEWAY,
            CliError::Data(_) | CliError::Synth(_) | CliError::Pipeline(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "theraloop", version, about = "Outcome prediction for PSMA radioligand therapy candidates")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort directory.
    Generate {
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value = "0.5,0.3,0.2")]
        mix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a knowledge-base index file from a corpus directory.
    IngestKb {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Case memory maintenance.
    Memory {
        #[command(subcommand)]
        action: MemoryAction,
    },
    /// Predict both targets for one case directory.
    Predict {
        #[arg(long = "case")]
        case_dir: PathBuf,
        #[command(flatten)]
        memory: MemoryArg,
    },
    /// Cross-validated evaluation on a labelled cohort.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full system plus the four ablation rows.
    Ablate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct MemoryArg {
    /// Journal file; overrides `memory.path`.
    #[arg(long)]
    pub memory: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MemoryAction {
    /// Build a memory from every labelled case of a cohort.
    Bootstrap {
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        memory: MemoryArg,
    },
    Stats {
        #[command(flatten)]
        memory: MemoryArg,
    },
    Compact {
        #[command(flatten)]
        memory: MemoryArg,
    },
}

pub fn parse_mix(s: &str) -> Result<TierMix, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--mix {s:?}: {e}")))?;
    let [clear, ambiguous, misleading] = parts[..] else {
        return Err(CliError::Usage(format!("--mix needs three comma-separated weights, got {s:?}")));
    };
    let mix = TierMix { clear, ambiguous, misleading };
    mix.validate()?;
    Ok(mix)
}

/// Everything a command needs, resolved from flags and the config file.
pub struct Context {
    pub file: FileConfig,
    pub run: RunConfig,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Context, CliError> {
        let mut file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        if let Some(seed) = cli.seed {
            file.seed = seed;
        }
        if let Some(mode) = cli.mode {
            file.mode = mode;
        }
        file.validate()?;
        let run = file.run_config();
        Ok(Context { file, run })
    }

    pub fn gateway(&self) -> Gateway {
        let cfg = GatewayConfig { retries: self.file.gateway.retries, call_budget: self.file.gateway.call_budget };
        match self.file.gateway.backend {
            BackendChoice::Stub => Gateway::new(stub::rule_backend(), schemas::registry(), cfg),
            BackendChoice::Remote => {
                let key = std::env::var(API_KEY_ENV).ok();
                Gateway::new(HttpBackend::new(&self.file.gateway, key), schemas::registry(), cfg)
            }
        }
    }

    pub fn index(&self) -> Result<EvidenceIndex, CliError> {
        Ok(kb::load_or_shipped(self.file.index.path.as_deref())?)
    }

    fn memory_path(&self, arg: &MemoryArg) -> Result<PathBuf, CliError> {
        arg.memory
            .clone()
            .or_else(|| self.file.memory.path.clone())
            .ok_or_else(|| CliError::Usage("no memory journal: pass --memory or set memory.path".into()))
    }

    pub fn runner(&self) -> Parallel {
        Parallel::new(self.file.workers)
    }
}

fn json<T: Serialize>(v: &T) -> String {
    encode_pretty(v).expect("report encodes") + "\n"
}

/// A model-mode run in which no patient got a model answer means the
/// backend is unusable.
fn check_gateway(ctx: &Context, results: &[PatientResult], gateway_failures: usize) -> Result<(), CliError> {
    if results.is_empty() && gateway_failures > 0 {
        return Err(CliError::Gateway(format!("{gateway_failures} patients failed at the gateway")));
    }
    if ctx.file.mode == Mode::Model && !results.is_empty() && results.iter().all(|r| r.fallback.is_some()) {
        let reason = results[0].fallback.clone().unwrap_or_default();
        return Err(CliError::Gateway(reason));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationFile<'a> {
    config_hash: &'a str,
    cohort_manifest: Option<String>,
    report: &'a RunReport,
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config_hash: String,
    cohort_manifest: Option<String>,
    rows: &'a [AblationRow],
}

fn load_cohort(dir: &Path) -> Result<(Vec<LabeledCase>, Option<String>), CliError> {
    let cases = files::read_cohort(dir)?;
    let manifest = files::read_manifest(dir).ok().map(|m| m.sha256());
    Ok((cases, manifest))
}

/// Runs one command and returns what goes to stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let ctx = Context::from_cli(cli)?;
    match &cli.command {
        Command::Generate { n, mix, out } => {
            let mix = parse_mix(mix)?;
            let cohort = Generator::default().generate(*n, &mix, ctx.file.seed)?;
            files::write_cohort(out, &cohort)?;
            let m = &cohort.manifest;
            Ok(format!(
                "wrote {} cases to {}\ntiers {:?}\npositives psa_response {} os_gt_12m {}\nround trip {}/{} fields\nmanifest {}\n",
                m.n,
                out.display(),
                m.tier_counts,
                m.positives[&Target::PsaResponse],
                m.positives[&Target::OsGt12m],
                m.verification.fields_recovered,
                m.verification.fields_checked,
                m.sha256()
            ))
        }
        Command::IngestKb { corpus, out } => {
            let (_, file) = files::ingest_dir(corpus)?;
            files::save_index(out, &file)?;
            let mut text = format!("indexed {} documents, {} chunks\n", file.report.documents, file.report.chunks);
            for s in &file.report.skipped {
                text.push_str(&format!("skipped: {s}\n"));
            }
            Ok(text)
        }
        Command::Memory { action } => memory_command(&ctx, action),
        Command::Predict { case_dir, memory } => {
            let record = files::read_case(case_dir)?;
            let mut store = match memory.memory.clone().or_else(|| ctx.file.memory.path.clone()) {
                Some(p) => files::load_memory(&p)?,
                None => MemoryStore::new(),
            };
            store.mine(ctx.run.min_support);
            let (gateway, index, factors) = (ctx.gateway(), ctx.index()?, FactorTable::shipped());
            let stores = Stores { memory: &store, index: &index, factors: &factors, gateway: &gateway };
            let result = pipeline::predict_patient(&record, &ctx.run, stores)?;
            check_gateway(&ctx, std::slice::from_ref(&result), 0)?;
            Ok(json(&result.predictions))
        }
        Command::Evaluate { cohort, folds, out } => {
            let mut run = ctx.run.clone();
            if let Some(f) = folds {
                if *f < 2 {
                    return Err(CliError::Usage("--folds must be at least 2".into()));
                }
                run.folds = *f;
            }
            let (cases, manifest) = load_cohort(cohort)?;
            let (gateway, index, factors) = (ctx.gateway(), ctx.index()?, FactorTable::shipped());
            let report = pipeline::evaluate_cohort(&cases, &run, &index, &factors, &gateway, &ctx.runner())?;
            if let Some(out) = out {
                let file = EvaluationFile { config_hash: &report.config_hash, cohort_manifest: manifest, report: &report };
                files::write(out, &json(&file))?;
            }
            check_gateway(&ctx, &report.results, report.gateway_failures)?;
            Ok(pipeline::render_report(&report))
        }
        Command::Ablate { cohort, out } => {
            let (cases, manifest) = load_cohort(cohort)?;
            let (gateway, index, factors) = (ctx.gateway(), ctx.index()?, FactorTable::shipped());
            let rows = pipeline::run_ablation(&cases, &ctx.run, &index, &factors, &gateway, &ctx.runner())?;
            if let Some(out) = out {
                let file = AblationFile { config_hash: ctx.run.hash(), cohort_manifest: manifest, rows: &rows };
                files::write(out, &json(&file))?;
            }
            check_gateway(&ctx, &rows[0].report.results, rows[0].report.gateway_failures)?;
            Ok(format!("config {}\n{}", ctx.run.hash(), pipeline::render_ablation(&rows)))
        }
    }
}

fn memory_command(ctx: &Context, action: &MemoryAction) -> Result<String, CliError> {
    let stats_text = |store: &MemoryStore| {
        let s = store.stats();
        let mut text = format!("entries {}\nprovisional {}\npatterns {}\n", s.entries, s.provisional, s.patterns);
        for (t, r) in &s.base_rates {
            text.push_str(&match r {
                Some(r) => format!("base_rate {} {:.4}\n", t.as_str(), r),
                None => format!("base_rate {} none\n", t.as_str()),
            });
        }
        text
    };
    match action {
        MemoryAction::Bootstrap { cohort, memory } => {
            let path = ctx.memory_path(memory)?;
            let cases = files::read_cohort(cohort)?;
            let boot = pipeline::bootstrap_memory(&cases, &ctx.run, &ctx.gateway());
            files::save_memory(&path, &boot.store)?;
            let mut text = stats_text(&boot.store);
            for w in boot.warnings.iter().chain(&boot.failures) {
                text.push_str(&format!("warning: {w}\n"));
            }
            Ok(text)
        }
        MemoryAction::Stats { memory } => {
            let mut store = files::load_memory(&ctx.memory_path(memory)?)?;
            store.mine(ctx.run.min_support);
            Ok(stats_text(&store))
        }
        MemoryAction::Compact { memory } => {
            let path = ctx.memory_path(memory)?;
            let mut store = files::load_memory(&path)?;
            let before = store.journal().len();
            store.compact();
            files::save_memory(&path, &store)?;
            Ok(format!("compacted {before} records into {}\n", store.journal().len()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("theraloop").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn mix_parsing() {
        assert_eq!(parse_mix("0.5,0.3,0.2").unwrap(), TierMix::default());
        assert_eq!(parse_mix("0.5,0.3").unwrap_err().exit_code(), EXIT_CONFIG);
        assert_eq!(parse_mix("0.9,0.3,0.2").unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn exit_codes() {
        let missing = cli(&["--config", "/nonexistent/x.toml", "memory", "stats"]);
        assert_eq!(run(&missing).unwrap_err().exit_code(), EXIT_CONFIG);
        let no_path = cli(&["memory", "stats"]);
        assert_eq!(run(&no_path).unwrap_err().exit_code(), EXIT_CONFIG);
        let no_case = cli(&["predict", "--case", "/nonexistent/S0001"]);
        assert_eq!(run(&no_case).unwrap_err().exit_code(), EXIT_DATA);
    }

    #[test]
    fn gateway_failure_exits_four() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        // nothing listens on port 9 of localhost
        std::fs::write(
            &cfg,
            "mode = \"model\"\n[gateway]\nbackend = \"remote\"\nendpoint = \"http://127.0.0.1:9/v1\"\nmodel = \"m\"\nretries = 1\ntimeout_secs = 2\n",
        )
        .unwrap();
        let out = dir.path().join("c");
        run(&cli(&["generate", "--n", "5", "--out", out.to_str().unwrap()])).unwrap();
        let case = out.join("cases").join("S0001");
        let err = run(&cli(&["--config", cfg.to_str().unwrap(), "predict", "--case", case.to_str().unwrap()])).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_GATEWAY, "{err}");
    }
}
