//! Command-line entry point: data generation, training, probing, sweeps,
//! forced-choice tests, heatmaps, embedding export and the desk-scale
//! acceptance report. Every run leaves a `run.toml` manifest.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::acceptance::Scale;
use crate::error::{io_err, CliError, Result};
use crate::manifest::{digest_tree, RunManifest};
use crate::pipeline::ModelKind;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DIGITWIN_OUT";

#[derive(Debug, Parser)]
#[command(name = "digitwin", version, about = "Digital-twin rearing experiments at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML configuration layered over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one dotted key, e.g. `--set vit.train.epochs=3`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset seed (`seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (`threads`); 0 uses one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory; defaults to `<out-root>/<command>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Root for default run directories.
    #[arg(long, global = true, env = OUT_ENV, default_value = "runs", value_name = "DIR")]
    pub out_root: PathBuf,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render rearing frames and, optionally, the labelled probe set.
    GenerateData {
        #[arg(long)]
        condition: Option<u8>,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the 24 probe subsets.
        #[arg(long)]
        probe: bool,
    },
    /// Train one encoder on the rearing frames.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Viewpoint-fold linear probe of a frozen encoder.
    Probe {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, value_parser = ["train11", "train1"])]
        mode: Option<String>,
    },
    /// Train and probe at every configured training-set size.
    Sweep {
        #[arg(long, value_enum, default_value = "vit-cot")]
        model: ModelKind,
    },
    /// Forced-choice reconstruction test between the two objects.
    #[command(name = "eval-2afc")]
    Eval2afc {
        #[command(flatten)]
        source: ModelSource,
    },
    /// Per-head attention heatmaps over probe frames.
    Heatmap {
        #[command(flatten)]
        source: ModelSource,
    },
    /// Probe-frame embeddings and their principal components.
    ExportEmbeddings {
        #[command(flatten)]
        source: ModelSource,
        /// Principal components written to `pca.csv`.
        #[arg(long, default_value_t = 2)]
        components: usize,
    },
    /// Run the acceptance pipeline and print its report.
    Reproduce {
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
    },
}

/// A trained checkpoint or, without one, fresh weights of `--model`.
#[derive(Debug, Clone, Args)]
pub struct ModelSource {
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateData { .. } => "generate-data",
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::Sweep { .. } => "sweep",
            Command::Eval2afc { .. } => "eval-2afc",
            Command::Heatmap { .. } => "heatmap",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Reproduce { .. } => "reproduce",
        }
    }

    /// Dedicated flags expressed as config overrides; they take precedence
    /// over `--set`.
    fn overrides(&self) -> Vec<String> {
        match self {
            Command::GenerateData { condition, frames, .. } => {
                let mut o = Vec::new();
                if let Some(c) = condition {
                    o.push(format!("data.condition={c}"));
                }
                if let Some(f) = frames {
                    o.push(format!("data.frames={f}"));
                }
                o
            }
            Command::Train {
                model,
                epochs: Some(e),
            } => vec![format!("{}.train.epochs={e}", model.section())],
            Command::Probe { mode: Some(m), .. } => vec![format!("probe.mode=\"{m}\"")],
            _ => Vec::new(),
        }
    }
}

/// Output of a command body, recorded in the manifest.
#[derive(Default)]
pub struct Outcome {
    pub inputs: Vec<manifest::FileDigest>,
    pub notes: Vec<String>,
    /// Nonzero when the command ran but its result is a failure.
    pub failed: Option<String>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir).map_err(io_err(dir))?.next().is_some();
        if occupied && !force {
            return Err(CliError::Exists(dir.display().to_string()));
        }
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<i32> {
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = g.threads {
        overrides.push(format!("threads={t}"));
    }
    overrides.extend(cli.command.overrides());
    let cfg = config::resolve(g.config.as_deref(), &overrides)?;

    let dir = g.out.clone().unwrap_or_else(|| g.out_root.join(cli.command.name()));
    prepare_dir(&dir, g.force)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let result = pool.install(|| commands::execute(&cli.command, &cfg, &dir));

    let (status, outcome, err) = match result {
        Ok(o) => match &o.failed {
            Some(why) => (format!("failed: {why}"), o, None),
            None => ("ok".to_string(), o, None),
        },
        Err(e) => (format!("error: {e}"), Outcome::default(), Some(e)),
    };
    let manifest = RunManifest {
        command: cli.command.name().into(),
        argv: argv.to_vec(),
        seed: cfg.seed,
        threads,
        status,
        inputs: outcome.inputs,
        artifacts: digest_tree(&dir)?,
        notes: outcome.notes.clone(),
        config: cfg,
    };
    manifest.write(&dir)?;
    if let Some(e) = err {
        return Err(e);
    }
    let mut out = std::io::stdout().lock();
    for n in &outcome.notes {
        let _ = writeln!(out, "{n}");
    }
    let _ = writeln!(out, "manifest: {}", dir.join(manifest::FILE).display());
    Ok(if outcome.failed.is_some() { 1 } else { 0 })
}
