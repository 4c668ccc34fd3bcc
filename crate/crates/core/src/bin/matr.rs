use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use matr::commands::{cmd_ablate, cmd_collide, cmd_eval, cmd_synth, cmd_track, cmd_train};
use matr::config::{RunConfig, SEED_ENV};
use matr::trainer::TrainMode;
use matr::MatrError;

#[derive(Parser, Debug)]
#[command(name = "matr", version, about = "Toy motion-aware query tracker")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and MATR_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus loss log.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<TrainMode>,
    },
    /// Track one sequence directory.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a result file against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track-query distance statistics on the collision split.
    Collide {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare several modes over several seeds.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated modes, e.g. `matr,qim_like,klf`.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<TrainMode>,
    },
}

fn resolve(common: &Common) -> matr::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| MatrError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    let env = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(common.seed, env.as_deref())?;
    Ok(cfg)
}

fn run(cli: Cli) -> matr::Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match &cli.command {
        Command::Train { mode: Some(m), .. } => cfg.train.mode = *m,
        Command::Ablate { modes, .. } if !modes.is_empty() => cfg.ablate.modes = modes.clone(),
        _ => {}
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    // Best-effort: the resolved config is informational.
    let _ = out.write_all(cfg.to_text().as_bytes());
    match cli.command {
        Command::Synth { out: dir } => cmd_synth(&cfg, &dir, &mut out).map(drop),
        Command::Train { dataset, out: dir, .. } => cmd_train(&cfg, &dataset, &dir, &mut out).map(drop),
        Command::Track {
            checkpoint,
            sequence,
            out: file,
        } => cmd_track(&cfg, &checkpoint, &sequence, &file, &mut out).map(drop),
        Command::Eval { gt, result, out: dir } => cmd_eval(&cfg, &gt, &result, &dir, &mut out).map(drop),
        Command::Collide {
            checkpoint,
            dataset,
            out: dir,
        } => cmd_collide(&cfg, &checkpoint, &dataset, &dir, &mut out).map(drop),
        Command::Ablate { dataset, out: dir, .. } => cmd_ablate(&cfg, dataset.as_deref(), &dir, &mut out).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage code=1 message={first}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} code={} message={msg}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
