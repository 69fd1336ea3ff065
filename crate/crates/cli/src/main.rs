use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfnngp::config::RunConfig;
use sfnngp::pipeline;
use sfnngp::SfError;

#[derive(Parser, Debug)]
#[command(name = "sfnngp", version, about = "Two-stage spatial factor NNGP toolchain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file; defaults apply to every key it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `chain.n_chains`.
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset with known truth.
    Simulate,
    /// Write the ordered nearest-neighbor sets of the stage-1 locations.
    Neighbors,
    /// Fit the high-dimensional outcome model.
    FitStage1,
    /// Fit the low-dimensional outcome model on stage-1 factor draws.
    FitStage2,
    /// Predict at query locations and impute missing outcomes.
    Predict,
    /// Score predictions against truth.
    Score,
    /// Run every step in order.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Neighbors => "neighbors",
            Command::FitStage1 => "fit-stage1",
            Command::FitStage2 => "fit-stage2",
            Command::Predict => "predict",
            Command::Score => "score",
            Command::All => "all",
        }
    }
}

fn load_config(cli: &Cli) -> sfnngp::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out = o.to_string_lossy().into_owned();
    }
    if let Some(c) = cli.chains {
        cfg.chain.n_chains = c;
    }
    if cli.quiet {
        cfg.chain.progress = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> sfnngp::Result<()> {
    let cfg = load_config(cli)?;
    let reports = match cli.command {
        Command::All => pipeline::run_all(&cfg)?,
        c => vec![pipeline::run_subcommand(c.name(), &cfg)?],
    };
    if !cli.quiet {
        for r in reports {
            for n in &r.notices {
                eprintln!("note: {n}");
            }
            eprintln!("wrote {} files to {}", r.files.len(), r.dir.display());
        }
    }
    Ok(())
}

/// One line: `error<TAB>kind=<kind><TAB>subcommand=<name><TAB>message=<text>`.
fn error_line(cmd: &str, e: &SfError) -> String {
    let msg = e.to_string().replace(['\n', '\t'], " ");
    format!("error\tkind={}\tsubcommand={cmd}\tmessage={msg}", e.kind())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(cli.command.name(), &e));
            ExitCode::from(2)
        }
    }
}
