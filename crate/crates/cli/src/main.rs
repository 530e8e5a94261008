use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use resynth_cli::commands::{self, ResynthRequest};
use resynth_cli::{exit_code, RunConfig, UserError, EXIT_INTERNAL, EXIT_USER};
use resynth_core::resynth::Method;

/// Thread count for the worker pool; unset means one per core.
const THREADS_ENV: &str = "RESYNTH_THREADS";

#[derive(Parser)]
#[command(name = "resynth", version, about = "Resynthesize audio from first-layer RVQ codes")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "resynth.toml")]
    config: PathBuf,
    /// Run directory, overriding `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with every default spelled out.
    InitConfig {
        #[arg(long)]
        force: bool,
    },
    /// Synthesize the corpus and its manifest.
    GenCorpus,
    /// Train the residual vector quantizer on the training split.
    TrainCodec,
    /// Train one resynthesis model.
    Train {
        #[arg(long)]
        method: Method,
    },
    /// Resynthesize the held-out split or a single WAV.
    Resynth {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Bridge sampling steps (ignored by the other methods).
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score every configured method on the held-out split.
    Eval,
    /// Print the noise schedule as CSV.
    Schedule,
    /// Run the whole pipeline.
    Run {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UserError(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    if let Command::InitConfig { force } = cli.command {
        if cli.config.exists() && !force {
            return Err(UserError(format!("{} exists; pass --force to overwrite", cli.config.display())).into());
        }
        let mut cfg = RunConfig::default();
        if let Some(out) = cli.out {
            cfg.out_dir = out;
        }
        cfg.save(&cli.config)?;
        println!("wrote {}", cli.config.display());
        return Ok(());
    }
    let cfg = load(&cli)?;
    if let Command::Schedule = cli.command {
        print!("{}", commands::schedule_csv(&cfg)?);
        return Ok(());
    }
    let _lock = commands::open_run(&cfg)?;
    match cli.command {
        Command::GenCorpus => {
            let info = commands::gen_corpus(&cfg)?;
            println!("corpus: {} train, {} held out", info.num_train, info.num_test);
        }
        Command::TrainCodec => {
            let info = commands::train_codec(&cfg)?;
            println!(
                "codec {}: {} bit/s, residual norms {:?}",
                &info.rvq_sha256[..12],
                info.bitrate_bps,
                info.residual_norms
            );
        }
        Command::Train { method } => {
            let info = commands::train(&cfg, method)?;
            println!("{method}: final loss {:.6}", info.final_loss);
        }
        Command::Resynth {
            method,
            input,
            nfe,
            seed,
        } => {
            if nfe.is_some() && method != Method::Bridge {
                eprintln!("note: --nfe only applies to the bridge");
            }
            let req = ResynthRequest {
                method,
                input,
                nfe: if method == Method::Bridge { nfe } else { None },
                seed,
            };
            let info = commands::resynth(&cfg, &req)?;
            println!("{method}: {} files, NFE {}", info.files.len(), info.nfe);
        }
        Command::Eval => print!("{}", commands::eval(&cfg)?.to_csv()),
        Command::Run { seed } => print!("{}", commands::run_all(&cfg, seed)?.to_csv()),
        Command::InitConfig { .. } | Command::Schedule => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL as u8),
    }
}
