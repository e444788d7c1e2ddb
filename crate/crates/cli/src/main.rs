//! The `dpt` binary: argument parsing and dispatch only; all behavior lives
//! in the library so tests can drive it directly.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpt_cli::{
    execute, load_config, replay, resolve_out_root, resolve_run_id, CliError, CommandKind,
    Invocation,
};

#[derive(Parser)]
#[command(
    name = "dpt",
    version,
    about = "Decision-pretrained transformers: generate data, pretrain, evaluate, check the theory."
)]
struct Cli {
    /// Output root for run directories (default: $DPT_OUTPUT_ROOT, else ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker-pool size for parallel sampling/evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Dot-path overrides into the config, e.g. --set train.batch_size=64.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Run identifier (and directory name under the output root).
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a pretraining dataset (JSONL) from the config's `data` section.
    Generate(RunArgs),
    /// Train a model; writes checkpoint.json, train.csv, and meta.json.
    Pretrain(RunArgs),
    /// Deploy agents offline/online; writes metrics CSVs and SVG plots.
    Eval(RunArgs),
    /// Run the exact posterior-sampling checks; exits 4 if any fail.
    Theory(RunArgs),
    /// Re-execute a finished run from its manifest into `<run_id>-replay`.
    Replay {
        /// manifest.json of the run to reproduce.
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        // Fails only if a pool already exists, which only tests do.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => configured(CommandKind::Generate, args, cli.out),
        Command::Pretrain(args) => configured(CommandKind::Pretrain, args, cli.out),
        Command::Eval(args) => configured(CommandKind::Eval, args, cli.out),
        Command::Theory(args) => configured(CommandKind::Theory, args, cli.out),
        Command::Replay { manifest } => replay(&manifest, cli.out),
    }
}

fn configured(kind: CommandKind, args: RunArgs, out: Option<PathBuf>) -> Result<(), CliError> {
    let config = load_config(&args.config, &args.set)?;
    let run_id = resolve_run_id(args.run_id, &config, &args.config, kind);
    let invocation = Invocation {
        kind,
        config,
        dir_name: run_id.clone(),
        run_id,
        out_root: resolve_out_root(out),
    };
    execute(&invocation)
}
