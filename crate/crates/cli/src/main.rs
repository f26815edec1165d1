use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imago_cli::{run, CliError, Command, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "imago", version, about = "Map imagined MEG responses onto listened ones")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Upstream directory, instead of the default stage under the output root.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with known ground truth.
    Synth(Common),
    /// Screen, bandpass, denoise, z-score and decimate.
    Preprocess(Common),
    /// Trial similarity and correlation classifier.
    Rsa(Common),
    /// Windowed ridge mapping with leave-one-trial-out and a shuffled null.
    Ridge(Common),
    /// Leave-one-subject-out CNN training, true and null.
    CnnTrain(Common),
    /// Score saved CNN checkpoints on held-out evaluation pairs.
    CnnEval(Common),
    /// Collect stage results into paired tables and figure data.
    Report(Common),
    /// Print the effective configuration as TOML.
    Config(Common),
}

fn options(common: &Common) -> Result<RunOptions, CliError> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    Ok(RunOptions {
        config,
        force: common.force,
        input: common.input.clone(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (cmd, common) = match cli.command {
        Cmd::Synth(c) => (Some(Command::Synth), c),
        Cmd::Preprocess(c) => (Some(Command::Preprocess), c),
        Cmd::Rsa(c) => (Some(Command::Rsa), c),
        Cmd::Ridge(c) => (Some(Command::Ridge), c),
        Cmd::CnnTrain(c) => (Some(Command::CnnTrain), c),
        Cmd::CnnEval(c) => (Some(Command::CnnEval), c),
        Cmd::Report(c) => (Some(Command::Report), c),
        Cmd::Config(c) => (None, c),
    };
    let result = options(&common).and_then(|opts| match cmd {
        Some(cmd) => run(cmd, &opts, common.jobs).map(|m| {
            println!("{}: {} files, fingerprint {}", cmd.name(), m.files.len(), m.output_fingerprint);
        }),
        None => opts.config.validate().map(|_| print!("{}", opts.config.to_toml())),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
