//! Library side of the `imago` command: configuration, run manifests and
//! the per-stage commands. `main.rs` only parses arguments.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod output;

pub use commands::RunOptions;
pub use config::ExperimentConfig;
pub use error::{CliError, Result};

use manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Preprocess,
    Rsa,
    Ridge,
    CnnTrain,
    CnnEval,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Rsa => "rsa",
            Command::Ridge => "ridge",
            Command::CnnTrain => "cnn-train",
            Command::CnnEval => "cnn-eval",
            Command::Report => "report",
        }
    }
}

/// Runs `cmd` on a thread pool of `jobs` workers. Output does not depend
/// on `jobs`.
pub fn run(cmd: Command, opts: &RunOptions, jobs: usize) -> Result<RunManifest> {
    opts.config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| match cmd {
        Command::Synth => commands::cmd_synth(opts),
        Command::Preprocess => commands::cmd_preprocess(opts),
        Command::Rsa => commands::cmd_rsa(opts),
        Command::Ridge => commands::cmd_ridge(opts),
        Command::CnnTrain => commands::cmd_cnn_train(opts),
        Command::CnnEval => commands::cmd_cnn_eval(opts),
        Command::Report => commands::cmd_report(opts),
    })
}
