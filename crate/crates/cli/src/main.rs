//! `microdiff`: bucketize, train, sample, refine and evaluate toy diffusion
//! models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod ae;
mod bucketize;
mod eval;
mod files;
mod sample;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "microdiff", version, about = "Desk-scale diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    Bucketize(bucketize::Args),
    /// Print a training run file for a preset.
    Config(train::ConfigArgs),
    Train(train::Args),
    Sample(sample::Args),
    Refine(sample::RefineArgs),
    Eval(eval::Args),
    Stats(eval::StatsArgs),
    Synth(synth::Args),
    TrainAe(ae::Args),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use microdiff::Error as E;
    for cause in err.chain() {
        if cause.is::<files::Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::LevelOutOfRange { .. } => 1,
                E::NonFinite { .. } => 3,
                E::Shape(_) | E::Data(_) | E::Format(_) | E::Io(_) => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Bucketize(a) => bucketize::run(a),
        Command::Config(a) => train::config(a),
        Command::Train(a) => train::run(a),
        Command::Sample(a) => sample::run(a),
        Command::Refine(a) => sample::refine(a),
        Command::Eval(a) => eval::run(a),
        Command::Stats(a) => eval::stats(a),
        Command::Synth(a) => synth::run(a),
        Command::TrainAe(a) => ae::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
