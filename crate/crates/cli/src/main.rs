mod args;
mod commands;
mod error;
mod run;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use error::CliError;
use settings::Settings;

fn run(cli: Cli) -> Result<(), CliError> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    settings.flag("data_dir", cli.data.as_ref().map(|p| p.display()));
    let run_dir = match cli.command {
        Command::Dataset(a) => commands::dataset(settings, a),
        Command::TrainClassifier(a) => commands::train_classifier_cmd(settings, a),
        Command::CacheProbs(a) => commands::cache_probs(settings, a),
        Command::Train(a) => commands::train_cmd(settings, a),
        Command::Eval(a) => commands::eval_cmd(settings, a),
        Command::Counterfactual(a) => commands::counterfactual_cmd(settings, a),
        Command::Serve(a) => commands::serve_cmd(settings, a),
    }?;
    log::info!("run directory: {}", run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on unknown flags and prints usage
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vaex: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
