mod args;
mod commands;
mod run;

use std::process::ExitCode;

use cavstat::{Error, Result};
use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use run::Metadata;

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn threads(cli: &Cli) -> Result<Option<usize>> {
    if let Some(t) = cli.threads {
        return Ok(Some(t));
    }
    match std::env::var("CAVSTAT_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CAVSTAT_THREADS is not a thread count: '{v}'"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = threads(cli)? {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let seed = match cli.seed {
        Some(s) => s,
        None if cli.strict => return Err(Error::Config("--strict requires --seed".into())),
        None => 0,
    };
    let meta = Metadata::new(cli, seed)?;
    let outputs = match &cli.command {
        Command::Cav(a) => commands::cmd_cav(a, meta),
        Command::Score(a) => commands::cmd_score(a, meta),
        Command::Predict(a) => commands::cmd_predict(a, meta),
        Command::Simulate(a) => commands::cmd_simulate(a, meta),
        Command::Classify(a) => commands::cmd_classify(a, meta),
    }?;
    for path in outputs.commit()? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match run::expand_spec(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            report_error("usage", e.render().to_string().trim());
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
