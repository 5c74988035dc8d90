mod args;
mod commands;
mod error;

use clap::Parser;

use args::{Cli, Command};
use commands::CommandOutput;
use error::CliError;

const SCHEMA_VERSION: &str = "1";

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };

    if let Err(e) = configure_threads(&cli) {
        eprintln!("error: {e}");
        return e.exit_code();
    }

    let name = cli.command.name();
    match dispatch(&cli.command).and_then(|output| emit(&cli, name, output)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads(cli: &Cli) -> Result<(), CliError> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("STYLEVEC_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                CliError::Validation(format!("STYLEVEC_THREADS must be an integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    Ok(())
}

fn dispatch(command: &Command) -> Result<CommandOutput, CliError> {
    match command {
        Command::Diff(a) => commands::diff(a),
        Command::Apply(a) => commands::apply(a),
        Command::Scale(a) => commands::scale(a),
        Command::Merge(a) => commands::merge(a),
        Command::LoraExtract(a) => commands::lora_extract(a),
        Command::LoraApply(a) => commands::lora_apply(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Cosine(a) => commands::cosine(a),
        Command::Perturb(a) => commands::perturb_cmd(a),
        Command::Linearity(a) => commands::linearity(a),
        Command::GenFixture(a) => commands::gen_fixture(a),
    }
}

fn emit(cli: &Cli, command: &str, output: CommandOutput) -> Result<(), CliError> {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = if cli.json {
        let doc = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "result": output.json,
        });
        writeln!(out, "{doc}")
    } else if !cli.quiet {
        output
            .human
            .iter()
            .try_for_each(|line| writeln!(out, "{line}"))
    } else {
        Ok(())
    };
    match result {
        Ok(()) => Ok(()),
        // A closed pipe (e.g. piping into head) is not an error.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(CliError::Io(e.to_string())),
    }
}
