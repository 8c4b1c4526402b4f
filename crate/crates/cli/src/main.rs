use std::process::ExitCode;

use clap::Parser;

use cpflow::{execute, list_scenarios, resolve, Cli, CliError, Command, EXIT_CHECK_FAILED};

fn run(cli: Cli) -> Result<i32, CliError> {
    let (args, sweep) = match cli.command {
        Command::List => {
            print!("{}", list_scenarios());
            return Ok(0);
        }
        Command::Run(a) => (a, false),
        Command::Rates(a) => (a, true),
    };
    let (cfg, spec) = resolve(&args)?;
    let done = execute(&cfg, &spec, sweep)?;
    print!(
        "{}",
        cpflow::output::summary(&cfg, &format!("{}:seed={}", spec.hash_tag(), cfg.seed), &done.outcome)
    );
    if cfg.check && !done.outcome.passed() {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
