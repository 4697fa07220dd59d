use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = qd_cli::Cli::parse();
    let result = qd_cli::configure_threads().and_then(|()| qd_cli::run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
