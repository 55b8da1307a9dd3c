use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use twostage::cli::{run, Cli};
use twostage::ErrorClass;

fn fail(class: ErrorClass, msg: &str) -> ExitCode {
    let line = msg.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ");
    eprintln!("{}: {line}", class.code());
    ExitCode::from(class.exit_status() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(ErrorClass::Config, &e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.class(), &e.to_string()),
    }
}
