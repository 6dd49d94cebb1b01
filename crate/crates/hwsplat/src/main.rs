use std::process::ExitCode;

use clap::Parser;
use hwsplat::cli::{run, Cli, Failure};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            match &f {
                Failure::Input(msg) => eprintln!("error: {msg}"),
                Failure::Check(lines) => lines.iter().for_each(|l| eprintln!("{l}")),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
