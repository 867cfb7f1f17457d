//! Command-line front end: config files, checkpoints, trainers and run
//! directories.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run_dir;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match cli::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match commands::execute(&cli) {
        Ok(dir) => {
            eprintln!("outputs in {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {}", error_text(&e));
            1
        }
    }
}

/// `{:#}`-style chain that skips causes already quoted by the outer message.
fn error_text(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}
