//! `vsprefill` command-line front end.

mod commands;
mod config;

use std::io::Write;
use std::process::ExitCode;

use clap::Command;

use crate::config::{add_flags, Config};

type Handler = fn(&Config) -> vsprefill_core::Result<String>;

const SUBCOMMANDS: &[(&str, &str, Handler)] = &[
    ("gen", "write planted synthetic samples", commands::cmd_gen),
    ("aggregate", "compute vertical and slash scores from Q, K", commands::cmd_aggregate),
    ("train", "fit the indexer on a dataset and save a checkpoint", commands::cmd_train),
    ("select", "turn scores into a vertical/slash index file", commands::cmd_select),
    ("attend", "run sparse attention under an index file", commands::cmd_attend),
    ("recall", "attention mass covered by an index file", commands::cmd_recall),
    ("theory", "closed-form slash profile against Monte Carlo", commands::cmd_theory),
    ("bench", "ablation tables on the synthetic suite", commands::cmd_bench),
];

fn cli() -> Command {
    SUBCOMMANDS.iter().fold(
        Command::new("vsprefill")
            .about("Vertical-slash sparse prefill toolkit")
            .subcommand_required(true)
            .arg_required_else_help(true),
        |cmd, (name, about, _)| cmd.subcommand(add_flags(Command::new(*name).about(*about))),
    )
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let handler = SUBCOMMANDS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, _, h)| *h)
        .expect("registered subcommand");
    match Config::resolve(sub).and_then(|cfg| handler(&cfg)) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.as_bytes());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vsprefill {name}: {e}");
            ExitCode::FAILURE
        }
    }
}
