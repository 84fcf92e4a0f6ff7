//! `icmlm`: one binary for every stage of the pipeline.

mod commands;
mod provenance;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command, CommandFactory, FromArgMatches};
use icmlm::trainer::TrainConfig;

use commands::{Cli, CliError};
use provenance::RunRecord;

/// Adds one `--key value` flag per training-config key.
fn with_config_flags(cmd: Command) -> Command {
    let defaults = toml::Value::try_from(TrainConfig::default()).expect("config serializes");
    let mut cmd = cmd;
    for key in TrainConfig::keys() {
        let long: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
        let id: &'static str = Box::leak(key.clone().into_boxed_str());
        let shown = match &defaults[key.as_str()] {
            toml::Value::Array(a) => a.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            toml::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        let mut arg = Arg::new(id).long(long).value_name("VALUE").action(ArgAction::Set).help(format!("[default: {shown}]"));
        if long != id {
            arg = arg.alias(id);
        }
        if key == "flavor" {
            arg = arg.alias("model-flavor").alias("model_flavor");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

/// Config keys given explicitly on the command line, in key order.
pub(crate) fn config_overrides(m: &ArgMatches) -> Vec<(String, String)> {
    TrainConfig::keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();

    let cmd = Cli::command().mut_subcommand("train", with_config_flags);
    let matches = match cmd.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let train_matches = matches.subcommand_matches("train");

    let mut record = RunRecord {
        command_line: argv.clone(),
        subcommand: cli.command.name().into(),
        seed: cli.command.seed(train_matches),
        git_describe: provenance::git_describe(),
        inputs: cli.command.inputs().iter().map(|p| (p.display().to_string(), provenance::checksum(p))).collect(),
        ..Default::default()
    };
    let run_json = cli.command.run_json();

    panic::set_hook(Box::new(|_| {}));
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| cli.command.run(train_matches)))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(CliError::internal(format!("internal error: {msg}")))
        });
    let code = match outcome {
        Ok(artifacts) => {
            record.artifacts = artifacts.iter().map(|p| (p.display().to_string(), provenance::checksum(p))).collect();
            record.status = "ok".into();
            0
        }
        Err(e) => {
            let line = e.msg.replace('\n', " ");
            eprintln!("error: {line}");
            record.status = "error".into();
            record.error = Some(line);
            e.code
        }
    };
    record.exit_code = code;
    if let Err(e) = provenance::write(&run_json, &record) {
        eprintln!("error: could not write {}: {e}", run_json.display());
        return ExitCode::from(if code == 0 { 1 } else { code as u8 });
    }
    ExitCode::from(code as u8)
}
