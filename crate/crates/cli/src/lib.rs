//! The `hypolift` command line pipeline.
//!
//! Every subcommand reads a [`RunConfig`], optionally from a TOML file,
//! with each key overridable by a flag of the same name. Failures print one
//! line `hypolift: error[<kind>]: <message>` to stderr.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;

use clap::{Arg, ArgAction, ArgMatches, Command};

pub use config::RunConfig;

/// Bad invocation: unknown key, unparsable value, invalid argument.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const SUBCOMMANDS: [(&str, &str); 6] = [
    ("gen-data", "Generate the synthetic train and test datasets"),
    ("train", "Train the model; writes a checkpoint and a loss curve"),
    ("sample", "Draw hypotheses for every test record"),
    ("eval", "Score hypotheses; writes a JSON report and CSV tables"),
    ("plot", "Render CSV columns as an SVG line plot"),
    ("config", "Print the effective configuration as TOML"),
];

fn command() -> Command {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("run config serializes");
    let mut root = Command::new("hypolift")
        .about("Multi-hypothesis 3D pose lifting from 2D heatmaps with a diffusion model")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .help(format!("Config file; defaults to ${}", config::CONFIG_ENV)),
        );
        for key in RunConfig::keys() {
            let default = &defaults[key.as_str()];
            let mut arg = Arg::new(key.clone())
                .long(key.replace('_', "-"))
                .help(format!("default: {default}"))
                .action(ArgAction::Set);
            if default.is_bool() {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

/// Config file from `--config` or the environment, then flag overrides.
pub fn resolve_config(m: &ArgMatches) -> anyhow::Result<RunConfig> {
    let path = m
        .get_one::<String>("config")
        .cloned()
        .or_else(|| std::env::var(config::CONFIG_ENV).ok().filter(|s| !s.is_empty()));
    let mut cfg = match path {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    for key in RunConfig::keys() {
        if let Some(raw) = m.get_one::<String>(&key) {
            cfg.set(&key, raw)?;
        }
    }
    Ok(cfg)
}

/// Runs one invocation and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            report("usage", first.trim_start_matches("error: "));
            return 2;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve_config(sub).and_then(|cfg| match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "sample" => commands::sample(&cfg),
        "eval" => commands::eval(&cfg),
        "plot" => commands::plot(&cfg),
        "config" => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        _ => unreachable!("unknown subcommands rejected by the parser"),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let kind = error_kind(&e);
            report(kind, &format!("{e:#}"));
            if kind == "usage" {
                2
            } else {
                1
            }
        }
    }
}

fn report(kind: &str, message: &str) {
    let one_line = message.replace('\n', "; ");
    eprintln!("hypolift: error[{kind}]: {one_line}");
}

/// Error class used in the printed prefix.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    use hypolift_core::Error as E;
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<plot::CsvError>().is_some() {
            return "data";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Io { .. } => "io",
                E::Config(_) => "config",
                E::Diverged { .. } => "diverged",
                E::Format { .. } | E::Version { .. } | E::Json(_) => "data",
                _ => "model",
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "config";
        }
    }
    "internal"
}
