//! Command-line pipeline over the `varnorm` library: generate synthetic
//! features, train, export embeddings, evaluate retrieval and run the
//! component ablation grid.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};

pub use config::RunConfig;
pub use error::CliError;

use config::KEYS;

pub fn command() -> Command {
    let mut cmd = Command::new("varnorm")
        .about("Variation-normalized autoencoder over frozen re-identification features")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .global(true)
                .help("config file of `key = value` lines; flags override it"),
        );
    for key in KEYS {
        cmd = cmd.arg(
            Arg::new(key.name)
                .long(key.flag())
                .value_name("VALUE")
                .global(true)
                .help(format!("{} [default: {}]", key.help, key.default_value())),
        );
    }
    cmd.subcommands([
        Command::new("synth")
            .about("write synthetic train/query/gallery features and their ground truth"),
        Command::new("train")
            .about("train on the training features, writing checkpoints and a run log"),
        Command::new("embed").about("export encoder means and standard deviations of one split"),
        Command::new("eval").about("score query against gallery and write the metrics file"),
        Command::new("ablate").about("train and score every row of the component ablation grid"),
    ])
}

/// Builds the configuration from defaults, the config file and the flags.
pub fn resolve_config(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        config.apply_file(&PathBuf::from(path))?;
    }
    for key in KEYS {
        if matches.value_source(key.name) == Some(ValueSource::CommandLine) {
            let value = matches
                .get_one::<String>(key.name)
                .expect("flag value present");
            config.set(key.name, value)?;
        }
    }
    Ok(config)
}

/// Parses `args` and runs the selected command, writing reports to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            write!(out, "{}", e.render())?;
            return Ok(());
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            return Err(CliError::Usage(
                format!("{}", e.render()).trim_end().to_string(),
            ));
        }
        Err(e) => {
            let text = e.render().to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(
                line.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let config = resolve_config(sub)?;
    match name {
        "synth" => commands::synth(&config, out),
        "train" => commands::train(&config, out).map(drop),
        "embed" => commands::embed(&config, out).map(drop),
        "eval" => commands::eval(&config, out).map(drop),
        "ablate" => commands::ablate(&config, out).map(drop),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}
