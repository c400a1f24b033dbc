mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{value_parser, Arg, ArgMatches, Command};

use config::{flag_name, Kind, RunConfig, UsageError, REGISTRY};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("stats", "Print fact and vocabulary counts as JSON"),
    (
        "train",
        "Train one model per seed and stream metrics as JSON lines",
    ),
    ("eval", "Rank a split with a saved checkpoint"),
    (
        "predict",
        "Most likely objects for a (source, relation) query",
    ),
    ("centrality", "Centrality series of one entity as CSV"),
    ("backtest", "Walk-forward thematic portfolio backtest"),
];

fn value_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Int => "N",
        Kind::Float => "X",
        Kind::Bool => "BOOL",
        Kind::Text => "NAME",
        Kind::Path => "PATH",
        Kind::Date => "DATE",
        Kind::Seeds => "LIST",
        Kind::Choice(_) => "CHOICE",
    }
}

fn key_args() -> Vec<Arg> {
    REGISTRY
        .iter()
        .map(|k| {
            let help = match (k.default, k.help.contains("[default:")) {
                (_, true) => k.help.to_string(),
                (Some(d), false) => format!("{} [default: {d}]", k.help),
                (None, false) => format!("{} [default: none]", k.help),
            };
            Arg::new(k.name)
                .long(flag_name(k.name))
                .value_name(value_name(k.kind))
                .display_order(1)
                .help(help)
        })
        .collect()
}

fn cli() -> Command {
    Command::new("kgt")
        .about("Temporal knowledge-graph training, evaluation and analytics")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .display_order(0)
                .help("key = value settings file, overridden by flags"),
        )
        .arg(
            Arg::new("threads")
                .long("threads")
                .value_name("N")
                .value_parser(value_parser!(u64).range(1..))
                .global(true)
                .display_order(0)
                .help("worker threads [default: $TKG_THREADS, else logical cores]"),
        )
        .subcommands(
            SUBCOMMANDS
                .iter()
                .map(|&(name, about)| Command::new(name).about(about).args(key_args())),
        )
}

fn resolve(matches: &ArgMatches) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text, path)?;
    }
    for k in REGISTRY {
        if let Some(v) = matches.get_one::<String>(k.name) {
            cfg.set(k.name, v)?;
        }
    }
    Ok(cfg)
}

fn init_threads(matches: &ArgMatches) -> anyhow::Result<()> {
    let threads = match matches.get_one::<u64>("threads") {
        Some(&n) => Some(n as usize),
        None => match std::env::var("TKG_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| {
                        UsageError(format!(
                            "TKG_THREADS must be a positive integer, found '{v}'"
                        ))
                    })?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    Ok(())
}

fn run(matches: ArgMatches) -> anyhow::Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    init_threads(sub)?;
    let cfg = resolve(sub)?;
    match name {
        "stats" => commands::stats(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "predict" => commands::predict(&cfg),
        "centrality" => commands::centrality(&cfg),
        "backtest" => commands::backtest(&cfg),
        other => unreachable!("unregistered subcommand {other}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            eprintln!("{}", cli().render_usage());
            eprintln!("For more information, try 'kgt <command> --help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
