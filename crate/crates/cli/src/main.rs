//! `graphalign <stage> --config <path> [--key value ...]`

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use graphalign_core::pipeline::{run_stages, LoadedConfig, PipelineError, Stage};
use log::error;

const USAGE_ERROR: u8 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "graphalign",
    version,
    about = "Grapheme acoustic model training, decoding and alignment analysis",
    after_help = "Stages: synth, prep, train-gmm, align, train-am, realign, train-lm, decode, score, analyze, \
                  all (prep through score).\nAny config key can be overridden with --section.key value."
)]
struct Cli {
    /// Stage to run.
    stage: String,

    /// Pipeline config file (TOML).
    #[arg(long, short)]
    config: PathBuf,

    /// Upper bound on worker threads (0 = all cores). Overrides `workers` in the config.
    #[arg(long, short = 'j')]
    workers: Option<usize>,

    /// Config overrides as `--key value` or `--key=value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(format!("expected `--key value`, got {arg:?}"));
        };
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| format!("override --{key} has no value"))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn stages(name: &str) -> Option<Vec<Stage>> {
    if name == "all" {
        Some(Stage::CHAIN.to_vec())
    } else {
        Stage::parse(name).map(|s| vec![s])
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let Some(stages) = stages(&cli.stage) else {
        return Err(PipelineError::Config(format!("unknown stage {:?}", cli.stage)));
    };
    let mut overrides = parse_overrides(&cli.overrides).map_err(PipelineError::Config)?;
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    let loaded = LoadedConfig::load(&cli.config, &overrides)?;
    for outcome in run_stages(&loaded, &stages)? {
        println!("{}\t{}", outcome.stage, outcome.manifest.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
