use std::path::PathBuf;
use std::process::ExitCode;

use aofp::harness::{apply_override, run_pipeline, Pipeline, RunConfig};
use clap::{Parser, ValueEnum};
use serde_json::{json, Value};

/// Train, prune and re-design CNN widths with approximated oracle filter pruning.
///
/// Any run-config field can be set with `--key value`, for example
/// `--target-flops-drop 0.4`, `--preset vgg16-cifar` or `--train.max_steps 800`.
/// `AOFP_OUTPUT_DIR` overrides the output directory.
#[derive(Parser, Debug)]
#[command(name = "aofp", version)]
struct Cli {
    command: Command,
    /// Run-config JSON file; overrides are applied on top of it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` pairs mirroring run-config fields.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Prune,
    PruneBaseline,
    Redesign,
    Flops,
    Eval,
}

impl From<Command> for Pipeline {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => Pipeline::Train,
            Command::Prune => Pipeline::Prune,
            Command::PruneBaseline => Pipeline::PruneBaseline,
            Command::Redesign => Pipeline::Redesign,
            Command::Flops => Pipeline::Flops,
            Command::Eval => Pipeline::Eval,
        }
    }
}

fn override_pairs(args: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").ok_or_else(|| format!("expected --key, found {arg:?}"))?;
        match key.split_once('=') {
            Some((k, v)) => pairs.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{key} needs a value"))?;
                pairs.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(pairs)
}

fn build_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut value = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let cfg = RunConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::to_value(cfg).map_err(|e| e.to_string())?
        }
        None => serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?,
    };
    value["pipeline"] = serde_json::to_value(Pipeline::from(cli.command)).map_err(|e| e.to_string())?;
    for (k, v) in override_pairs(&cli.overrides)? {
        apply_override(&mut value, &k, &v).map_err(|e| e.to_string())?;
    }
    if let Ok(dir) = std::env::var("AOFP_OUTPUT_DIR") {
        value["output_dir"] = Value::String(dir);
    }
    serde_json::from_value(value).map_err(|e| format!("invalid configuration: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("{}", json!({ "status": "error", "kind": "config", "message": message }));
            return ExitCode::from(2);
        }
    };
    match run_pipeline(&cfg) {
        Ok(summary) => {
            if matches!(cfg.pipeline, Pipeline::Flops) {
                println!("{}", summary["flops"]);
            } else {
                println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                json!({
                    "status": "error",
                    "kind": "pipeline",
                    "message": e.to_string(),
                    "output_dir": cfg.output_dir,
                })
            );
            ExitCode::FAILURE
        }
    }
}
