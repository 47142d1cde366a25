use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use confss::eval::DecodeMode;
use confss_cli::{cmd_compare, cmd_eval, cmd_train, comparison_json, format_table, load_config, parse_overrides, Metric};

#[derive(Parser)]
#[command(name = "confss", version, about = "Confidence-aware scheduled sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decode {
    Greedy,
    Beam,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model: `confss train [CONFIG.json] [--resume STATE] [--a.b value ...]`.
    ///
    /// Dotted overrides address fields of the JSON config, e.g.
    /// `--schedule.mode teacher_forcing --train.phase2_steps 0`. Values are
    /// parsed as JSON when possible, otherwise taken as strings.
    Train {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "ARGS")]
        args: Vec<String>,
    },
    /// Decode a dataset with a checkpoint and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        decode: Decode,
        #[arg(long = "beam_size", alias = "beam-size", default_value_t = 4)]
        beam_size: usize,
        #[arg(long = "length_penalty", alias = "length-penalty", default_value_t = 0.6)]
        length_penalty: f64,
    },
    /// Tabulate final metrics and steps-to-threshold across metrics files.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = "val_seq_acc")]
        metric: String,
        /// Defaults to the first file's final value.
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { args } => {
            let mut rest = args.as_slice();
            let mut config = None;
            if let Some(first) = rest.first().filter(|a| !a.starts_with("--")) {
                config = Some(PathBuf::from(first));
                rest = &rest[1..];
            }
            let mut pairs = parse_overrides(rest)?;
            let resume = pairs.iter().position(|(k, _)| k == "resume").map(|i| PathBuf::from(pairs.remove(i).1));
            let cfg = load_config(config.as_deref(), &pairs)?;
            let out = cmd_train(&cfg, resume.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Eval {
            checkpoint,
            dataset,
            decode,
            beam_size,
            length_penalty,
        } => {
            let mode = match decode {
                Decode::Greedy => DecodeMode::Greedy,
                Decode::Beam => {
                    if beam_size == 0 {
                        bail!("--beam_size must be at least 1");
                    }
                    DecodeMode::Beam {
                        beam_size,
                        length_penalty,
                    }
                }
            };
            let report = cmd_eval(&checkpoint, &dataset, mode)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare {
            files,
            metric,
            threshold,
        } => {
            let c = cmd_compare(&files, Metric::parse(&metric)?, threshold)?;
            print!("{}", format_table(&c));
            println!("{}", comparison_json(&c));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
