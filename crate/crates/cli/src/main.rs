use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tpr_cli::commands::*;
use tpr_cli::{exit_code, resolve};
use tpr_core::cpr::SpaceKind;
use tpr_synthlab::ReferenceMode;

#[derive(Parser)]
#[command(name = "tpr", version, about = "Temporal pyramid routing on synthetic video")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `protocol.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes model.tpr, metrics.jsonl and config.toml.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic training set (or the eval set) to a directory.
    Data {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        eval: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a trained run on a dataset.
    Eval {
        /// Run directory from `train`; omit with --oracle.
        #[arg(long, required_unless_present = "oracle")]
        run: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth as predictions.
        #[arg(long, conflicts_with = "run")]
        oracle: bool,
        #[arg(long, value_parser = parse_reference)]
        reference: Option<ReferenceMode>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Compare routing spaces on static cost and, unless --static-only, metrics.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', value_parser = parse_space, default_value = "cpr,full_routing,full_align,top_down")]
        spaces: Vec<SpaceKind>,
        #[arg(long)]
        static_only: bool,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-gate executed MACs and the min/avg/max per-frame cost.
    Flops {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_reference)]
        reference: Option<ReferenceMode>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Dump the gate maps of one frame as PGM images.
    Gates {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value_t = 1)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_reference(s: &str) -> Result<ReferenceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("expected refined, raw or self_pair, got `{s}`"))
}

fn parse_space(s: &str) -> Result<SpaceKind, String> {
    s.parse().map_err(|e: tpr_core::TprError| e.to_string())
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(p) = path {
        std::fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg_of = |a: &ConfigArgs| resolve(a.config.as_deref(), &a.overrides, a.seed);
    match cli.cmd {
        Cmd::Train { cfg, out } => {
            let cfg = cfg_of(&cfg)?;
            let s = cmd_train(&cfg, &out)?;
            println!(
                "trained {} steps ({} params): loss {:.4} -> {:.4}; wrote {}",
                s.steps,
                s.params,
                s.first_loss,
                s.last_loss,
                out.display()
            );
        }
        Cmd::Data { cfg, eval, out } => {
            let n = cmd_data(&cfg_of(&cfg)?, &out, eval)?;
            println!("wrote {n} clips to {}", out.display());
        }
        Cmd::Eval { run, data, oracle, reference, json } => {
            let r = cmd_eval(if oracle { None } else { run.as_deref() }, &data, reference)?;
            print!("{}", eval_table(&r));
            write_json(json.as_deref(), &r)?;
        }
        Cmd::Ablate { cfg, spaces, static_only, json } => {
            let rows = cmd_ablate(&cfg_of(&cfg)?, &spaces, static_only)?;
            print!("{}", ablate_table(&rows));
            write_json(json.as_deref(), &rows)?;
        }
        Cmd::Flops { run, data, reference, json } => {
            let t = cmd_flops(&run, &data, reference)?;
            print!("{}", flops_table(&t));
            write_json(json.as_deref(), &t)?;
        }
        Cmd::Gates { run, data, clip, frame, out } => {
            for p in cmd_gates(&run, &data, clip, frame, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
