use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qbnn::harness::{self, Settings};
use qbnn::Error;

#[derive(Parser)]
#[command(name = "qbnn", version, about = "Quantized Bayesian neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress progress messages
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, run SVI and evaluate one configuration
    Train(Common),
    /// Re-evaluate a trained posterior checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default `<out>/<run_id>/ckpt_svi.bin`)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every (method, bits) combination and aggregate metrics
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods, e.g. `jq,vpq,spq`
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated bit-widths
        #[arg(long)]
        bits: Option<String>,
        /// Comma-separated seeds
        #[arg(long)]
        seeds: Option<String>,
        /// Concurrent runs (0 = all threads)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Relative error of uniform vs logarithmic quantization of σ
    FigLogquant(Common),
}

fn settings(common: &Common, extra: &[(&str, Option<String>)]) -> qbnn::Result<Settings> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    }
    Settings::load(common.config.as_deref(), &overrides)
}

fn out_dir(common: &Common, s: &Settings) -> PathBuf {
    common.out.clone().unwrap_or_else(|| s.run.out_dir.clone())
}

fn run(cli: Cli) -> qbnn::Result<()> {
    let loud = |m: &str| eprintln!("{m}");
    let silent = |_: &str| {};
    let pick = |quiet: bool| -> harness::Report {
        if quiet {
            &silent
        } else {
            &loud
        }
    };
    match cli.command {
        Command::Train(c) => {
            let s = settings(&c, &[])?;
            let out = harness::cmd_train(&s.run, &out_dir(&c, &s), pick(c.quiet))?;
            println!("{}", out.run_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let s = settings(&common, &[])?;
            let m = harness::cmd_eval(&s.run, checkpoint.as_deref(), &out_dir(&common, &s), pick(common.quiet))?;
            println!(
                "accuracy={} auroc_amnist={} auroc_fmnist={}",
                m.accuracy, m.auroc_amnist, m.auroc_fmnist
            );
        }
        Command::Sweep {
            common,
            methods,
            bits,
            seeds,
            jobs,
        } => {
            let s = settings(
                &common,
                &[
                    ("sweep.methods", methods),
                    ("sweep.bits", bits),
                    ("sweep.seeds", seeds),
                    ("sweep.jobs", jobs.map(|j| j.to_string())),
                ],
            )?;
            let out = out_dir(&common, &s);
            let rows = harness::cmd_sweep(&s, &out, pick(common.quiet))?;
            println!("{}", out.join("metrics.csv").display());
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} sweep runs failed", rows.len())));
            }
        }
        Command::FigLogquant(c) => {
            let s = settings(&c, &[])?;
            let (path, _) = harness::cmd_fig_logquant(&s.fig, &out_dir(&c, &s))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn report_error(e: &Error) {
    match e {
        Error::Config(list) => {
            eprintln!("error: invalid configuration ({} problems)", list.len());
            for m in list {
                eprintln!("  - {m}");
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
