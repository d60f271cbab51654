use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpota::harness::{
    self, ExperimentConfig, default_sweep, parse_config, read_metrics, render_summary,
    run_experiment, summarize, summarize_by_snr, write_metrics,
};
use mpota::phy::{exhaustive_code_pairs, qam_superposition_demo};
use mpota::{Error, Result};

#[derive(Parser)]
#[command(name = "mpota", version, about = "Multi-precision over-the-air federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write metrics.csv.
    Run(RunArgs),
    /// Run a scheme sweep (the built-in scheme list unless `--scheme` is given).
    Sweep(RunArgs),
    /// Digital QAM versus analog superposition over every code pair.
    DemoEq3 {
        #[arg(long, default_value_t = 4)]
        bits_a: u32,
        #[arg(long, default_value_t = 8)]
        bits_b: u32,
    },
    /// Summarize a metrics CSV.
    Summarize {
        csv: PathBuf,
        /// One row per (scheme, snr) instead of per scheme.
        #[arg(long)]
        by_snr: bool,
        #[arg(long, default_value_t = 5)]
        conv_window: usize,
        #[arg(long, default_value_t = 0.95)]
        conv_fraction: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scheme list, e.g. "[16,4,4];[4,4,4]".
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    /// Comma-separated SNR list in dB; "inf" is noiseless.
    #[arg(long)]
    snr_db: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Run without rayon.
    #[arg(long)]
    sequential: bool,
    /// Any config key, repeatable: --set lr=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(args: &RunArgs, sweep: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let file_sets_schemes = args.config.is_some()
        && cfg.schemes != ExperimentConfig::default().schemes;
    if sweep && !file_sets_schemes {
        cfg.schemes = default_sweep();
    }
    cfg.apply_env();
    let mut pairs: Vec<(&str, String)> = Vec::new();
    if let Some(v) = &args.scheme {
        pairs.push(("schemes", v.clone()));
    }
    if let Some(v) = args.rounds {
        pairs.push(("rounds", v.to_string()));
    }
    if let Some(v) = args.seeds {
        pairs.push(("seeds", v.to_string()));
    }
    if let Some(v) = args.master_seed {
        pairs.push(("master_seed", v.to_string()));
    }
    if let Some(v) = &args.snr_db {
        pairs.push(("snr_db", v.clone()));
    }
    if let Some(v) = &args.output_dir {
        pairs.push(("output_dir", v.display().to_string()));
    }
    if let Some(v) = args.workers {
        pairs.push(("workers", v.to_string()));
    }
    if args.sequential {
        pairs.push(("parallel", "false".into()));
    }
    for (k, v) in pairs {
        cfg.set(k, &v)?;
    }
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, sweep: bool) -> Result<()> {
    let cfg = build_config(args, sweep)?;
    let table = run_experiment(&cfg)?;
    let path = cfg.metrics_path();
    write_metrics(&table, &path)?;
    println!("wrote {} rows to {}", table.rows.len(), path.display());
    let rows = if cfg.snr_db.len() > 1 {
        summarize_by_snr(&table, cfg.conv_window, cfg.conv_fraction)
    } else {
        summarize(&table, cfg.conv_window, cfg.conv_fraction)
    };
    print!("{}", render_summary(&rows));
    Ok(())
}

fn demo(bits_a: u32, bits_b: u32) -> Result<()> {
    let (a, b) = exhaustive_code_pairs(bits_a, bits_b)?;
    let report = qam_superposition_demo(&a, &b)?;
    println!("code pairs:                {}", a.len());
    println!("sum spec:                  {}", report.sum_spec);
    println!("digital mismatch_fraction: {:.6}", report.mismatch_fraction);
    println!("analog mismatch_fraction:  {:.6}", report.analog_mismatch_fraction);
    println!("zero code off origin:      {}", report.zero_off_origin);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Sweep(args) => run(args, true),
        Command::DemoEq3 { bits_a, bits_b } => demo(*bits_a, *bits_b),
        Command::Summarize {
            csv,
            by_snr,
            conv_window,
            conv_fraction,
        } => read_metrics(csv).map(|t| {
            let rows = if *by_snr {
                harness::summarize_by_snr(&t, *conv_window, *conv_fraction)
            } else {
                summarize(&t, *conv_window, *conv_fraction)
            };
            print!("{}", render_summary(&rows));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
