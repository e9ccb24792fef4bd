use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use morphkv::harness::{
    self, compare, inspect, oracle_regression, regression_csv, regression_means, write_comparison, write_run_outputs,
    RunConfig,
};
use morphkv::Error;

#[derive(Parser, Debug)]
#[command(
    name = "morphkv",
    version,
    about = "Desk-scale KV-cache eviction runs, comparisons and oracle checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Override the model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `[outputs] dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check every cache and policy invariant after every step.
    #[arg(long)]
    debug_invariants: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one config and write steps.csv, trace.json and repetition.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Replay one token trace through several configs and tabulate bytes and error.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score policies against the exhaustive optimum on seeded tiny instances.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        /// Committed regression CSV the fresh run must reproduce exactly.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute the steps CSV and repetition report from a saved trace.
    Metrics {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 10)]
        ngram: usize,
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Dump cache snapshots after the given steps (default: the last step).
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        step: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn load(path: &Path, common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if common.debug_invariants {
        cfg.run.debug_invariants = true;
    }
    Ok(cfg)
}

fn out_dir(cfg: Option<&RunConfig>, common: &Common, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(RunConfig::output_dir))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            let trace = harness::run(&cfg)?;
            let dir = out_dir(Some(&cfg), &common, "out");
            for path in write_run_outputs(&cfg, &trace, &dir)? {
                println!("wrote {}", path.display());
            }
            let last = trace.steps.last().expect("traces hold at least the prefill step");
            println!(
                "{}: {} steps, final occupancy {:?}, {} bytes",
                cfg.label(),
                trace.steps.len() - 1,
                last.occupancy,
                last.bytes
            );
        }
        Command::Compare { config, common } => {
            let configs = config.iter().map(|p| load(p, &common)).collect::<Result<Vec<_>, _>>()?;
            let report = compare(&configs)?;
            let dir = out_dir(None, &common, "out/compare");
            for path in write_comparison(&report, &dir)? {
                println!("wrote {}", path.display());
            }
            print!("{}", report.summary_csv());
        }
        Command::Oracle {
            config,
            instances,
            baseline,
            common,
        } => {
            let cfg = load(&config, &common)?;
            let rows = oracle_regression(&cfg, instances)?;
            let csv = regression_csv(&rows);
            let path = out_dir(Some(&cfg), &common, "out/oracle").join("oracle_regression.csv");
            write_file(&path, &csv)?;
            println!("wrote {}", path.display());
            for (policy, mean) in regression_means(&rows) {
                println!("{policy}: mean error {mean:.6}");
            }
            if let Some(baseline) = baseline {
                let committed = fs::read_to_string(&baseline).map_err(|e| Error::Io {
                    path: baseline.clone(),
                    source: e,
                })?;
                if committed != csv {
                    return Err(Error::TraceMismatch(format!(
                        "regression output differs from {}",
                        baseline.display()
                    )));
                }
                println!("matches {}", baseline.display());
            }
        }
        Command::Metrics {
            trace,
            ngram,
            label,
            common,
        } => {
            let saved = harness::load_trace(&trace)?;
            if common.debug_invariants {
                saved.validate()?;
            }
            let label = label.unwrap_or_else(|| saved.policy.kind.name().to_string());
            let (csv, repetition) = harness::recompute_reports(&saved, &label, ngram)?;
            let dir = out_dir(None, &common, "out/metrics");
            write_file(&dir.join("steps.csv"), &csv)?;
            let json = harness::to_json(&repetition);
            write_file(&dir.join("repetition.json"), &json)?;
            println!("wrote {}", dir.display());
            println!("repetition rate (n={ngram}): {}", repetition.repetition_rate);
        }
        Command::Inspect { config, step, common } => {
            let cfg = load(&config, &common)?;
            let snapshots = inspect(&cfg, &step)?;
            let json = harness::to_json(&snapshots);
            match &common.out {
                Some(dir) => {
                    let path = dir.join("snapshots.json");
                    write_file(&path, &json)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{json}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invariant_violation() { 2 } else { 1 })
        }
    }
}
