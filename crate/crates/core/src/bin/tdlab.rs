use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tdlab::env::TraceWriter;
use tdlab::harness::{self, resolve_output, AxisValues, RunConfig, SweepAxis, SweepMetrics};
use tdlab::selftest::{run_selftest, DEFAULT_SEEDS};

/// Decomposed temporal-difference learning for slate recommendation.
#[derive(Parser)]
#[command(name = "tdlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent; writes the CSV log and a checkpoint.
    Train { config: PathBuf },
    /// Run a grid of configurations over several seeds.
    ///
    /// Without --axis the grid comes from the config's [sweep] table.
    Sweep {
        config: PathBuf,
        /// Axis name (sigma, epsilon, lr_v, lr_q, beta_ablation, backbone, td_mode); repeat for a grid.
        #[arg(long = "axis")]
        axes: Vec<SweepAxis>,
        /// Comma-separated values, one list per --axis.
        #[arg(long = "values")]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        checkpoint: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write every evaluation step to this CSV trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Gradient, stop-gradient, oracle and bound checks.
    Selftest {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
    },
}

fn print_metrics(m: &SweepMetrics) {
    for (name, v) in SweepMetrics::COLUMNS.iter().zip(m.values()) {
        println!("{name:<22} {v}");
    }
}

fn run(cli: Cli) -> tdlab::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = harness::run_training(&cfg)?;
            println!("wrote {}", out.csv_path.display());
            print_metrics(&out.final_metrics);
            if out.diverged {
                eprintln!("run diverged after {} skipped batches", out.divergences);
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep { config, axes, values, seeds } => {
            if axes.len() != values.len() {
                return Err(tdlab::Error::Config("give one --values list per --axis".into()));
            }
            let cfg = RunConfig::load(&config)?;
            let stored = cfg.sweep.clone();
            let grid: Vec<AxisValues> = if axes.is_empty() {
                stored.as_ref().map(|s| s.axes.clone()).unwrap_or_default()
            } else {
                axes.into_iter()
                    .zip(&values)
                    .map(|(axis, v)| AxisValues { axis, values: v.split(',').map(|s| s.trim().to_string()).collect() })
                    .collect()
            };
            let seeds = if seeds.is_empty() { stored.map(|s| s.seeds).unwrap_or_default() } else { seeds };
            let res = harness::run_sweep(&cfg, &grid, &seeds)?;
            println!("wrote {}", res.csv_path.display());
            let failed: usize = res.cells.iter().flat_map(|c| &c.runs).filter(|r| r.final_metrics.is_none()).count();
            for cell in &res.cells {
                let label: Vec<String> = cell.assignment.iter().map(|(a, v)| format!("{a}={v}")).collect();
                println!("{:<40} median reward {:.4}", label.join(" "), cell.median(|m| m.mean_reward));
            }
            if failed > 0 {
                eprintln!("{failed} runs diverged or failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval { checkpoint, config, episodes, seed, trace } => {
            let cfg = RunConfig::load(&config)?;
            let mut agent = harness::load_agent(&cfg, &fs::read_to_string(&checkpoint)?)?;
            let m = match trace {
                Some(path) => {
                    let path = resolve_output(&path);
                    let mut w = TraceWriter::new(fs::File::create(&path)?)?;
                    let m = harness::evaluate_traced(&mut agent, &cfg.env, episodes, seed, Some(&mut w))?;
                    println!("wrote {}", path.display());
                    m
                }
                None => harness::evaluate(&mut agent, &cfg.env, episodes, seed)?,
            };
            print_metrics(&m);
        }
        Command::Selftest { seeds } => {
            let rep = run_selftest(seeds);
            println!("{rep}");
            if !rep.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
