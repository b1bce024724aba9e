//! `sods`: run, sweep and validate SODS simulation scenarios.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sods_core::runner::{run_once, run_sweep, SweepAxis};
use sods_core::scenario::parse_scenario;
use sods_core::{Error, Scenario};

#[derive(Parser)]
#[command(name = "sods", version, about = "Energy-aware MANET streaming simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a scenario field, e.g. `--set cache.enabled=false`.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, short, env = "SODS_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Run the cartesian product of one or more `field=v1,v2,...` axes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "sweep", required = true, value_name = "FIELD=V1,V2")]
        axes: Vec<String>,
        /// Worker threads.
        #[arg(long, short, default_value_t = 1)]
        jobs: usize,
        #[arg(long, short, env = "SODS_OUT_DIR", default_value = "out")]
        out: PathBuf,
    },
    /// Check a scenario file and print the resolved configuration.
    Validate {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<Scenario, Error> {
    let mut s = match &common.config {
        Some(p) => parse_scenario(p)?,
        None => Scenario::default(),
    };
    for kv in &common.set {
        let (field, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("expected FIELD=VALUE, got {kv:?}")))?;
        s = s.with_field(field.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { common, out } => {
            let scenario = load(&common)?;
            let start = Instant::now();
            let result = run_once(&scenario, &out)?;
            let s = &result.summary;
            println!(
                "seed {} horizon {} s: {} generated, {} delivered, loss {:.4}, mean power {:.1} uW, E_ff {:.3}, energy {:.6} J ({:.2} s wall)",
                s.seed,
                s.horizon_s,
                s.packets.generated,
                s.packets.delivered,
                s.loss_rate,
                s.mean_power_uw,
                s.mean_eff_throughput,
                s.energy.consumed_total_j,
                start.elapsed().as_secs_f64()
            );
            println!("outputs in {}", display(&out));
        }
        Command::Sweep {
            common,
            axes,
            jobs,
            out,
        } => {
            let scenario = load(&common)?;
            let axes = axes
                .iter()
                .map(|a| a.parse::<SweepAxis>())
                .collect::<Result<Vec<_>, _>>()?;
            let results = run_sweep(&scenario, &axes, &out, jobs)?;
            for r in &results {
                let point: Vec<String> = r.assignments.iter().map(|(f, v)| format!("{f}={v}")).collect();
                println!(
                    "point {:03} [{}]: loss {:.4}, mean power {:.1} uW, E_ff {:.3}",
                    r.index,
                    point.join(" "),
                    r.summary.loss_rate,
                    r.summary.mean_power_uw,
                    r.summary.mean_eff_throughput
                );
            }
            println!("{} points, table in {}", results.len(), display(&out.join("sweep.csv")));
        }
        Command::Validate { common } => {
            let scenario = load(&common)?;
            print!("{}", scenario.to_toml_string());
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
