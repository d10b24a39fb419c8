//! Command-line front end for the steadystate experiment pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use steadystate::config::{ExperimentConfig, OracleConfig};
use steadystate::experiment::{run_checks, run_experiment};

#[derive(Parser)]
#[command(
    name = "steadystate",
    about = "Decreasing-step simulation of ergodic SDE schemes with stability checks and stationary-law diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration.
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Replica count override.
    #[arg(long)]
    replicas: Option<u64>,
    /// Directory for artifacts (summary.json, functionals.csv,
    /// reservoir.csv, checks.json).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Also write trace.csv (columns n,Gamma_n,X_1..X_d,zeta) with every
    /// k-th step of replica 0; requires --out-dir.
    #[arg(long, value_name = "K")]
    trace_every: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: checks, simulation, oracle comparison, artifacts.
    Run(Common),
    /// Simulation and artifacts only (no oracle clauses, no bump
    /// diagnostics).
    Simulate(SimulateArgs),
    /// Schedule and stability checks only.
    Check(Common),
    /// Simulation plus occupation-residual diagnostics; prints the
    /// residual trace as CSV (n, f_id, nu_Af).
    Diagnose(Common),
    /// Print the configured oracle's moments as JSON; with --out-dir,
    /// write quadrature references as CSV (grid, density).
    Oracle(Common),
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::from_path(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    if let Some(replicas) = common.replicas {
        config.run.replicas = replicas;
    }
    config.validate()?;
    Ok(config)
}

fn print_clauses(summary: &steadystate::experiment::ExperimentSummary) {
    for clause in &summary.clauses {
        println!(
            "{}: {} (target {}, observed {}, tolerance {})",
            clause.name,
            if clause.pass { "pass" } else { "FAIL" },
            clause.target,
            clause.observed,
            clause.tolerance
        );
    }
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(common) => {
            let config = load(&common)?;
            let out = run_experiment(&config, common.out_dir.as_deref())?;
            print_clauses(&out.summary);
            println!(
                "{} steps x {} replicas, mass {}",
                out.summary.n_steps, out.summary.replicas, out.summary.mass
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            let mut config = load(&args.common)?;
            config.oracle = OracleConfig::None;
            config.ew_diagnostics = false;
            let out = run_experiment(&config, args.common.out_dir.as_deref())?;
            for (name, value) in &out.summary.functionals {
                println!("{name}: {value}");
            }
            if let Some(every) = args.trace_every {
                let dir = args
                    .common
                    .out_dir
                    .as_deref()
                    .ok_or_else(|| anyhow::anyhow!("--trace-every requires --out-dir"))?;
                let csv = steadystate::experiment::trace_csv(&config, every)?;
                std::fs::write(dir.join("trace.csv"), csv)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check(common) => {
            let config = load(&common)?;
            let checks = run_checks(&config)?;
            if let Some(dir) = &common.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&checks)?)?;
            }
            println!("{}", serde_json::to_string_pretty(&checks)?);
            if !checks.pass && config.checks.required {
                bail!("required assumption checks failed");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose(common) => {
            let mut config = load(&common)?;
            config.oracle = OracleConfig::None;
            config.ew_diagnostics = true;
            let out = run_experiment(&config, common.out_dir.as_deref())?;
            println!("n,f_id,nu_Af");
            for series in &out.summary.ew_residuals {
                for (n, v) in &series.series {
                    println!("{n},{},{v}", series.f_id);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle(common) => {
            let config = load(&common)?;
            let oracle = steadystate::experiment::build_oracle_for(&config)?
                .ok_or_else(|| anyhow::anyhow!("config has no oracle block"))?;
            let m1 = oracle.moment(0, 1)?;
            let m2 = oracle.moment(0, 2)?;
            let mut doc = serde_json::json!({"m1": m1, "m2": m2});
            if let Some(table) = oracle.moment_table() {
                doc["pi"] = serde_json::json!(table.pi);
                doc["second_per_regime"] = serde_json::json!(table.second_per_regime);
            }
            println!("{}", serde_json::to_string_pretty(&doc)?);
            if let Some(dir) = &common.out_dir {
                if let steadystate::oracles::StationaryReference::QuadratureDensity { grid, density, .. } = &oracle {
                    std::fs::create_dir_all(dir)?;
                    let mut csv = String::from("x,density\n");
                    for (x, p) in grid.iter().zip(density) {
                        csv.push_str(&format!("{x},{p}\n"));
                    }
                    std::fs::write(dir.join("oracle.csv"), csv)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
