//! `gridkal` command-line front end: file-driven, reproducible runs of the
//! simulation / reduction / estimation / benchmark pipeline.
//!
//! Exit codes: 0 success, 1 validation or numerical failure, 2 usage error.
//! Every run writes a `run.json` echo of the fully resolved configuration
//! into the output directory before doing any numerical work.

use clap::{Args, Parser, Subcommand};
use gridkal::bench::{
    diamond_scenario, emit_report, emit_trajectory, reduction_sweep, run_estimate, run_scenario,
    write_basis_cache, FilterKind, Report, Scenario, REPORT_SCHEMA_VERSION,
};
use gridkal::network::{parse_network, validate_network, PipeNetwork};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gridkal", version, about = "Transient gas network simulation, model reduction, and Kalman filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Pipe network JSON file.
    #[arg(long)]
    network: PathBuf,
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the reduced order.
    #[arg(long)]
    order: Option<usize>,
    /// Worker thread count (accepted and recorded; the numerical kernels are
    /// currently single-threaded). Falls back to GRIDKAL_THREADS, then 1.
    #[arg(long)]
    threads: Option<usize>,
}

impl CommonArgs {
    fn resolved_threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var("GRIDKAL_THREADS").ok().and_then(|v| v.parse().ok()))
            .unwrap_or(1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the nonlinear truth model and write the trajectory CSV.
    Simulate(CommonArgs),
    /// Build a reduction basis and write the basis cache.
    Reduce(CommonArgs),
    /// Run one filter and write its estimate trajectory and report row.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Which filter to run.
        #[arg(long, value_parser = parse_filter)]
        filter: FilterKind,
    },
    /// Run the full benchmark protocol: truth, measurements, all requested
    /// filters, error metrics, reduction curve.
    Benchmark {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to a comma-separated filter subset.
        #[arg(long, value_delimiter = ',', value_parser = parse_filter)]
        filters: Option<Vec<FilterKind>>,
        /// Reduced orders for the reduction-error curve.
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
    },
    /// Check a network file and print its diagnostics.
    Validate {
        /// Pipe network JSON file.
        #[arg(long)]
        network: PathBuf,
    },
}

fn parse_filter(s: &str) -> Result<FilterKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "kf" => Ok(FilterKind::Kf),
        "rkf" => Ok(FilterKind::Rkf),
        "cskf" => Ok(FilterKind::Cskf),
        "enkf" => Ok(FilterKind::Enkf),
        "renkf" => Ok(FilterKind::Renkf),
        other => Err(format!("unknown filter '{other}' (expected kf|rkf|cskf|enkf|renkf)")),
    }
}

fn load_network(path: &Path) -> anyhow::Result<PipeNetwork> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("network file '{}': {e}", path.display()))?;
    let net = parse_network(&text)
        .map_err(|e| anyhow::anyhow!("network file '{}': {e}", path.display()))?;
    let diags = validate_network(&net);
    if !diags.is_empty() {
        anyhow::bail!(
            "network '{}' failed validation:\n{}",
            path.display(),
            diags.iter().map(|d| format!("  {d:?}")).collect::<Vec<_>>().join("\n")
        );
    }
    Ok(net)
}

fn load_scenario(path: &Path, common: &CommonArgs) -> anyhow::Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("scenario file '{}': {e}", path.display()))?;
    let mut sc = if text.trim() == "diamond" {
        diamond_scenario()
    } else {
        Scenario::from_json(&text)
            .map_err(|e| anyhow::anyhow!("scenario file '{}': {e}", path.display()))?
    };
    if let Some(seed) = common.seed {
        sc.seed = seed;
    }
    if let Some(order) = common.order {
        if let Some(mor) = &mut sc.mor {
            mor.order = Some(order);
        } else {
            anyhow::bail!("--order given but the scenario has no mor config");
        }
    }
    Ok(sc)
}

/// Write the fully resolved configuration echo before any numerical work.
fn write_run_echo(
    common: &CommonArgs,
    subcommand: &str,
    sc: Option<&Scenario>,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(&common.out)?;
    let echo = serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "subcommand": subcommand,
        "network": common.network.display().to_string(),
        "scenario_path": common.scenario.display().to_string(),
        "out": common.out.display().to_string(),
        "threads": common.resolved_threads(),
        "scenario": sc,
    });
    std::fs::write(common.out.join("run.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(())
}

fn cmd_simulate(common: &CommonArgs) -> anyhow::Result<()> {
    let net = load_network(&common.network)?;
    let sc = load_scenario(&common.scenario, common)?;
    write_run_echo(common, "simulate", Some(&sc))?;
    let mesh = sc.mesh.to_spec()?;
    let tau = sc.time.tau();
    let stat = gridkal::discretization::stationary_solve(&net, &sc.initial_boundary_pressures(), 1e-12)?;
    let traj = gridkal::simulation::simulate_nonlinear(
        &net, &mesh, &sc.signals, &stat, tau, sc.time.theta, sc.time.steps, sc.seed,
    )?;
    emit_trajectory(&common.out.join("trajectory.csv"), &traj.times, &traj.states)?;
    println!("simulated {} steps, trajectory.csv written", traj.steps());
    Ok(())
}

fn cmd_reduce(common: &CommonArgs) -> anyhow::Result<()> {
    let net = load_network(&common.network)?;
    let sc = load_scenario(&common.scenario, common)?;
    write_run_echo(common, "reduce", Some(&sc))?;
    let files = write_basis_cache(&net, &sc, &common.out)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_estimate(common: &CommonArgs, filter: FilterKind) -> anyhow::Result<()> {
    let net = load_network(&common.network)?;
    let sc = load_scenario(&common.scenario, common)?;
    write_run_echo(common, "estimate", Some(&sc))?;
    let (row, times, states) = run_estimate(&net, &sc, filter)?;
    emit_trajectory(&common.out.join("estimate.csv"), &times, &states)?;
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: sc.seed,
        realizations: 1,
        rows: vec![row.clone()],
        mor_curve: Vec::new(),
        environment: gridkal::bench::EnvMeta {
            threads: common.resolved_threads(),
            build: format!("gridkal-cli {}", env!("CARGO_PKG_VERSION")),
        },
        warnings: Vec::new(),
    };
    emit_report(&report, &common.out)?;
    println!(
        "{}: error {:.3e}, offline {:.3}s, online {:.3}s, postproc {:.3}s",
        row.filter.name(),
        row.error,
        row.offline_s,
        row.online_s,
        row.postproc_s
    );
    Ok(())
}

fn cmd_benchmark(
    common: &CommonArgs,
    filters: Option<Vec<FilterKind>>,
    orders: Option<Vec<usize>>,
) -> anyhow::Result<()> {
    let net = load_network(&common.network)?;
    let mut sc = load_scenario(&common.scenario, common)?;
    if let Some(f) = filters {
        sc.filters = f;
    }
    write_run_echo(common, "benchmark", Some(&sc))?;
    let mut report = run_scenario(&net, &sc)?;
    if let Some(orders) = orders {
        report.mor_curve = reduction_sweep(&net, &sc, &orders)?;
    }
    report.environment.threads = common.resolved_threads();
    for f in emit_report(&report, &common.out)? {
        println!("wrote {}", f.display());
    }
    for row in &report.rows {
        println!(
            "{}: error {:.3e}, offline {:.3}s, online {:.3}s, postproc {:.3}s",
            row.filter.name(),
            row.error,
            row.offline_s,
            row.online_s,
            row.postproc_s
        );
    }
    Ok(())
}

fn cmd_validate(network: &Path) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(network)
        .map_err(|e| anyhow::anyhow!("network file '{}': {e}", network.display()))?;
    let net = parse_network(&text)
        .map_err(|e| anyhow::anyhow!("network file '{}': {e}", network.display()))?;
    let diags = validate_network(&net);
    println!("{} diagnostics", diags.len());
    for d in &diags {
        println!("  {d:?}");
    }
    Ok(diags.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(common) => cmd_simulate(common),
        Command::Reduce(common) => cmd_reduce(common),
        Command::Estimate { common, filter } => cmd_estimate(common, *filter),
        Command::Benchmark { common, filters, orders } => {
            cmd_benchmark(common, filters.clone(), orders.clone())
        }
        Command::Validate { network } => match cmd_validate(network) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
