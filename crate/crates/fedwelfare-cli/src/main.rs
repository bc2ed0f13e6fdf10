use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedwelfare::harness::experiment::{self, regenerate_report};
use fedwelfare::harness::svg::{bar_chart, line_chart};
use fedwelfare::harness::{presets, run_experiment, run_sweep, ScenarioConfig, SimError};
use fedwelfare::harness::{PreparedScenario, run_replication};

#[derive(Parser)]
#[command(
    name = "fedwelfare",
    about = "Cross-silo federated learning simulator with client selection and money transfers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replication of a scenario and write CSV ledgers plus a report.
    Run(RunArgs),
    /// Run the scenario once per mu value and write per-mu reports plus sweep.json.
    Sweep(SweepArgs),
    /// Print the worked two-round example ledger and the decision for a given mu.
    ToyExample(ToyArgs),
    /// Rebuild report.json from the CSVs in a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON path, or a preset name (heterogeneous, homogeneous-large,
    /// homogeneous-small, label-noise, toy-example).
    #[arg(long)]
    config: String,
    /// Output directory; defaults to the scenario's run.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override run.replications.
    #[arg(long)]
    reps: Option<u32>,
    /// Override mechanism.mu.
    #[arg(long)]
    mu: Option<f64>,
    /// Override run.base_seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: String,
    /// Comma-separated mu values, e.g. --mu 0,0.05,0.1,0.2
    #[arg(long, value_delimiter = ',', required = true)]
    mu: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ToyArgs {
    /// Trade-off weight for the selection decision.
    #[arg(long, default_value_t = 0.01)]
    mu: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding run.json and the CSVs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Also write SVG charts under <in>/charts/.
    #[arg(long)]
    svg: bool,
}

fn load_config(source: &str) -> Result<ScenarioConfig, SimError> {
    let path = Path::new(source);
    if path.exists() {
        ScenarioConfig::from_path(path)
    } else if presets::NAMES.contains(&source) {
        presets::load(source)
    } else {
        Err(SimError::Config(format!(
            "'{source}' is neither a file nor a preset ({})",
            presets::NAMES.join(", ")
        )))
    }
}

fn apply_overrides(
    cfg: &mut ScenarioConfig,
    reps: Option<u32>,
    mu: Option<f64>,
    seed: Option<u64>,
) {
    if let Some(reps) = reps {
        cfg.run.replications = reps;
    }
    if let Some(mu) = mu {
        cfg.mechanism.mu = mu;
    }
    if let Some(seed) = seed {
        cfg.run.base_seed = seed;
    }
}

fn cmd_run(args: RunArgs) -> Result<(), SimError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.reps, args.mu, args.seed);
    cfg.validate()?;
    let out = args.out.unwrap_or_else(|| cfg.run.output_dir.clone());
    let report = run_experiment(&cfg, &out)?;
    println!(
        "{}: {} of {} replications succeeded, mu = {}",
        report.name, report.successes, report.replications, report.mu
    );
    for client in &report.clients {
        println!(
            "  client {}: mean elimination round {:.2} (sd {:.2}), eliminated in {:.0}% of runs",
            client.id,
            client.mean_elimination_round,
            client.sd_elimination_round,
            100.0 * client.eliminated_fraction
        );
    }
    if let Some(last) = report.rounds.last() {
        println!(
            "  final TSW {:.4} (sd {:.4}), final TSFI {}",
            last.tsw_mean,
            last.tsw_sd,
            last.tsfi_mean.map_or("undefined".to_string(), |v| format!("{v:.4}")),
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), SimError> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.reps, None, args.seed);
    cfg.validate()?;
    let sweep = run_sweep(&cfg, &args.mu, &args.out)?;
    println!("{}: swept mu over {:?}", sweep.name, sweep.mus);
    for report in &sweep.runs {
        let mean: Vec<String> = report
            .clients
            .iter()
            .map(|c| format!("{:.2}", c.mean_elimination_round))
            .collect();
        println!("  mu {}: mean elimination rounds [{}]", report.mu, mean.join(", "));
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn cmd_toy(args: ToyArgs) -> Result<(), SimError> {
    let mut cfg = presets::load("toy-example")?;
    cfg.mechanism.mu = args.mu;
    let prepared = PreparedScenario::prepare(cfg)?;
    let result = run_replication(&prepared, 0)?;
    println!("worked example at mu = {}", args.mu);
    println!("round client utility   cost     u-c       q    payoff       mt active");
    for (round_idx, records) in result.rounds.iter().enumerate() {
        for r in records {
            println!(
                "{:>5} {:>6} {:>7.3} {:>6.3} {:>7.3} {:>5.2} {:>9.4} {:>8.4} {:>6}",
                round_idx + 1,
                r.client,
                r.utility,
                r.cost,
                r.profit,
                r.q,
                r.payoff,
                r.mt,
                r.active
            );
        }
    }
    for trace in &result.selection {
        let eliminated: Vec<String> =
            trace.eliminated.iter().map(|c| format!("C{c}")).collect();
        println!(
            "round {}: evaluated {} candidate sets, eliminated [{}], objective {:.6}",
            trace.round,
            trace.candidates_considered,
            eliminated.join(", "),
            trace.objective_value
        );
    }
    let tsw = result.metrics.tsw.last().unwrap();
    let tsfi = result.metrics.tsfi.last().unwrap();
    println!(
        "TSW = {tsw:.4}, TSFI = {}",
        tsfi.map_or("undefined".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), SimError> {
    let report = regenerate_report(&args.input)?;
    println!(
        "rebuilt {} for '{}' ({} replications)",
        experiment::REPORT_FILE, report.name, report.successes
    );
    if args.svg {
        let charts = args.input.join("charts");
        fs::create_dir_all(&charts)?;
        let tsw_series = vec![(
            format!("mu={}", report.mu),
            report.rounds.iter().map(|r| r.tsw_mean).collect::<Vec<_>>(),
        )];
        fs::write(charts.join("tsw.svg"), line_chart("Total social welfare", "TSW", &tsw_series))?;
        let tsfi_series = vec![(
            format!("mu={}", report.mu),
            report.rounds.iter().map(|r| r.tsfi_mean.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
        )];
        fs::write(
            charts.join("tsfi.svg"),
            line_chart("Total selection fairness index", "TSFI", &tsfi_series),
        )?;
        let bars: Vec<(String, f64)> = report
            .clients
            .iter()
            .map(|c| (c.id.to_string(), c.mean_elimination_round))
            .collect();
        fs::write(
            charts.join("elimination.svg"),
            bar_chart("Mean elimination round", "round", &bars),
        )?;
        println!("charts in {}", charts.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::ToyExample(args) => cmd_toy(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
