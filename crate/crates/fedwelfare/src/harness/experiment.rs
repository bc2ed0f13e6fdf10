//! Experiment execution: replications in parallel, merged CSV outputs, and
//! the aggregate report rebuilt from those files.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::config::ScenarioConfig;
use super::csvio::{
    parse_ledger_csv, parse_metrics_csv, parse_selection_csv, write_ledger_csv,
    write_metrics_csv, write_selection_csv, LedgerRow, MetricsRow, SelectionRow,
};
use super::replication::{run_replication, PreparedScenario, ReplicationResult};
use super::report::{
    build_report, AggregateReport, FailedReplication, RunManifest, SweepReport, MANIFEST_SCHEMA,
    SWEEP_SCHEMA,
};
use super::SimError;

/// Environment variable limiting worker parallelism; 0 or unset means auto.
pub const THREADS_ENV: &str = "FEDWELFARE_THREADS";

fn thread_pool() -> Result<Option<rayon::ThreadPool>, SimError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(None) };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| SimError::Config(format!("{THREADS_ENV} must be an integer, got '{raw}'")))?;
    if n == 0 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| SimError::Config(format!("{THREADS_ENV}: {e}")))
}

/// File names inside a run directory.
pub const LEDGER_FILE: &str = "ledger.csv";
pub const SELECTION_FILE: &str = "selection.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";

/// Runs every replication of the scenario (in parallel), writes merged CSV
/// ledgers plus a run manifest under `out_dir`, and returns the aggregate
/// report (also written as report.json). Failed replications are recorded
/// in the manifest; the aggregate covers the successes.
pub fn run_experiment(cfg: &ScenarioConfig, out_dir: &Path) -> Result<AggregateReport, SimError> {
    let prepared = PreparedScenario::prepare(cfg.clone())?;
    fs::create_dir_all(out_dir)?;

    let reps: Vec<u32> = (0..cfg.run.replications).collect();
    let run_all = || -> Vec<(u32, Result<ReplicationResult, SimError>)> {
        reps.par_iter().map(|&r| (r, run_replication(&prepared, r))).collect()
    };
    let results = match thread_pool()? {
        Some(pool) => pool.install(run_all),
        None => run_all(),
    };

    let mut failures = Vec::new();
    let mut succeeded = Vec::new();
    for (rep, result) in results {
        match result {
            Ok(r) => succeeded.push(r),
            Err(e) => failures.push(FailedReplication { replication: rep, error: e.to_string() }),
        }
    }
    succeeded.sort_by_key(|r| r.replication);

    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        name: cfg.name.clone(),
        mu: cfg.mechanism.mu,
        base_seed: cfg.run.base_seed,
        replications: cfg.run.replications,
        max_rounds: cfg.federation.max_rounds,
        tsfi_semantics: cfg.mechanism.tsfi_semantics,
        client_ids: cfg.clients.iter().map(|c| c.id).collect(),
        failures,
    };

    let (ledger, selection, metrics) = merged_rows(&succeeded, cfg.mechanism.mu);
    fs::write(out_dir.join(LEDGER_FILE), write_ledger_csv(&ledger))?;
    fs::write(out_dir.join(SELECTION_FILE), write_selection_csv(&selection))?;
    fs::write(out_dir.join(METRICS_FILE), write_metrics_csv(&metrics))?;
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest).map_err(|e| SimError::Report(e.to_string()))?,
    )?;

    // The report is built from the files just written, never from in-memory
    // state, so `report --in DIR` reproduces it bit for bit.
    regenerate_report(out_dir)
}

fn merged_rows(
    results: &[ReplicationResult],
    mu: f64,
) -> (Vec<LedgerRow>, Vec<SelectionRow>, Vec<MetricsRow>) {
    let mut ledger = Vec::new();
    let mut selection = Vec::new();
    let mut metrics = Vec::new();
    for result in results {
        for (round_idx, records) in result.rounds.iter().enumerate() {
            let round = round_idx as u32 + 1;
            for record in records {
                ledger.push(LedgerRow {
                    replication: result.replication,
                    round,
                    client: record.client,
                    utility: record.utility,
                    cost: record.cost,
                    profit: record.profit,
                    q: record.q,
                    payoff: record.payoff,
                    mt: record.mt,
                    active: record.active,
                });
            }
        }
        for trace in &result.selection {
            selection.push(SelectionRow {
                replication: result.replication,
                round: trace.round,
                candidates_considered: trace.candidates_considered,
                eliminated: trace.eliminated.clone(),
                objective_value: trace.objective_value,
                mu,
            });
        }
        for (round_idx, (&tsw, tsfi)) in
            result.metrics.tsw.iter().zip(&result.metrics.tsfi).enumerate()
        {
            metrics.push(MetricsRow {
                replication: result.replication,
                round: round_idx as u32 + 1,
                tsw,
                tsfi: *tsfi,
                semantics: result.metrics.semantics,
                mu,
            });
        }
    }
    (ledger, selection, metrics)
}

/// Parsed contents of a run directory.
pub struct RunDir {
    pub manifest: RunManifest,
    pub ledger: Vec<LedgerRow>,
    pub selection: Vec<SelectionRow>,
    pub metrics: Vec<MetricsRow>,
}

pub fn load_run_dir(dir: &Path) -> Result<RunDir, SimError> {
    let manifest_text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: RunManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| SimError::Report(format!("{MANIFEST_FILE}: {e}")))?;
    let ledger = parse_ledger_csv(&fs::read_to_string(dir.join(LEDGER_FILE))?)?;
    let selection = parse_selection_csv(&fs::read_to_string(dir.join(SELECTION_FILE))?)?;
    let metrics = parse_metrics_csv(&fs::read_to_string(dir.join(METRICS_FILE))?)?;
    Ok(RunDir { manifest, ledger, selection, metrics })
}

/// Rebuilds report.json from the CSVs in `dir` and returns it.
pub fn regenerate_report(dir: &Path) -> Result<AggregateReport, SimError> {
    let run = load_run_dir(dir)?;
    let report = build_report(&run.manifest, &run.ledger, &run.metrics);
    fs::write(
        dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report).map_err(|e| SimError::Report(e.to_string()))?,
    )?;
    Ok(report)
}

/// Runs the scenario once per mu value into `out_root/mu_<value>/` and
/// writes a combined sweep.json.
pub fn run_sweep(
    cfg: &ScenarioConfig,
    mus: &[f64],
    out_root: &Path,
) -> Result<SweepReport, SimError> {
    fs::create_dir_all(out_root)?;
    let mut runs = Vec::with_capacity(mus.len());
    for &mu in mus {
        let mut sub = cfg.clone();
        sub.mechanism.mu = mu;
        let dir = out_root.join(format!("mu_{mu}"));
        runs.push(run_experiment(&sub, &dir)?);
    }
    let sweep = SweepReport {
        schema: SWEEP_SCHEMA.to_string(),
        name: cfg.name.clone(),
        mus: mus.to_vec(),
        runs,
    };
    fs::write(
        out_root.join("sweep.json"),
        serde_json::to_string_pretty(&sweep).map_err(|e| SimError::Report(e.to_string()))?,
    )?;
    Ok(sweep)
}
