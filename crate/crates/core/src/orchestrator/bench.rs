//! k/tau sweep harness.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use super::{stats_from_rounds, round_records, Orchestrator, RoundRecord, SessionStats};
use crate::config::ProtocolConfig;
use crate::retrieval::UserProfile;

pub const AGGREGATE_HEADER: &str =
    "k,tau,total_tokens,client_tokens,rounds,interventions,intervention_rate,mean_accept_frac,client_frac";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("no bench cases")]
    NoCases,
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct BenchCase {
    pub query: String,
    pub profile: UserProfile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub ks: Vec<usize>,
    pub taus: Vec<f64>,
}

impl SweepGrid {
    pub const STANDARD_TAUS: [f64; 6] = [0.0, 0.025, 0.05, 0.1, 0.2, 0.4];
    pub const STANDARD_KS: [usize; 6] = [0, 5, 10, 15, 20, 25];

    pub fn cells(&self) -> Vec<(usize, f64)> {
        self.ks
            .iter()
            .flat_map(|&k| self.taus.iter().map(move |&tau| (k, tau)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub k: usize,
    pub tau: f64,
    /// Per-query stats or the error that ended the session.
    pub per_query: Vec<Result<SessionStats, String>>,
    /// Aggregate over all queries; `Err` if any session in the cell failed.
    pub aggregate: Result<SessionStats, String>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<CellReport>,
    /// `(k, tau_lo, tau_hi)` pairs where the client share went down.
    pub monotonicity_violations: Vec<(usize, f64, f64)>,
}

impl SweepReport {
    pub fn all_failed(&self) -> bool {
        self.cells.iter().all(|c| c.aggregate.is_err())
    }

    pub fn write_aggregate_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{AGGREGATE_HEADER}")?;
        for cell in &self.cells {
            if let Ok(s) = &cell.aggregate {
                writeln!(w, "{}", stats_row(cell.k, cell.tau, s))?;
            }
        }
        Ok(())
    }

    pub fn write_per_query_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "query_index,{AGGREGATE_HEADER},error")?;
        for cell in &self.cells {
            for (i, r) in cell.per_query.iter().enumerate() {
                match r {
                    Ok(s) => writeln!(w, "{i},{},", stats_row(cell.k, cell.tau, s))?,
                    Err(e) => writeln!(w, "{i},{},{},,,,,,,,{}", cell.k, cell.tau, csv_escape(e))?,
                }
            }
        }
        Ok(())
    }
}

fn stats_row(k: usize, tau: f64, s: &SessionStats) -> String {
    format!(
        "{k},{tau},{},{},{},{},{:.6},{:.6},{:.6}",
        s.total_tokens,
        s.client_tokens,
        s.rounds,
        s.interventions,
        s.intervention_rate,
        s.mean_accepted_fraction_when_intervening,
        s.client_token_fraction
    )
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn run_cell(orch: &Orchestrator<'_>, cases: &[BenchCase], config: &ProtocolConfig) -> CellReport {
    let mut per_query = Vec::with_capacity(cases.len());
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut first_error = None;
    for (i, case) in cases.iter().enumerate() {
        let session_id = format!("bench-k{}-tau{}-q{i}", config.k, config.tau);
        let result = orch
            .run_session(&session_id, &case.query, &case.profile, config)
            .map_err(|e| e.to_string())
            .and_then(|out| {
                if out.termination.is_failure() {
                    return Err(format!("{:?}", out.termination));
                }
                let r = round_records(&out.transcript).map_err(|e| e.to_string())?;
                rounds.extend_from_slice(&r);
                Ok(out.stats)
            });
        if let Err(e) = &result {
            tracing::warn!(k = config.k, tau = config.tau, query = i, error = %e, "bench session failed");
            first_error.get_or_insert_with(|| e.clone());
        }
        per_query.push(result);
    }
    CellReport {
        k: config.k,
        tau: config.tau,
        per_query,
        aggregate: match first_error {
            Some(e) => Err(e),
            None => Ok(stats_from_rounds(&rounds)),
        },
    }
}

/// Runs every `(k, tau)` cell over all cases. Session failures are kept per
/// cell; the sweep always completes.
pub fn bench_sweep(
    orch: &Orchestrator<'_>,
    cases: &[BenchCase],
    base: &ProtocolConfig,
    grid: &SweepGrid,
    jobs: usize,
) -> Result<SweepReport, BenchError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(BenchError::EmptyGrid);
    }
    if cases.is_empty() {
        return Err(BenchError::NoCases);
    }
    let configs: Vec<ProtocolConfig> = cells
        .iter()
        .map(|&(k, tau)| ProtocolConfig { k, tau, ..*base })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let reports: Vec<CellReport> =
        pool.install(|| configs.par_iter().map(|c| run_cell(orch, cases, c)).collect());

    let mut violations = Vec::new();
    for &k in &grid.ks {
        let mut row: Vec<(f64, f64)> = reports
            .iter()
            .filter(|c| c.k == k)
            .filter_map(|c| c.aggregate.as_ref().ok().map(|s| (c.tau, s.client_token_fraction)))
            .collect();
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in row.windows(2) {
            if w[1].1 < w[0].1 {
                violations.push((k, w[0].0, w[1].0));
            }
        }
    }
    Ok(SweepReport {
        cells: reports,
        monotonicity_violations: violations,
    })
}
