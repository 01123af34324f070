//! Run artifacts: per-seed trace CSVs, region grids, and summary statistics.
//!
//! Every writer is deterministic: the same trace and configuration hash
//! produce the same bytes. Each file starts with a comment line carrying the
//! configuration hash and seed so results stay attributable after copying.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::learner::{unsafe_interventions_to_converge, ColTrace, LearnerError, SafeRegionEstimate};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no runs to aggregate")]
    Empty,
    #[error(transparent)]
    Learner(#[from] LearnerError),
}

fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!("# config={config_hash} seed={seed}\n")
}

/// Renders one run as CSV: a provenance comment, a header, and one row per
/// intervention with the point, cost, outcome, truth flag (blank when the
/// environment cannot answer), region fraction, region fingerprint, and
/// whether the point came from the empty-region fallback.
pub fn render_trace_csv(
    trace: &ColTrace,
    control_names: &[String],
    config_hash: &str,
    seed: u64,
) -> String {
    let mut out = provenance_line(config_hash, seed);
    out.push('t');
    for name in control_names {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",cost,spec_outcome,truth_safe,lambda,region_hash,fallback\n");
    for record in &trace.records {
        out.push_str(&record.step.to_string());
        for value in &record.point {
            out.push_str(&format!(",{value}"));
        }
        out.push_str(&format!(",{},{}", record.cost, record.spec_outcome));
        out.push(',');
        if let Some(truth) = record.truth_safe {
            out.push_str(if truth { "true" } else { "false" });
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            record.lambda, record.region_hash, record.fallback
        ));
    }
    out
}

/// Renders a region estimate as CSV: one row per grid point with the
/// posterior summary and certified membership.
pub fn render_region_csv(
    region: &SafeRegionEstimate,
    config_hash: &str,
    seed: u64,
) -> String {
    let mut out = provenance_line(config_hash, seed);
    let mut first = true;
    for name in region.grid.names() {
        if !first {
            out.push(',');
        }
        first = false;
        out.push_str(name);
    }
    out.push_str(",mean,variance,kappa,member\n");
    for i in 0..region.grid.len() {
        let point = region.grid.point(i);
        let mut first = true;
        for value in &point {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{value}"));
        }
        out.push_str(&format!(
            ",{},{},{},{}\n",
            region.means[i], region.variances[i], region.kappas[i], region.members[i]
        ));
    }
    out
}

/// Result of one seeded run. The unsafe counts and convergence fields are
/// present only when the environment supplied ground-truth flags for every
/// intervention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub config: String,
    pub seed: u64,
    pub lambda_initial: f64,
    pub lambda_final: f64,
    pub interventions: usize,
    pub fallback_count: usize,
    pub spent: f64,
    pub budget: f64,
    pub unsafe_total: Option<usize>,
    pub unsafe_to_converge: Option<usize>,
    pub converged: Option<bool>,
    pub convergence_step: Option<usize>,
}

impl SeedSummary {
    pub fn from_trace(
        trace: &ColTrace,
        config_hash: &str,
        seed: u64,
        epsilon: f64,
        patience: usize,
    ) -> Result<SeedSummary, ReportError> {
        let truth_known = trace.records.iter().all(|r| r.truth_safe.is_some());
        let (unsafe_total, unsafe_to_converge, converged, convergence_step) = if truth_known {
            let total = trace
                .records
                .iter()
                .filter(|r| r.truth_safe == Some(false))
                .count();
            let report = unsafe_interventions_to_converge(trace, epsilon, patience)?;
            (
                Some(total),
                Some(report.unsafe_count),
                Some(report.converged),
                report.convergence_step,
            )
        } else {
            (None, None, None, None)
        };
        Ok(SeedSummary {
            config: config_hash.to_string(),
            seed,
            lambda_initial: trace.initial_lambda,
            lambda_final: trace.final_lambda(),
            interventions: trace.records.len(),
            fallback_count: trace.records.iter().filter(|r| r.fallback).count(),
            spent: trace.spent,
            budget: trace.budget,
            unsafe_total,
            unsafe_to_converge,
            converged,
            convergence_step,
        })
    }
}

/// Cross-seed statistics: mean and sample standard deviation of the final
/// region fraction and the unsafe-intervention counts. Count statistics are
/// omitted when any run lacks ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSummary {
    pub config: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub lambda_mean: f64,
    pub lambda_std: f64,
    pub unsafe_to_converge_mean: Option<f64>,
    pub unsafe_to_converge_std: Option<f64>,
    pub unsafe_total_mean: Option<f64>,
    pub unsafe_total_std: Option<f64>,
    pub converged_runs: Option<usize>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(
    summaries: &[SeedSummary],
    config_hash: &str,
) -> Result<AggregateSummary, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::Empty);
    }
    let lambdas: Vec<f64> = summaries.iter().map(|s| s.lambda_final).collect();
    let (lambda_mean, lambda_std) = mean_std(&lambdas);
    let truth_known = summaries.iter().all(|s| s.unsafe_total.is_some());
    let (mut conv_mean, mut conv_std, mut total_mean, mut total_std, mut converged_runs) =
        (None, None, None, None, None);
    if truth_known {
        let conv: Vec<f64> = summaries
            .iter()
            .map(|s| s.unsafe_to_converge.unwrap() as f64)
            .collect();
        let total: Vec<f64> = summaries
            .iter()
            .map(|s| s.unsafe_total.unwrap() as f64)
            .collect();
        let (cm, cs) = mean_std(&conv);
        let (tm, ts) = mean_std(&total);
        conv_mean = Some(cm);
        conv_std = Some(cs);
        total_mean = Some(tm);
        total_std = Some(ts);
        converged_runs = Some(
            summaries
                .iter()
                .filter(|s| s.converged == Some(true))
                .count(),
        );
    }
    Ok(AggregateSummary {
        config: config_hash.to_string(),
        seeds: summaries.iter().map(|s| s.seed).collect(),
        runs: summaries.len(),
        lambda_mean,
        lambda_std,
        unsafe_to_converge_mean: conv_mean,
        unsafe_to_converge_std: conv_std,
        unsafe_total_mean: total_mean,
        unsafe_total_std: total_std,
        converged_runs,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Serializes a summary as pretty JSON with a trailing newline.
pub fn render_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    text
}

/// Writes the three per-seed artifacts (`trace_seed<N>.csv`,
/// `region_seed<N>.csv`, `summary_seed<N>.json`) into `dir` and returns the
/// summary for aggregation.
pub fn write_run_outputs(
    dir: &Path,
    trace: &ColTrace,
    control_names: &[String],
    config_hash: &str,
    seed: u64,
    epsilon: f64,
    patience: usize,
) -> Result<SeedSummary, ReportError> {
    let summary = SeedSummary::from_trace(trace, config_hash, seed, epsilon, patience)?;
    write_file(
        &dir.join(format!("trace_seed{seed}.csv")),
        &render_trace_csv(trace, control_names, config_hash, seed),
    )?;
    write_file(
        &dir.join(format!("region_seed{seed}.csv")),
        &render_region_csv(&trace.final_region, config_hash, seed),
    )?;
    write_file(
        &dir.join(format!("summary_seed{seed}.json")),
        &render_json(&summary),
    )?;
    Ok(summary)
}

/// Writes the cross-seed aggregate as `summary.json` in `dir`.
pub fn write_aggregate(dir: &Path, summary: &AggregateSummary) -> Result<(), ReportError> {
    write_file(&dir.join("summary.json"), &render_json(summary))
}
