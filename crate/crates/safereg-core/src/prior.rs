//! Causal-prior construction from passive observations.
//!
//! Given a causal graph that renders the intervention identifiable, the
//! satisfaction probability of the specification under `do(U' = u')` is
//! estimated by backdoor adjustment: the dataset is sliced into overlapping
//! windows of length `H + 1`, each window contributes a Boolean spec outcome
//! keyed by the control values at its start, the adjustment variables are
//! discretized into equal-frequency bins, and within each stratum the outcome
//! is kernel-smoothed over the control coordinates (Nadaraya-Watson with a
//! product Gaussian kernel). The per-point uncertainty is the bootstrap
//! standard deviation of the whole estimator.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, ObservationDataset};
use crate::graph::{CausalGraph, GraphError};
use crate::grid::{ControlGrid, GridError};
use crate::spec::{evaluate, SpecError, SpecFormula, Trajectory, TrajectoryRow};

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("intervention effect is not identifiable from the graph")]
    NotIdentifiable,
    #[error("dataset too small: {rows} rows cannot form a window of length {window}")]
    InsufficientData { rows: usize, window: usize },
    #[error("column `{0}` required for estimation is missing")]
    MissingColumn(String),
    #[error("stratum {stratum:?} has positive probability but no usable treatment weight")]
    EmptyStratum { stratum: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("effect model is malformed: {0}")]
    MalformedModel(String),
}

/// Estimated intervention effect over a control grid: mean satisfaction
/// probability, its uncertainty, and whether observational data covered the
/// point at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectModel {
    pub controls: Vec<String>,
    pub grid: ControlGrid,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub support: Vec<bool>,
}

impl EffectModel {
    pub fn new(
        controls: Vec<String>,
        grid: ControlGrid,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        support: Vec<bool>,
    ) -> Result<Self, PriorError> {
        let n = grid.len();
        if mu.len() != n || sigma.len() != n || support.len() != n {
            return Err(PriorError::MalformedModel(format!(
                "grid has {n} points but mu/sigma/support have {}/{}/{}",
                mu.len(),
                sigma.len(),
                support.len()
            )));
        }
        if let Some(bad) = mu.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PriorError::MalformedModel(format!(
                "mean {bad} outside [0, 1]"
            )));
        }
        if let Some(bad) = sigma.iter().find(|v| !(**v >= 0.0)) {
            return Err(PriorError::MalformedModel(format!(
                "std {bad} is negative or NaN"
            )));
        }
        Ok(EffectModel {
            controls,
            grid,
            mu,
            sigma,
            support,
        })
    }

    /// Uninformative model: mean 1/2, std at the ceiling, no support. Used
    /// when the causal prior is ablated away.
    pub fn flat(controls: Vec<String>, grid: ControlGrid, sigma_ceiling: f64) -> Self {
        let n = grid.len();
        EffectModel {
            controls,
            grid,
            mu: vec![0.5; n],
            sigma: vec![sigma_ceiling; n],
            support: vec![false; n],
        }
    }

    pub fn mean_at(&self, point: &[f64]) -> Result<f64, GridError> {
        self.grid.interpolate(&self.mu, point)
    }

    pub fn sigma_at(&self, point: &[f64]) -> Result<f64, GridError> {
        self.grid.interpolate(&self.sigma, point)
    }

    /// JSON export with grid points materialized, mirroring the on-disk
    /// schema `{controls, grid, mu, sigma, support}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "controls": self.controls,
            "grid": self.grid.points(),
            "mu": self.mu,
            "sigma": self.sigma,
            "support": self.support,
        })
    }
}

/// Tunable knobs of the prior estimator. `bandwidth` is expressed in
/// normalized control units (the domain box maps to `[0,1]^d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorParams {
    pub bandwidth: f64,
    pub bootstrap_reps: usize,
    /// Points whose total kernel weight (effective sample count) falls below
    /// this threshold are marked unsupported.
    pub support_threshold: f64,
    /// Std assigned to unsupported points, and upper clamp everywhere.
    pub sigma_ceiling: f64,
    /// Lower clamp on the std at supported points; keeps the induced kernel
    /// amplitude away from zero where the bootstrap is overconfident.
    pub sigma_floor: f64,
    /// Equal-frequency bins per continuous adjustment variable.
    pub adjustment_bins: usize,
    pub seed: u64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            bandwidth: 0.1,
            bootstrap_reps: 30,
            support_threshold: 5.0,
            sigma_ceiling: 0.5,
            sigma_floor: 0.0,
            adjustment_bins: 10,
            seed: 0,
        }
    }
}

/// Windowed samples extracted from a dataset: per-window controls (at the
/// window start), Boolean spec outcome, and adjustment-variable stratum.
struct Windows {
    controls: Vec<Vec<f64>>, // normalized coordinates
    outcomes: Vec<f64>,
    strata: Vec<usize>,
    stratum_count: usize,
}

fn build_windows(
    dataset: &ObservationDataset,
    controls: &[String],
    adjustment: &BTreeSet<String>,
    spec: &SpecFormula,
    grid: &ControlGrid,
    bins: usize,
) -> Result<Windows, PriorError> {
    let n = dataset.len();
    let h = spec.horizon;
    if n < h + 1 {
        return Err(PriorError::InsufficientData {
            rows: n,
            window: h + 1,
        });
    }
    for name in controls.iter().chain(adjustment.iter()) {
        if !dataset.has_column(name) {
            return Err(PriorError::MissingColumn(name.clone()));
        }
    }
    for metric in spec.metrics() {
        if !dataset.has_column(&metric) {
            return Err(PriorError::MissingColumn(metric));
        }
    }
    let window_count = n - h;
    let mut outcomes = Vec::with_capacity(window_count);
    let mut points = Vec::with_capacity(window_count);
    let metric_names = spec.metrics();
    for start in 0..window_count {
        let rows: Result<Vec<TrajectoryRow>, PriorError> = (0..=h)
            .map(|offset| {
                let mut values = BTreeMap::new();
                for metric in &metric_names {
                    values.insert(metric.clone(), dataset.value(metric, start + offset)?);
                }
                Ok(TrajectoryRow {
                    time: offset as u64,
                    values,
                })
            })
            .collect();
        let traj = Trajectory::new(rows?)?;
        outcomes.push(f64::from(evaluate(spec, &traj)?));
        let raw: Result<Vec<f64>, PriorError> = controls
            .iter()
            .map(|c| Ok(dataset.value(c, start)?))
            .collect();
        points.push(grid.normalize(&raw?)?);
    }
    // Stratify adjustment variables via equal-frequency bins; the stratum of
    // a window is the tuple of its bin indices, flattened to a single id.
    let mut strata = vec![0usize; window_count];
    for name in adjustment {
        let column = dataset.column(name)?;
        let window_values: Vec<f64> = (0..window_count).map(|i| column[i]).collect();
        let edges = equal_frequency_edges(&window_values, bins);
        let local_bins = edges.len() + 1;
        for (i, &v) in window_values.iter().enumerate() {
            let b = edges.partition_point(|&e| e <= v);
            strata[i] = strata[i] * local_bins + b;
        }
    }
    // Compact stratum ids to the ones actually present, keeping order.
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &strata {
        let next = remap.len();
        remap.entry(*s).or_insert(next);
    }
    for s in &mut strata {
        *s = remap[s];
    }
    let stratum_count = remap.len().max(1);
    Ok(Windows {
        controls: points,
        outcomes,
        strata,
        stratum_count,
    })
}

/// Interior bin edges splitting `values` into (at most) `bins` groups of
/// near-equal frequency. Duplicate quantiles collapse, so a constant column
/// yields a single stratum.
fn equal_frequency_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    let mut edges = Vec::new();
    for k in 1..bins.max(1) {
        let idx = (k * n) / bins;
        if idx == 0 || idx >= n {
            continue;
        }
        let edge = sorted[idx];
        if edges.last() != Some(&edge) && edge > sorted[0] {
            edges.push(edge);
        }
    }
    edges
}

/// Product Gaussian kernel weights of every window control point against a
/// normalized query point.
fn kernel_weights(windows: &[Vec<f64>], query: &[f64], bandwidth: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    windows
        .iter()
        .map(|w| {
            let d2: f64 = w
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (-d2 * inv).exp()
        })
        .collect()
}

/// Backdoor-adjusted Nadaraya-Watson estimate at one point given per-window
/// multiplicities `counts` (all ones for the point estimate; a bootstrap
/// replicate passes its resample counts). Empty strata contribute the prior
/// value 1/2 at their stratum probability.
fn adjusted_estimate(w: &Windows, weights: &[f64], counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.5;
    }
    let mut stratum_mass = vec![0.0; w.stratum_count];
    let mut stratum_weight = vec![0.0; w.stratum_count];
    let mut stratum_hits = vec![0.0; w.stratum_count];
    for i in 0..counts.len() {
        let c = counts[i];
        if c == 0.0 {
            continue;
        }
        let s = w.strata[i];
        stratum_mass[s] += c;
        stratum_weight[s] += weights[i] * c;
        stratum_hits[s] += weights[i] * w.outcomes[i] * c;
    }
    let mut acc = 0.0;
    for s in 0..w.stratum_count {
        if stratum_mass[s] == 0.0 {
            continue;
        }
        let p_z = stratum_mass[s] / total;
        let conditional = if stratum_weight[s] > 0.0 {
            stratum_hits[s] / stratum_weight[s]
        } else {
            0.5
        };
        acc += p_z * conditional;
    }
    acc
}

/// Estimates the causal prior (mean, std, support) over the grid.
///
/// Preconditions: the effect of `controls` on every spec metric must be
/// identifiable through the backdoor criterion, and the dataset must contain
/// the control, adjustment and metric columns with at least one full window.
pub fn estimate_prior(
    dataset: &ObservationDataset,
    graph: &CausalGraph,
    controls: &[String],
    spec: &SpecFormula,
    grid: &ControlGrid,
    params: &PriorParams,
) -> Result<EffectModel, PriorError> {
    let metrics = spec.metrics();
    if !graph.is_identifiable(controls, &metrics)? {
        return Err(PriorError::NotIdentifiable);
    }
    let adjustment = graph
        .adjustment_union(controls, &metrics)?
        .expect("identifiable implies a backdoor set per metric");
    let windows = build_windows(
        dataset,
        controls,
        &adjustment,
        spec,
        grid,
        params.adjustment_bins,
    )?;
    let n_windows = windows.outcomes.len();
    let ones = vec![1.0; n_windows];
    let mut mu = Vec::with_capacity(grid.len());
    let mut sigma = Vec::with_capacity(grid.len());
    let mut support = Vec::with_capacity(grid.len());
    let mut replicate_counts: Vec<Vec<f64>> = Vec::with_capacity(params.bootstrap_reps);
    for rep in 0..params.bootstrap_reps {
        // Per-replicate seeding keeps the bootstrap deterministic regardless
        // of evaluation order.
        let mut rng = ChaCha12Rng::seed_from_u64(
            params
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(rep as u64 + 1)),
        );
        let mut counts = vec![0.0; n_windows];
        for _ in 0..n_windows {
            counts[rng.random_range(0..n_windows)] += 1.0;
        }
        replicate_counts.push(counts);
    }
    for index in 0..grid.len() {
        let query = grid.normalize(&grid.point(index))?;
        let weights = kernel_weights(&windows.controls, &query, params.bandwidth);
        let total_weight: f64 = weights.iter().sum();
        if total_weight < params.support_threshold {
            mu.push(0.5);
            sigma.push(params.sigma_ceiling);
            support.push(false);
            continue;
        }
        let estimate = adjusted_estimate(&windows, &weights, &ones);
        let reps: Vec<f64> = replicate_counts
            .iter()
            .map(|counts| adjusted_estimate(&windows, &weights, counts))
            .collect();
        let mean_rep = reps.iter().sum::<f64>() / reps.len().max(1) as f64;
        let var_rep = reps
            .iter()
            .map(|r| (r - mean_rep) * (r - mean_rep))
            .sum::<f64>()
            / reps.len().max(1) as f64;
        mu.push(estimate.clamp(0.0, 1.0));
        sigma.push(
            var_rep
                .sqrt()
                .clamp(params.sigma_floor, params.sigma_ceiling),
        );
        support.push(true);
    }
    EffectModel::new(controls.to_vec(), grid.clone(), mu, sigma, support)
}

/// How [`adjust_effect`] treats strata with positive probability but zero
/// usable treatment weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyStratumPolicy {
    /// Contribute the prior value 1/2 at the stratum probability and count
    /// the stratum (avoids silently biased sums).
    PriorFill,
    /// Fail with [`PriorError::EmptyStratum`].
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedEffect {
    pub value: f64,
    /// Number of strata that had to fall back to the prior value.
    pub empty_strata: usize,
}

/// Discrete/binned backdoor adjustment of a Boolean outcome:
/// `sum_z P(outcome | treatment, z) P(z)`.
///
/// Adjustment variables are discretized with equal-frequency bins; treatment
/// conditioning uses a Gaussian kernel in raw treatment units, so a bandwidth
/// well below the spacing of discrete treatment levels reduces to exact
/// matching.
pub fn adjust_effect(
    dataset: &ObservationDataset,
    outcome: &str,
    treatments: &[(String, f64)],
    adjustment: &BTreeSet<String>,
    bins: usize,
    bandwidth: f64,
    on_empty: EmptyStratumPolicy,
) -> Result<AdjustedEffect, PriorError> {
    let outcome_col = dataset
        .column(outcome)
        .map_err(|_| PriorError::MissingColumn(outcome.to_string()))?;
    let n = dataset.len();
    let mut weights = vec![1.0; n];
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    for (name, value) in treatments {
        let col = dataset
            .column(name)
            .map_err(|_| PriorError::MissingColumn(name.clone()))?;
        for i in 0..n {
            let d = col[i] - value;
            weights[i] *= (-d * d * inv).exp();
        }
    }
    let mut strata = vec![vec![0usize; 0]; 1];
    strata[0] = (0..n).collect();
    for name in adjustment {
        let col = dataset
            .column(name)
            .map_err(|_| PriorError::MissingColumn(name.clone()))?;
        let edges = equal_frequency_edges(col, bins);
        let mut next: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (s, members) in strata.iter().enumerate() {
            for &i in members {
                let b = edges.partition_point(|&e| e <= col[i]);
                next.entry((s, b)).or_default().push(i);
            }
        }
        strata = next.into_values().collect();
    }
    let mut acc = 0.0;
    let mut empty = 0usize;
    for (sid, members) in strata.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let p_z = members.len() as f64 / n as f64;
        let w_total: f64 = members.iter().map(|&i| weights[i]).sum();
        if w_total <= 1e-12 {
            match on_empty {
                EmptyStratumPolicy::PriorFill => {
                    acc += 0.5 * p_z;
                    empty += 1;
                }
                EmptyStratumPolicy::Error => {
                    return Err(PriorError::EmptyStratum { stratum: vec![sid] });
                }
            }
            continue;
        }
        let hits: f64 = members.iter().map(|&i| weights[i] * outcome_col[i]).sum();
        acc += p_z * hits / w_total;
    }
    Ok(AdjustedEffect {
        value: acc,
        empty_strata: empty,
    })
}
