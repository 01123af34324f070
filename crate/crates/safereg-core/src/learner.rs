//! Safe-region estimation and the cost-aware active-learning loop.
//!
//! The learner starts from the observational prior, keeps a Gaussian-process
//! posterior over the effect surface, and repeatedly intervenes at the point
//! with the highest posterior standard deviation per unit cost among the
//! points currently certified safe. The certified region is the set of grid
//! points whose lower confidence bound clears the safety level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, ObservationDataset};
use crate::env::{EnvError, Environment};
use crate::gp::{self, GaussianProcess, GpError};
use crate::graph::{CausalGraph, GraphError, InterventionTarget};
use crate::grid::{ControlGrid, GridError};
use crate::prior::{estimate_prior, EffectModel, PriorError, PriorParams};
use crate::spec::{evaluate, SpecError, SpecFormula, Trajectory, TrajectoryRow};

/// Monte-Carlo samples used per ground-truth safety query during a run.
pub const TRUTH_MC_SAMPLES: usize = 10_000;

const PRIOR_SEED_SALT: u64 = 0xB007_57A9_5EED_CAFE;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("environment failure: {0}")]
    EnvironmentFailure(#[from] EnvError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("trace records lack ground-truth safety flags")]
    MissingTruthFlags,
    #[error("cost {cost} would push spending {spent} past the budget {budget}")]
    BudgetExceeded { spent: f64, cost: f64, budget: f64 },
}

/// How the confidence multiplier is derived during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BetaMode {
    /// Fixed multiplier `beta = beta_sqrt^2`, the recommended default.
    Practical { beta_sqrt: f64 },
    /// Anytime bound with RKHS-norm bound `bound_b`; the information-gain
    /// term is recomputed from the current observation set each iteration.
    Theoretical { bound_b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    /// Target frequency with which the certified region must be truly safe.
    pub alpha: f64,
    #[serde(flatten)]
    pub mode: BetaMode,
}

/// Per-point posterior summary and certified membership over a control grid.
///
/// Membership is `clamp(mean, 0, 1) - kappa >= delta`; `lambda` is the
/// member fraction. The initial region built from the prior alone uses
/// `kappa = 0` and additionally requires observational support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafeRegionEstimate {
    pub grid: ControlGrid,
    /// Posterior means clamped to [0, 1], the values the membership test saw.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub kappas: Vec<f64>,
    pub members: Vec<bool>,
    pub lambda: f64,
    /// Confidence scaling behind `kappas`; also drives the fallback scoring
    /// when the member set is empty.
    pub beta: f64,
}

impl SafeRegionEstimate {
    pub fn member_count(&self) -> usize {
        self.members.iter().filter(|m| **m).count()
    }

    /// Hex SHA-256 of the membership bitmask; a compact region fingerprint
    /// for traces.
    pub fn membership_hash(&self) -> String {
        hash_members(&self.members)
    }
}

fn hash_members(members: &[bool]) -> String {
    let mut packed = vec![0u8; members.len().div_ceil(8)];
    for (i, m) in members.iter().enumerate() {
        if *m {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    let digest = Sha256::digest(&packed);
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Intervention pricing plus budget accounting. `spent` only moves through
/// [`CostModel::charge`], which refuses to cross the budget.
#[derive(Debug, Clone)]
pub struct CostModel {
    cost: fn(&[f64]) -> f64,
    budget: f64,
    spent: f64,
}

impl CostModel {
    pub fn new(cost: fn(&[f64]) -> f64, budget: f64) -> Result<Self, LearnerError> {
        if !(budget >= 0.0 && budget.is_finite()) {
            return Err(LearnerError::InvalidConfig {
                field: "budget".to_string(),
                message: format!("must be finite and non-negative, got {budget}"),
            });
        }
        Ok(CostModel {
            cost,
            budget,
            spent: 0.0,
        })
    }

    pub fn cost(&self, point: &[f64]) -> f64 {
        (self.cost)(point)
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn can_afford(&self, cost: f64) -> bool {
        self.spent + cost <= self.budget
    }

    pub fn charge(&mut self, cost: f64) -> Result<(), LearnerError> {
        if !self.can_afford(cost) {
            return Err(LearnerError::BudgetExceeded {
                spent: self.spent,
                cost,
                budget: self.budget,
            });
        }
        self.spent += cost;
        Ok(())
    }
}

/// Full configuration of one learning run. Defaults are the library-level
/// choices; the reference experiment configs override the estimator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColConfig {
    /// Passive observations collected before the first intervention.
    pub monitoring_steps: usize,
    /// Trajectory horizon; must match the specification's horizon.
    pub horizon: usize,
    /// Required satisfaction probability for a point to count as safe.
    pub delta: f64,
    pub confidence: ConfidenceParams,
    /// Total intervention budget (same units as the cost function).
    pub budget: f64,
    /// Grid resolution per control dimension.
    pub resolution: usize,
    pub use_causal_prior: bool,
    pub use_safety_constraint: bool,
    pub use_cost_scaling: bool,
    /// Keep only the last `window` observations in the posterior
    /// (0 disables forgetting; used for drifting dynamics).
    pub window: usize,
    pub seed: u64,
    pub prior: PriorParams,
    pub lengthscale: f64,
    /// Noise standard deviation assumed for each 0/1 spec outcome.
    pub observation_noise: f64,
    pub convergence_epsilon: f64,
    pub convergence_patience: usize,
}

impl Default for ColConfig {
    fn default() -> Self {
        ColConfig {
            monitoring_steps: 10,
            horizon: 1,
            delta: 0.8,
            confidence: ConfidenceParams {
                alpha: 0.8,
                mode: BetaMode::Practical { beta_sqrt: 2.0 },
            },
            budget: 20.0,
            resolution: 50,
            use_causal_prior: true,
            use_safety_constraint: true,
            use_cost_scaling: true,
            window: 0,
            seed: 0,
            prior: PriorParams::default(),
            lengthscale: 1.0,
            observation_noise: 0.25,
            convergence_epsilon: 0.01,
            convergence_patience: 3,
        }
    }
}

impl ColConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let fail = |field: &str, message: String| {
            Err(LearnerError::InvalidConfig {
                field: field.to_string(),
                message,
            })
        };
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail("delta", format!("must lie in (0, 1), got {}", self.delta));
        }
        let alpha = self.confidence.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            return fail("alpha", format!("must lie in (0, 1), got {alpha}"));
        }
        match self.confidence.mode {
            BetaMode::Practical { beta_sqrt } => {
                if !(beta_sqrt >= 0.0 && beta_sqrt.is_finite()) {
                    return fail(
                        "beta_sqrt",
                        format!("must be finite and non-negative, got {beta_sqrt}"),
                    );
                }
            }
            BetaMode::Theoretical { bound_b } => {
                if !bound_b.is_finite() {
                    return fail("bound_b", format!("must be finite, got {bound_b}"));
                }
            }
        }
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return fail(
                "budget",
                format!("must be finite and non-negative, got {}", self.budget),
            );
        }
        if self.resolution < 2 {
            return fail(
                "resolution",
                format!("need at least 2 points per dimension, got {}", self.resolution),
            );
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return fail(
                "lengthscale",
                format!("must be positive and finite, got {}", self.lengthscale),
            );
        }
        if !(self.observation_noise >= 0.0 && self.observation_noise.is_finite()) {
            return fail(
                "observation_noise",
                format!(
                    "must be finite and non-negative, got {}",
                    self.observation_noise
                ),
            );
        }
        if !(self.prior.bandwidth > 0.0 && self.prior.bandwidth.is_finite()) {
            return fail(
                "prior.bandwidth",
                format!("must be positive and finite, got {}", self.prior.bandwidth),
            );
        }
        if self.prior.bootstrap_reps == 0 {
            return fail("prior.bootstrap_reps", "must be at least 1".to_string());
        }
        if !(self.prior.sigma_ceiling > 0.0 && self.prior.sigma_ceiling.is_finite()) {
            return fail(
                "prior.sigma_ceiling",
                format!(
                    "must be positive and finite, got {}",
                    self.prior.sigma_ceiling
                ),
            );
        }
        if !(self.prior.sigma_floor >= 0.0 && self.prior.sigma_floor <= self.prior.sigma_ceiling)
        {
            return fail(
                "prior.sigma_floor",
                format!(
                    "must lie in [0, sigma_ceiling], got {}",
                    self.prior.sigma_floor
                ),
            );
        }
        if !(self.prior.support_threshold >= 0.0 && self.prior.support_threshold.is_finite()) {
            return fail(
                "prior.support_threshold",
                format!(
                    "must be finite and non-negative, got {}",
                    self.prior.support_threshold
                ),
            );
        }
        if !(self.convergence_epsilon > 0.0 && self.convergence_epsilon.is_finite()) {
            return fail(
                "convergence_epsilon",
                format!(
                    "must be positive and finite, got {}",
                    self.convergence_epsilon
                ),
            );
        }
        if self.convergence_patience == 0 {
            return fail("convergence_patience", "must be at least 1".to_string());
        }
        Ok(())
    }
}

/// One executed intervention with everything the evaluation needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterventionRecord {
    /// Environment clock when the intervention started.
    pub step: u64,
    pub point: Vec<f64>,
    pub cost: f64,
    pub spec_outcome: u8,
    /// Ground-truth safety of the point at this step, when the environment
    /// can answer.
    pub truth_safe: Option<bool>,
    /// Region fraction after folding this outcome into the posterior.
    pub lambda: f64,
    pub region_hash: String,
    /// Membership snapshot behind the hash.
    pub region_members: Vec<bool>,
    /// True when the point came from the empty-region fallback rather than
    /// the certified member set.
    pub fallback: bool,
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColTrace {
    pub records: Vec<InterventionRecord>,
    /// Region fraction certified by the prior alone, before any intervention.
    pub initial_lambda: f64,
    pub final_region: SafeRegionEstimate,
    pub effect_model: EffectModel,
    pub gp_state: serde_json::Value,
    pub spent: f64,
    pub budget: f64,
}

impl ColTrace {
    pub fn final_lambda(&self) -> f64 {
        self.final_region.lambda
    }
}

/// Resolves the confidence scaling at step `t`. In theoretical mode the
/// information-gain term comes from the Gram matrix of the current
/// observation set with the mean assumed noise.
fn resolve_beta(
    gp: &GaussianProcess,
    confidence: &ConfidenceParams,
    t: u64,
) -> Result<f64, GpError> {
    match confidence.mode {
        BetaMode::Practical { beta_sqrt } => gp::beta(
            t,
            confidence.alpha,
            &gp::ConfidenceMode::Practical { beta_sqrt },
        ),
        BetaMode::Theoretical { bound_b } => {
            let obs = gp.observations();
            let gamma = if obs.is_empty() {
                0.0
            } else {
                let n = obs.len();
                let mut gram = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        gram[i][j] = gp.kernel().eval(&obs[i].point, &obs[j].point)?;
                    }
                }
                let noise = (obs.iter().map(|o| o.noise_std).sum::<f64>() / n as f64).max(1e-6);
                gp::information_gain(&gram, noise)?
            };
            gp::beta(
                t,
                confidence.alpha,
                &gp::ConfidenceMode::Theoretical { bound_b, gamma },
            )
        }
    }
}

/// Certified region at step `t`: grid points whose clamped posterior mean
/// minus the confidence half-width clears `delta`.
pub fn estimate_region(
    gp: &GaussianProcess,
    confidence: &ConfidenceParams,
    delta: f64,
    grid: &ControlGrid,
    t: u64,
) -> Result<SafeRegionEstimate, LearnerError> {
    let beta = resolve_beta(gp, confidence, t)?;
    let points = grid.points();
    let (raw_means, variances) = gp.posterior(&points)?;
    let mut means = Vec::with_capacity(points.len());
    let mut kappas = Vec::with_capacity(points.len());
    let mut members = Vec::with_capacity(points.len());
    for (m, v) in raw_means.iter().zip(&variances) {
        let clamped = m.clamp(0.0, 1.0);
        let kappa = gp::kappa(beta, *v);
        members.push(clamped - kappa >= delta);
        means.push(clamped);
        kappas.push(kappa);
    }
    let lambda = members.iter().filter(|m| **m).count() as f64 / points.len() as f64;
    Ok(SafeRegionEstimate {
        grid: grid.clone(),
        means,
        variances,
        kappas,
        members,
        lambda,
        beta,
    })
}

/// Region certified by the prior alone: supported points whose prior mean
/// already clears `delta`. No confidence half-width is subtracted; `beta` is
/// carried only for downstream selection scoring.
pub fn initial_region(model: &EffectModel, delta: f64, beta: f64) -> SafeRegionEstimate {
    let members: Vec<bool> = model
        .mu
        .iter()
        .zip(&model.support)
        .map(|(mu, sup)| *sup && *mu >= delta)
        .collect();
    let lambda = members.iter().filter(|m| **m).count() as f64 / members.len() as f64;
    SafeRegionEstimate {
        grid: model.grid.clone(),
        means: model.mu.clone(),
        variances: model.sigma.iter().map(|s| s * s).collect(),
        kappas: vec![0.0; model.mu.len()],
        members,
        lambda,
        beta,
    }
}

/// Next intervention: the member point with the highest posterior standard
/// deviation, divided by its cost when cost scaling is on. Ties resolve to
/// the lowest grid index (lexicographic coordinates). With the safety
/// constraint disabled the whole grid competes. `None` iff the member set is
/// empty while the constraint is on.
pub fn select_intervention(
    region: &SafeRegionEstimate,
    cost_model: &CostModel,
    use_safety_constraint: bool,
    use_cost_scaling: bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for index in 0..region.members.len() {
        if use_safety_constraint && !region.members[index] {
            continue;
        }
        let mut score = region.variances[index].max(0.0).sqrt();
        if use_cost_scaling {
            score /= cost_model.cost(&region.grid.point(index));
        }
        if best.is_none() || score > best.unwrap().1 {
            best = Some((index, score));
        }
    }
    best.map(|(index, _)| index)
}

/// Emergency selection when nothing is certified yet: the point with the
/// best upper confidence bound per unit cost. Keeps the walk moving toward
/// plausibly safe territory instead of deadlocking.
fn fallback_intervention(
    region: &SafeRegionEstimate,
    cost_model: &CostModel,
    use_cost_scaling: bool,
) -> usize {
    let beta_sqrt = region.beta.max(0.0).sqrt();
    let mut best = (0usize, f64::NEG_INFINITY);
    for index in 0..region.members.len() {
        let ucb = region.means[index].clamp(0.0, 1.0)
            + beta_sqrt * region.variances[index].max(0.0).sqrt();
        let score = if use_cost_scaling {
            ucb / cost_model.cost(&region.grid.point(index))
        } else {
            ucb
        };
        if score > best.1 {
            best = (index, score);
        }
    }
    best.0
}

fn trajectory_from_rows(rows: &[crate::env::Row]) -> Result<Trajectory, SpecError> {
    Trajectory::new(
        rows.iter()
            .map(|r| TrajectoryRow {
                time: r.time,
                values: r.values.clone(),
            })
            .collect(),
    )
}

/// Runs the full loop against an environment: monitor passively, build the
/// causal prior, then intervene under the safety constraint until the budget
/// refuses the next selection.
pub fn run_col(
    config: &ColConfig,
    env: &mut dyn Environment,
    graph: &CausalGraph,
    spec: &SpecFormula,
) -> Result<ColTrace, LearnerError> {
    config.validate()?;
    if config.horizon != spec.horizon {
        return Err(LearnerError::InvalidConfig {
            field: "horizon".to_string(),
            message: format!(
                "config horizon {} does not match specification horizon {}",
                config.horizon, spec.horizon
            ),
        });
    }
    env.reset(config.seed);
    let controls = graph.control_names();
    if controls.is_empty() {
        return Err(LearnerError::InvalidConfig {
            field: "graph".to_string(),
            message: "graph declares no control nodes".to_string(),
        });
    }
    let mut domains = Vec::with_capacity(controls.len());
    for name in &controls {
        let domain = graph
            .domain(name)
            .ok_or_else(|| GraphError::MissingDomain { name: name.clone() })?;
        domains.push(domain);
    }
    let grid = ControlGrid::new(&controls, &domains, config.resolution)?;

    let mut rows = Vec::with_capacity(config.monitoring_steps);
    for _ in 0..config.monitoring_steps {
        rows.push(env.observe()?);
    }

    let effect_model = if config.use_causal_prior {
        let dataset = ObservationDataset::from_rows(&rows)?;
        let params = PriorParams {
            seed: config.seed ^ PRIOR_SEED_SALT,
            ..config.prior.clone()
        };
        estimate_prior(&dataset, graph, &controls, spec, &grid, &params)?
    } else {
        EffectModel::flat(controls.clone(), grid.clone(), config.prior.sigma_ceiling)
    };

    let mut gp = GaussianProcess::from_prior(effect_model.clone(), config.lengthscale)?;
    let mut cost_model = CostModel::new(crate::env::intervention_cost, config.budget)?;
    let beta0 = resolve_beta(&gp, &config.confidence, env.clock().max(1))?;
    let mut region = initial_region(&effect_model, config.delta, beta0);
    let initial_lambda = region.lambda;

    let mut records: Vec<InterventionRecord> = Vec::new();
    loop {
        let (index, fallback) = match select_intervention(
            &region,
            &cost_model,
            config.use_safety_constraint,
            config.use_cost_scaling,
        ) {
            Some(index) => (index, false),
            None => (
                fallback_intervention(&region, &cost_model, config.use_cost_scaling),
                true,
            ),
        };
        let point = grid.point(index);
        let cost = cost_model.cost(&point);
        if !cost_model.can_afford(cost) {
            break;
        }
        let assignments: Vec<(String, f64)> = controls
            .iter()
            .cloned()
            .zip(point.iter().copied())
            .collect();
        InterventionTarget::new(assignments.clone()).validate(graph)?;
        let step = env.clock();
        let truth_safe =
            env.ground_truth_safe(&assignments, config.delta, spec.horizon, TRUTH_MC_SAMPLES);
        let trajectory_rows = env.intervene(&assignments, spec.horizon)?;
        let outcome = evaluate(spec, &trajectory_from_rows(&trajectory_rows)?)?;

        gp = gp.update(&point, f64::from(outcome), config.observation_noise)?;
        if config.window > 0 && gp.observations().len() > config.window {
            let tail = gp.observations()[gp.observations().len() - config.window..].to_vec();
            gp = GaussianProcess::with_observations(
                effect_model.clone(),
                config.lengthscale,
                tail,
            )?;
        }
        region = estimate_region(
            &gp,
            &config.confidence,
            config.delta,
            &grid,
            env.clock().max(1),
        )?;
        cost_model.charge(cost)?;
        records.push(InterventionRecord {
            step,
            point,
            cost,
            spec_outcome: outcome,
            truth_safe,
            lambda: region.lambda,
            region_hash: region.membership_hash(),
            region_members: region.members.clone(),
            fallback,
        });
    }

    Ok(ColTrace {
        records,
        initial_lambda,
        final_region: region,
        effect_model,
        gp_state: gp.to_json(),
        spent: cost_model.spent(),
        budget: cost_model.budget(),
    })
}

/// Convergence verdict extracted from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceReport {
    /// Interventions at ground-truth-unsafe points up to convergence (or the
    /// whole trace when it never converged).
    pub unsafe_count: usize,
    pub converged: bool,
    /// 1-based index of the first intervention after which the region
    /// fraction stayed within epsilon for `patience` consecutive steps.
    pub convergence_step: Option<usize>,
}

/// Counts interventions at truly unsafe points before the region estimate
/// settled. Settling means `patience` consecutive changes of the region
/// fraction all below `epsilon`.
pub fn unsafe_interventions_to_converge(
    trace: &ColTrace,
    epsilon: f64,
    patience: usize,
) -> Result<ConvergenceReport, LearnerError> {
    let flags: Vec<bool> = trace
        .records
        .iter()
        .map(|r| r.truth_safe.ok_or(LearnerError::MissingTruthFlags))
        .collect::<Result<_, _>>()?;
    let lambdas: Vec<f64> = trace.records.iter().map(|r| r.lambda).collect();
    let n = lambdas.len();
    let mut convergence_step = None;
    if patience > 0 && n >= patience + 1 {
        'outer: for k in 1..=(n - patience) {
            for j in k..k + patience {
                if (lambdas[j] - lambdas[j - 1]).abs() >= epsilon {
                    continue 'outer;
                }
            }
            convergence_step = Some(k);
            break;
        }
    }
    let horizon = convergence_step.unwrap_or(n);
    let unsafe_count = flags[..horizon].iter().filter(|safe| !**safe).count();
    Ok(ConvergenceReport {
        unsafe_count,
        converged: convergence_step.is_some(),
        convergence_step,
    })
}
