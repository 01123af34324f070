//! Environment interface and the simulated edge-server system.
//!
//! The example system has two controls (CPU share `C` and memory share `M`,
//! both in `[0,1]`), an observed load `W`, and a response-time metric `Y` in
//! milliseconds. Passive dynamics draw the controls from Beta(0.5, 0.5) each
//! step; the load is Beta(2, 5) in scenario 1. Scenario 2 behaves identically
//! up to time step 10 and then switches to a deterministic ramping load with
//! a time-varying interaction term, which slowly shrinks the true safe
//! region.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("control value {value} for `{name}` is outside [0, 1]")]
    OutOfDomain { name: String, value: f64 },
    #[error("environment does not expose control `{0}`")]
    UnknownControl(String),
    #[error("this environment cannot apply interventions")]
    InterventionUnsupported,
    #[error("environment has no more recorded rows to replay")]
    ReplayExhausted,
}

/// One time step of observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub time: u64,
    pub values: BTreeMap<String, f64>,
}

/// Minimal seam between the learner and a system under study.
///
/// `observe` and `intervene` advance an internal integer clock; `reset(seed)`
/// followed by an identical call sequence must reproduce identical outputs.
/// `ground_truth_safe` is available on simulators only and returns `None`
/// when the environment cannot answer.
pub trait Environment {
    fn observe(&mut self) -> Result<Row, EnvError>;

    /// Fixes the listed controls for the next `horizon + 1` steps and returns
    /// that trajectory.
    fn intervene(
        &mut self,
        assignments: &[(String, f64)],
        horizon: usize,
    ) -> Result<Vec<Row>, EnvError>;

    /// Monte-Carlo estimate (at the current clock) of whether the point meets
    /// the required safety level `delta`.
    fn ground_truth_safe(
        &mut self,
        assignments: &[(String, f64)],
        delta: f64,
        horizon: usize,
        mc_samples: usize,
    ) -> Option<bool>;

    fn reset(&mut self, seed: u64);

    fn clock(&self) -> u64;
}

/// Which closed-form dynamics the example system follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    One,
    Two,
}

impl Scenario {
    pub fn id(self) -> u8 {
        match self {
            Scenario::One => 1,
            Scenario::Two => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Scenario::One),
            2 => Some(Scenario::Two),
            _ => None,
        }
    }
}

fn quadratic_bowl(c: f64, m: f64) -> f64 {
    250.0 * (c - 0.5).powi(2) + 250.0 * (m - 0.5).powi(2)
}

/// Response time at step `t` for load `w` and controls `(c, m)`.
pub fn response_time(scenario: Scenario, t: u64, w: f64, c: f64, m: f64) -> f64 {
    match scenario {
        Scenario::Two if t > 10 => {
            34.3 * w
                + quadratic_bowl(c, m)
                + 350.0 * (t as f64 / 2.0).sin() * (c - 0.5) * (m - 0.5)
        }
        _ => 34.3 * w + quadratic_bowl(c, m) + 200.0 * (c - 0.5) * (m - 0.5),
    }
}

/// Deterministic scenario-2 load ramp for `t > 10`.
fn ramp_load(t: u64) -> f64 {
    (0.1 + 0.1 * (t as f64 - 10.0)).min(1.0)
}

/// Intervention cost: each control contributes `(0.5 + u)^2`, so pushing
/// allocations up is quadratically more expensive.
pub fn intervention_cost(point: &[f64]) -> f64 {
    point.iter().map(|u| (0.5 + u).powi(2)).sum()
}

/// CDF of Beta(2, 5) on `[0, 1]`; closed form used by the analytic oracle.
pub fn beta25_cdf(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    1.0 - (1.0 - x).powi(5) * (1.0 + 5.0 * x)
}

/// Simulated edge server with both scenarios and ground-truth oracles.
pub struct ExampleSystem {
    scenario: Scenario,
    seed: u64,
    t: u64,
    rng: ChaCha12Rng,
    control_beta: Beta<f64>,
    load_beta: Beta<f64>,
}

impl ExampleSystem {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        ExampleSystem {
            scenario,
            seed,
            t: 0,
            rng: ChaCha12Rng::seed_from_u64(seed),
            control_beta: Beta::new(0.5, 0.5).expect("valid shape"),
            load_beta: Beta::new(2.0, 5.0).expect("valid shape"),
        }
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    fn load_at(&mut self, t: u64) -> f64 {
        if self.scenario == Scenario::Two && t > 10 {
            ramp_load(t)
        } else {
            self.load_beta.sample(&mut self.rng)
        }
    }

    fn row(t: u64, w: f64, c: f64, m: f64, y: f64) -> Row {
        Row {
            time: t,
            values: BTreeMap::from([
                ("W".to_string(), w),
                ("C".to_string(), c),
                ("M".to_string(), m),
                ("Y".to_string(), y),
            ]),
        }
    }

    fn extract_controls(assignments: &[(String, f64)]) -> Result<(f64, f64), EnvError> {
        let mut c = None;
        let mut m = None;
        for (name, value) in assignments {
            match name.as_str() {
                "C" => c = Some(*value),
                "M" => m = Some(*value),
                other => return Err(EnvError::UnknownControl(other.to_string())),
            }
        }
        let c = c.ok_or_else(|| EnvError::UnknownControl("C".to_string()))?;
        let m = m.ok_or_else(|| EnvError::UnknownControl("M".to_string()))?;
        for (name, value) in [("C", c), ("M", m)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(EnvError::OutOfDomain {
                    name: name.to_string(),
                    value,
                });
            }
        }
        Ok((c, m))
    }

    /// Closed-form probability that `always Y < 50` holds over the window
    /// starting at clock `at_t` under `do(C=c, M=m)`. The load-independent
    /// part of the response is deterministic, so each step contributes either
    /// a Beta(2,5) tail probability or a 0/1 indicator on the ramped load.
    pub fn truth_probability(&self, c: f64, m: f64, horizon: usize, at_t: u64) -> f64 {
        let mut p = 1.0;
        for tau in at_t..=at_t + horizon as u64 {
            let fixed_part = response_time(self.scenario, tau, 0.0, c, m);
            if self.scenario == Scenario::Two && tau > 10 {
                let w = ramp_load(tau);
                if 34.3 * w + fixed_part >= 50.0 {
                    p = 0.0;
                }
            } else {
                p *= beta25_cdf((50.0 - fixed_part) / 34.3);
            }
        }
        p
    }

    /// Monte-Carlo estimate of the same satisfaction probability, using an
    /// RNG stream derived from (seed, clock, point) so oracle queries never
    /// disturb the system's own dynamics.
    pub fn truth_probability_mc(
        &self,
        c: f64,
        m: f64,
        horizon: usize,
        at_t: u64,
        mc_samples: usize,
    ) -> f64 {
        let mut key = self.seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(at_t + 1);
        key ^= (c.to_bits()).rotate_left(17) ^ (m.to_bits()).rotate_left(43);
        let mut rng = ChaCha12Rng::seed_from_u64(key);
        let mut hits = 0usize;
        for _ in 0..mc_samples {
            let mut ok = true;
            for tau in at_t..=at_t + horizon as u64 {
                let w = if self.scenario == Scenario::Two && tau > 10 {
                    ramp_load(tau)
                } else {
                    self.load_beta.sample(&mut rng)
                };
                if response_time(self.scenario, tau, w, c, m) >= 50.0 {
                    ok = false;
                    break;
                }
            }
            if ok {
                hits += 1;
            }
        }
        hits as f64 / mc_samples as f64
    }
}

impl Environment for ExampleSystem {
    fn observe(&mut self) -> Result<Row, EnvError> {
        let t = self.t;
        let c = self.control_beta.sample(&mut self.rng);
        let m = self.control_beta.sample(&mut self.rng);
        let w = self.load_at(t);
        let y = response_time(self.scenario, t, w, c, m);
        self.t += 1;
        Ok(Self::row(t, w, c, m, y))
    }

    fn intervene(
        &mut self,
        assignments: &[(String, f64)],
        horizon: usize,
    ) -> Result<Vec<Row>, EnvError> {
        let (c, m) = Self::extract_controls(assignments)?;
        let mut rows = Vec::with_capacity(horizon + 1);
        for _ in 0..=horizon {
            let t = self.t;
            let w = self.load_at(t);
            let y = response_time(self.scenario, t, w, c, m);
            rows.push(Self::row(t, w, c, m, y));
            self.t += 1;
        }
        Ok(rows)
    }

    fn ground_truth_safe(
        &mut self,
        assignments: &[(String, f64)],
        delta: f64,
        horizon: usize,
        mc_samples: usize,
    ) -> Option<bool> {
        let (c, m) = Self::extract_controls(assignments).ok()?;
        let estimate = self.truth_probability_mc(c, m, horizon, self.t, mc_samples);
        Some(estimate >= delta)
    }

    fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.t = 0;
        self.rng = ChaCha12Rng::seed_from_u64(seed);
    }

    fn clock(&self) -> u64 {
        self.t
    }
}

/// Replays a recorded observation log as an environment. Interventions are
/// not supported (the log is passive data).
pub struct CsvReplayEnvironment {
    rows: Vec<Row>,
    pos: usize,
}

impl CsvReplayEnvironment {
    pub fn new(rows: Vec<Row>) -> Self {
        CsvReplayEnvironment { rows, pos: 0 }
    }
}

impl Environment for CsvReplayEnvironment {
    fn observe(&mut self) -> Result<Row, EnvError> {
        let row = self.rows.get(self.pos).cloned().ok_or(EnvError::ReplayExhausted)?;
        self.pos += 1;
        Ok(row)
    }

    fn intervene(
        &mut self,
        _assignments: &[(String, f64)],
        _horizon: usize,
    ) -> Result<Vec<Row>, EnvError> {
        Err(EnvError::InterventionUnsupported)
    }

    fn ground_truth_safe(
        &mut self,
        _assignments: &[(String, f64)],
        _delta: f64,
        _horizon: usize,
        _mc_samples: usize,
    ) -> Option<bool> {
        None
    }

    fn reset(&mut self, _seed: u64) {
        self.pos = 0;
    }

    fn clock(&self) -> u64 {
        self.pos as u64
    }
}
