//! Modular predictive safety filter.
//!
//! Each step receives the true plant state and a possibly compromised command
//! `u_a`, and returns the nearest command whose `N`-step continuation reaches
//! the terminal rest set without violating separation, wall clearance or
//! input limits. The accepted continuation is kept as the backup trajectory;
//! shifting it by one step and appending the zero input yields a feasible
//! candidate for the next step, so a safe command always exists once the first
//! step has been certified.

use serde::{Deserialize, Serialize};

use crate::constraints::{in_terminal_set, state_within, ConstraintSet};
use crate::dynamics::{rollout, FleetInput, FleetState, RobotInput, StateTrajectory};
use crate::error::{Error, Result};
use crate::optimizer::{solve, Nlp, NlpProblem, SolveResult, SolveStatus, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Prediction horizon `N`.
    pub horizon: usize,
    pub dt: f64,
    pub constraints: ConstraintSet,
    /// Interventions at or below this are reported as no intervention.
    pub pass_tol: f64,
    /// Weight pulling inputs after the first towards zero.
    pub regularization: f64,
    /// Margin the solver keeps from the separation and clearance limits.
    pub tightening: f64,
    pub solver: SolverConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            horizon: 3,
            dt: 0.02,
            constraints: ConstraintSet::default(),
            pass_tol: 1e-9,
            regularization: 1e-6,
            tightening: 1e-6,
            solver: SolverConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("filter horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("filter dt must be positive".into()));
        }
        if !(self.pass_tol >= 0.0 && self.regularization >= 0.0 && self.tightening >= 0.0) {
            return Err(Error::Config("filter tolerances must be non-negative".into()));
        }
        self.constraints.validate()?;
        self.solver.validate()
    }

    /// Slack accepted on state margins and terminal velocity.
    pub fn feas_tol(&self) -> f64 {
        self.solver.feas_tol
    }
}

/// Input sequence and predicted states certifying safety at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupTrajectory {
    pub inputs: Vec<FleetInput>,
    pub states: StateTrajectory,
    pub certified_at: usize,
}

impl BackupTrajectory {
    /// Re-checks every invariant from scratch: the states are the rollout of
    /// the inputs, every state satisfies the margins within `tol`, inputs lie
    /// in their boxes and the final state is a rest point.
    pub fn validate(&self, cs: &ConstraintSet, tol: f64) -> std::result::Result<(), String> {
        if self.inputs.is_empty() || self.states.states.len() != self.inputs.len() + 1 {
            return Err("backup length mismatch".into());
        }
        let rolled = rollout(self.states.initial(), &self.inputs, self.states.dt)
            .map_err(|e| e.to_string())?;
        if rolled.states != self.states.states {
            return Err("states are not the rollout of the inputs".into());
        }
        for (k, s) in self.states.states.iter().enumerate() {
            if !state_within(s, cs, tol) {
                return Err(format!("predicted state {k} violates the margins"));
            }
        }
        for (k, u) in self.inputs.iter().enumerate() {
            if !u.agents.iter().all(|a| cs.input_ok(a)) {
                return Err(format!("input {k} leaves the input box"));
            }
        }
        if !in_terminal_set(self.states.terminal(), self.inputs.last().unwrap(), cs, tol) {
            return Err("terminal state is not a rest point".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    PassThrough,
    Modified,
    Fallback,
    /// Filter switched off; the command reaches the plant unchanged.
    Disabled,
}

impl FilterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::PassThrough => "pass-through",
            FilterMode::Modified => "modified",
            FilterMode::Fallback => "fallback",
            FilterMode::Disabled => "disabled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "pass-through" => FilterMode::PassThrough,
            "modified" => FilterMode::Modified,
            "fallback" => FilterMode::Fallback,
            "disabled" => FilterMode::Disabled,
            _ => return None,
        })
    }
}

/// Deterministic subset of [`SolveResult`] kept in logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub status: SolveStatus,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub objective: f64,
    pub max_ineq_violation: f64,
    pub max_eq_violation: f64,
    pub stationarity: f64,
}

impl From<&SolveResult> for SolverStats {
    fn from(r: &SolveResult) -> Self {
        SolverStats {
            status: r.status,
            iterations: r.iterations,
            outer_iterations: r.outer_iterations,
            objective: r.objective,
            max_ineq_violation: r.max_ineq_violation,
            max_eq_violation: r.max_eq_violation,
            stationarity: r.stationarity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub u_s: FleetInput,
    pub mode: FilterMode,
    /// `||u_a - u_s|| / (2 ||U_max||)` over the stacked fleet command.
    pub intervention: f64,
    /// Per-agent `||u_a,i - u_s,i|| / (2 ||u_max||)`.
    pub agent_intervention: Vec<f64>,
    pub backup: BackupTrajectory,
    pub solver: Option<SolverStats>,
}

/// Normalised command corrections: fleet-wide and per agent.
pub fn intervention(u_a: &FleetInput, u_s: &FleetInput, cs: &ConstraintSet) -> (f64, Vec<f64>) {
    let m = cs.u_max();
    let agent_norm = m.v.hypot(m.omega);
    let fleet_norm = agent_norm * (u_a.len() as f64).sqrt();
    let per_agent = u_a
        .agents
        .iter()
        .zip(&u_s.agents)
        .map(|(a, s)| (a.v - s.v).hypot(a.omega - s.omega) / (2.0 * agent_norm))
        .collect();
    (u_a.distance(u_s) / (2.0 * fleet_norm), per_agent)
}

/// Drops the first input, appends the zero input and re-rolls from the
/// second predicted state.
pub fn shift_backup(prev: &BackupTrajectory) -> Result<BackupTrajectory> {
    let n = prev.states.initial().len();
    let mut inputs: Vec<FleetInput> = prev.inputs[1..].to_vec();
    inputs.push(FleetInput::zeros(n));
    let states = rollout(&prev.states.states[1], &inputs, prev.states.dt)?;
    Ok(BackupTrajectory {
        inputs,
        states,
        certified_at: prev.certified_at + 1,
    })
}

/// Rolls `inputs` out from `x` and accepts them if every constraint of the
/// filter problem holds within the feasibility tolerance.
fn certify(x: &FleetState, inputs: Vec<FleetInput>, cfg: &FilterConfig, at: usize) -> Result<Option<BackupTrajectory>> {
    let states = rollout(x, &inputs, cfg.dt)?;
    let backup = BackupTrajectory {
        inputs,
        states,
        certified_at: at,
    };
    Ok(backup.validate(&cfg.constraints, cfg.feas_tol()).is_ok().then_some(backup))
}

fn pass_through_candidates(u_a: &FleetInput, prev: Option<&BackupTrajectory>, horizon: usize) -> Vec<Vec<FleetInput>> {
    let n = u_a.len();
    let mut zero_tail = vec![FleetInput::zeros(n); horizon];
    zero_tail[0] = u_a.clone();
    let mut out = Vec::with_capacity(2);
    if let Some(prev) = prev.filter(|p| p.inputs.len() == horizon && p.inputs[0].len() == n) {
        // Shifted backup with its first entry replaced by u_a.
        let mut seq = Vec::with_capacity(horizon);
        seq.push(u_a.clone());
        seq.extend(prev.inputs.iter().skip(2).cloned());
        seq.push(FleetInput::zeros(n));
        seq.truncate(horizon);
        if seq != zero_tail {
            out.push(seq);
        }
    }
    out.push(zero_tail);
    out
}

/// One filter step at time index `at`.
///
/// `x` must be the true (local, unattacked) plant state.
pub fn filter_step(
    x: &FleetState,
    u_a: &FleetInput,
    prev: Option<&BackupTrajectory>,
    cfg: &FilterConfig,
    at: usize,
) -> Result<FilterOutcome> {
    if x.len() != u_a.len() {
        return Err(Error::InvalidArgument(format!(
            "state has {} agents, command has {}",
            x.len(),
            u_a.len()
        )));
    }
    if !u_a.is_finite() || !x.is_finite() {
        return Err(Error::InvalidArgument("non-finite state or command".into()));
    }
    let cs = &cfg.constraints;

    for candidate in pass_through_candidates(u_a, prev, cfg.horizon) {
        if let Some(backup) = certify(x, candidate, cfg, at)? {
            return Ok(FilterOutcome {
                u_s: u_a.clone(),
                mode: FilterMode::PassThrough,
                intervention: 0.0,
                agent_intervention: vec![0.0; u_a.len()],
                backup,
                solver: None,
            });
        }
    }

    let shifted = prev.map(shift_backup).transpose()?;
    let problem = NlpProblem::safety_filter(x, u_a, cfg.horizon, cfg.dt, cs, cfg.regularization, cfg.tightening)?;
    // Turning on the spot never moves an agent, so the received turn rates
    // with zero speed form a feasible start whenever the current state is
    // admissible. The solver starts from the cheaper of it and the shifted backup.
    let mut rotation = vec![FleetInput::zeros(x.len()); cfg.horizon];
    rotation[0] = FleetInput::new(
        u_a.agents
            .iter()
            .map(|u| cs.clamp_input(&RobotInput::new(0.0, u.omega)))
            .collect(),
    );
    let mut warm = problem.encode(&rotation);
    let rotation_ok = certify(x, rotation, cfg, at)?.is_some();
    if let Some(s) = &shifted {
        let z = problem.encode(&s.inputs);
        if !rotation_ok || problem.objective(&z) < problem.objective(&warm) {
            warm = z;
        }
    }
    let result = solve(&problem, Some(&warm), &cfg.solver)?;
    let stats = SolverStats::from(&result);
    if result.status.is_feasible() {
        if let Some(backup) = certify(x, problem.decode(&result.z_star), cfg, at)? {
            let u_s = backup.inputs[0].clone();
            let (intervention, agent_intervention) = intervention(u_a, &u_s, cs);
            return Ok(FilterOutcome {
                u_s,
                mode: FilterMode::Modified,
                intervention,
                agent_intervention,
                backup,
                solver: Some(stats),
            });
        }
    }

    match shifted {
        Some(backup) => {
            let u_s = backup.inputs[0].clone();
            let (intervention, agent_intervention) = intervention(u_a, &u_s, cs);
            Ok(FilterOutcome {
                u_s,
                mode: FilterMode::Fallback,
                intervention,
                agent_intervention,
                backup: BackupTrajectory { certified_at: at, ..backup },
                solver: Some(stats),
            })
        }
        None => Err(Error::InitialInfeasibility(format!(
            "no backup trajectory exists and the filter problem is not solvable (solver status {}, violation {:.3e})",
            result.status.as_str(),
            result.max_ineq_violation.max(result.max_eq_violation)
        ))),
    }
}

/// Stateful wrapper that carries the backup trajectory between steps.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    cfg: FilterConfig,
    backup: Option<BackupTrajectory>,
    steps: usize,
    fallbacks: usize,
}

impl SafetyFilter {
    pub fn new(cfg: FilterConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SafetyFilter {
            cfg,
            backup: None,
            steps: 0,
            fallbacks: 0,
        })
    }

    pub fn config(&self) -> &FilterConfig {
        &self.cfg
    }

    pub fn backup(&self) -> Option<&BackupTrajectory> {
        self.backup.as_ref()
    }

    pub fn fallback_count(&self) -> usize {
        self.fallbacks
    }

    pub fn step(&mut self, x: &FleetState, u_a: &FleetInput) -> Result<FilterOutcome> {
        let outcome = filter_step(x, u_a, self.backup.as_ref(), &self.cfg, self.steps)?;
        if outcome.mode == FilterMode::Fallback {
            self.fallbacks += 1;
            eprintln!(
                "warning: safety filter fell back to the shifted backup at step {}",
                self.steps
            );
        }
        self.backup = Some(outcome.backup.clone());
        self.steps += 1;
        Ok(outcome)
    }
}
