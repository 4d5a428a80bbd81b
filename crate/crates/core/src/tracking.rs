//! Circular-formation reference and the receding-horizon tracking controller.
//!
//! The tracker runs on the networked side and only ever sees the transmitted
//! (possibly fabricated) state. It has no hard safety constraints; keeping the
//! fleet apart is left to soft penalties here and to the local safety filter.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dynamics::{FleetInput, FleetState, RobotInput};
use crate::error::{Error, Result};
use crate::optimizer::{solve, NlpProblem, SoftPenalty, SolveStatus, SolverConfig, TrackingTerm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Circle radius [m].
    pub r0: f64,
    /// Angular rate [rad/s].
    pub w0: f64,
    /// Taken from the scenario's fleet size; not read from config files.
    #[serde(skip)]
    pub fleet_size: usize,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec {
            r0: 1.5,
            w0: 0.4,
            fleet_size: 20,
        }
    }
}

impl ReferenceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0 > 0.0 && self.r0.is_finite()) || !self.w0.is_finite() {
            return Err(Error::Config("reference radius must be positive and the rate finite".into()));
        }
        if self.fleet_size == 0 {
            return Err(Error::Config("reference fleet size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reference position of agent `i` (1-based) at time `t`.
pub fn reference(t: f64, i: usize, spec: &ReferenceSpec) -> Result<[f64; 2]> {
    if i == 0 || i > spec.fleet_size {
        return Err(Error::InvalidArgument(format!(
            "agent index {i} outside 1..={}",
            spec.fleet_size
        )));
    }
    let phase = spec.w0 * t + TAU / spec.fleet_size as f64 * (i - 1) as f64;
    Ok([spec.r0 * phase.sin(), spec.r0 * phase.cos()])
}

/// Mean distance between the fleet and its reference points at time `t`.
pub fn mean_tracking_error(x: &FleetState, t: f64, spec: &ReferenceSpec) -> Result<f64> {
    let mut total = 0.0;
    for (i, a) in x.agents.iter().enumerate() {
        let r = reference(t, i + 1, spec)?;
        total += (a.x - r[0]).hypot(a.y - r[1]);
    }
    Ok(total / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub horizon: usize,
    pub position_weight: f64,
    /// Weight on the deviation of every input from the circle's feedforward input.
    pub input_weight: f64,
    /// Weight of the squared-hinge penalty on separation and wall clearance.
    pub collision_weight: f64,
    /// Penalised band beyond `delta_a` and `delta_w` [m].
    pub collision_margin: f64,
    /// Taken from the scenario's sampling period; not read from config files.
    #[serde(skip)]
    pub dt: f64,
    /// L-BFGS iteration budget per command.
    pub max_iterations: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            horizon: 20,
            position_weight: 1.0,
            input_weight: 1e-2,
            collision_weight: 100.0,
            collision_margin: 0.1,
            dt: 0.02,
            max_iterations: 100,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_iterations == 0 {
            return Err(Error::Config("tracker horizon and iteration budget must be positive".into()));
        }
        let weights = [
            self.position_weight,
            self.input_weight,
            self.collision_weight,
            self.collision_margin,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("tracker weights must be finite and non-negative".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("tracker dt must be positive".into()));
        }
        Ok(())
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            max_outer_iterations: 1,
            max_inner_iterations: self.max_iterations,
            ..SolverConfig::default()
        }
    }
}

/// Input that keeps a unicycle on the reference circle: speed `r0 |w0|`,
/// turn rate `-w0` (the reference runs clockwise for `w0 > 0`).
pub fn feedforward_input(spec: &ReferenceSpec) -> RobotInput {
    RobotInput::new(spec.r0 * spec.w0.abs(), -spec.w0)
}

fn build_problem(
    x_a: &FleetState,
    t: f64,
    cfg: &TrackerConfig,
    spec: &ReferenceSpec,
    cs: &ConstraintSet,
) -> Result<NlpProblem> {
    if x_a.len() != spec.fleet_size {
        return Err(Error::InvalidArgument(format!(
            "state has {} agents, reference expects {}",
            x_a.len(),
            spec.fleet_size
        )));
    }
    let reference_rows = (1..=cfg.horizon)
        .map(|k| {
            let tk = t + k as f64 * cfg.dt;
            (1..=spec.fleet_size).map(|i| reference(tk, i, spec)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let feedforward = vec![FleetInput::new(vec![feedforward_input(spec); x_a.len()]); cfg.horizon];
    Ok(NlpProblem::new(x_a, cfg.horizon, cfg.dt, cs)?
        .with_target(&feedforward, &vec![cfg.input_weight; cfg.horizon])?
        .with_tracking(TrackingTerm {
            weight: cfg.position_weight,
            reference: reference_rows,
        })?
        .with_soft_penalty(SoftPenalty {
            weight: cfg.collision_weight,
            pair_threshold: cs.delta_a + cfg.collision_margin,
            wall_threshold: cs.delta_w + cfg.collision_margin,
        }))
}

/// Receding-horizon tracker with a warm-start cache.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    spec: ReferenceSpec,
    constraints: ConstraintSet,
    warm: Option<Vec<f64>>,
    last_status: Option<SolveStatus>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, spec: ReferenceSpec, constraints: ConstraintSet) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        constraints.validate()?;
        Ok(Tracker {
            cfg,
            spec,
            constraints,
            warm: None,
            last_status: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn reference_spec(&self) -> &ReferenceSpec {
        &self.spec
    }

    pub fn last_status(&self) -> Option<SolveStatus> {
        self.last_status
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.last_status = None;
    }

    /// First input of the tracking plan computed from `x_a` at time `t`.
    pub fn compute_command(&mut self, x_a: &FleetState, t: f64) -> Result<FleetInput> {
        if !x_a.is_finite() {
            return Err(Error::InvalidArgument("tracker state is not finite".into()));
        }
        let problem = build_problem(x_a, t, &self.cfg, &self.spec, &self.constraints)?;
        let width = 2 * x_a.len();
        let warm = self
            .warm
            .take()
            .filter(|w| w.len() == width * self.cfg.horizon)
            .map(|w| {
                // Shift by one step and repeat the last input.
                let mut shifted = w[width..].to_vec();
                shifted.extend_from_slice(&w[w.len() - width..]);
                shifted
            });
        let result = solve(&problem, warm.as_deref(), &self.cfg.solver())?;
        self.last_status = Some(result.status);
        let command = problem.decode(&result.z_star).swap_remove(0);
        self.warm = Some(result.z_star);
        Ok(command)
    }
}

/// Stateless variant of [`Tracker::compute_command`] (cold start).
pub fn compute_command(
    x_a: &FleetState,
    t: f64,
    cfg: &TrackerConfig,
    spec: &ReferenceSpec,
    cs: &ConstraintSet,
) -> Result<FleetInput> {
    Tracker::new(cfg.clone(), *spec, *cs)?.compute_command(x_a, t)
}
