//! Attack models on the network channels between plant and tracker.
//!
//! Outside the attack window both channels are the identity. Inside it the
//! FDI attacker rewrites every command as `(v_max - v, -omega)` and leaves the
//! state alone; the covert attacker replaces the transmitted state by a
//! fabricated trajectory that follows the nominal model under the tracker's
//! own commands, while the plant receives pursuit inputs towards a target.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::dynamics::{step_fleet, FleetInput, FleetState, RobotInput};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Fdi,
    Covert,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fdi => "fdi",
            AttackKind::Covert => "covert",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "fdi" => Ok(AttackKind::Fdi),
            "covert" => Ok(AttackKind::Covert),
            other => Err(Error::Config(format!("unknown attack kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdiParams {
    /// Offset added to the negated speed. Defaults to the upper speed bound.
    pub v_max: f64,
    /// Additive sensor-channel perturbation `(dx, dy, dtheta)`; the built-in
    /// scenarios leave it at zero.
    pub state_offset: [f64; 3],
}

impl Default for FdiParams {
    fn default() -> Self {
        FdiParams {
            v_max: 2.0,
            state_offset: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovertParams {
    /// Point the attacker drives every agent towards.
    pub target: [f64; 2],
    /// Heading gain `K_omega`.
    pub heading_gain: f64,
    /// Forward speed while turning around (heading error beyond pi/2).
    pub creep_speed: f64,
}

impl Default for CovertParams {
    fn default() -> Self {
        CovertParams {
            target: [0.0, 0.0],
            heading_gain: 4.0,
            creep_speed: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Active for `t_start <= t < t_end` [s].
    pub window: [f64; 2],
    pub fdi: FdiParams,
    pub covert: CovertParams,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            window: [5.0, 10.0],
            fdi: FdiParams::default(),
            covert: CovertParams::default(),
        }
    }
}

impl AttackSpec {
    pub fn validate(&self, duration: f64) -> Result<()> {
        let [a, b] = self.window;
        let fits = self.kind == AttackKind::None || b <= duration;
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a < b && fits) {
            return Err(Error::Config(format!(
                "attack window [{a}, {b}) must satisfy 0 <= start < end <= duration ({duration})"
            )));
        }
        if !self.fdi.v_max.is_finite() || self.fdi.state_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("FDI parameters must be finite".into()));
        }
        let c = &self.covert;
        if !(c.heading_gain > 0.0 && c.heading_gain.is_finite())
            || !(c.creep_speed.is_finite() && c.creep_speed >= 0.0)
            || c.target.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Config("covert gains must be positive and the target finite".into()));
        }
        Ok(())
    }

    /// Window as step indices `[start, end)` for sampling period `dt`.
    pub fn window_steps(&self, dt: f64) -> (usize, usize) {
        let to_step = |t: f64| (t / dt).round().max(0.0) as usize;
        (to_step(self.window[0]), to_step(self.window[1]))
    }

    pub fn active(&self, step: usize, dt: f64) -> bool {
        let (a, b) = self.window_steps(dt);
        self.kind != AttackKind::None && a <= step && step < b
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// The FDI rewrite of a single command.
pub fn fdi_input(u: &RobotInput, v_max: f64) -> RobotInput {
    RobotInput::new(v_max - u.v, -u.omega)
}

/// Saturated greedy pursuit of `params.target` for every agent.
pub fn covert_attack_input(x_true: &FleetState, params: &CovertParams, cs: &ConstraintSet) -> FleetInput {
    let [tx, ty] = params.target;
    FleetInput::new(
        x_true
            .agents
            .iter()
            .map(|a| {
                let (dx, dy) = (tx - a.x, ty - a.y);
                if dx == 0.0 && dy == 0.0 {
                    return RobotInput::ZERO;
                }
                let err = wrap_angle(dy.atan2(dx) - a.theta);
                let v = if err.abs() <= FRAC_PI_2 {
                    cs.v_bounds[1] * err.cos()
                } else {
                    params.creep_speed
                };
                cs.clamp_input(&RobotInput::new(v, params.heading_gain * err))
            })
            .collect(),
    )
}

/// Fabricated trajectory maintained by the covert attacker.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovertState {
    pub x_a: Option<FleetState>,
}

impl CovertState {
    pub fn initialized(&self) -> bool {
        self.x_a.is_some()
    }
}

/// Advances the fabricated state with the command the tracker transmitted,
/// seeding it from `x_true_at_start` on first use.
pub fn covert_state_update(
    cs: &mut CovertState,
    u_c: &FleetInput,
    x_true_at_start: &FleetState,
    dt: f64,
) -> Result<FleetState> {
    let current = cs.x_a.get_or_insert_with(|| x_true_at_start.clone());
    let next = step_fleet(current, u_c, dt)?;
    *current = next.clone();
    Ok(next)
}

/// Stateful attacker for one scenario. Per step, call [`Adversary::sensor`]
/// first and [`Adversary::actuation`] once the tracker has answered.
#[derive(Debug, Clone)]
pub struct Adversary {
    spec: AttackSpec,
    constraints: ConstraintSet,
    dt: f64,
    covert: CovertState,
}

impl Adversary {
    pub fn new(spec: AttackSpec, constraints: ConstraintSet, dt: f64) -> Self {
        Adversary {
            spec,
            constraints,
            dt,
            covert: CovertState::default(),
        }
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn covert_state(&self) -> &CovertState {
        &self.covert
    }

    pub fn active(&self, step: usize) -> bool {
        self.spec.active(step, self.dt)
    }

    /// State transmitted to the tracker at `step`.
    pub fn sensor(&mut self, step: usize, x_true: &FleetState) -> FleetState {
        if !self.active(step) {
            self.covert.x_a = None;
            return x_true.clone();
        }
        match self.spec.kind {
            AttackKind::Covert => self.covert.x_a.get_or_insert_with(|| x_true.clone()).clone(),
            AttackKind::Fdi => {
                let [dx, dy, dth] = self.spec.fdi.state_offset;
                if dx == 0.0 && dy == 0.0 && dth == 0.0 {
                    return x_true.clone();
                }
                let mut x = x_true.clone();
                for a in &mut x.agents {
                    a.x += dx;
                    a.y += dy;
                    a.theta += dth;
                }
                x
            }
            AttackKind::None => x_true.clone(),
        }
    }

    /// Command delivered to the plant at `step`; advances the fabricated state.
    pub fn actuation(&mut self, step: usize, u_c: &FleetInput, x_true: &FleetState) -> Result<FleetInput> {
        if !self.active(step) {
            return Ok(u_c.clone());
        }
        match self.spec.kind {
            AttackKind::Covert => {
                covert_state_update(&mut self.covert, u_c, x_true, self.dt)?;
                Ok(covert_attack_input(x_true, &self.spec.covert, &self.constraints))
            }
            AttackKind::Fdi => Ok(FleetInput::new(
                u_c.agents.iter().map(|u| fdi_input(u, self.spec.fdi.v_max)).collect(),
            )),
            AttackKind::None => Ok(u_c.clone()),
        }
    }
}

/// One-shot attack map `(u_c, x) -> (u_a, x_a)` for a single step.
pub fn apply(
    spec: &AttackSpec,
    step: usize,
    dt: f64,
    u_c: &FleetInput,
    x_true: &FleetState,
    covert: &mut CovertState,
    constraints: &ConstraintSet,
) -> Result<(FleetInput, FleetState)> {
    let mut adv = Adversary {
        spec: spec.clone(),
        constraints: *constraints,
        dt,
        covert: std::mem::take(covert),
    };
    let x_a = adv.sensor(step, x_true);
    let u_a = adv.actuation(step, u_c, x_true)?;
    *covert = adv.covert;
    Ok((u_a, x_a))
}
