//! Unicycle kinematics for a single robot and for a stacked fleet.
//!
//! The discrete model is the explicit Euler map
//!
//! ```text
//! x' = x + dt * v * cos(theta)
//! y' = y + dt * v * sin(theta)
//! theta' = theta + dt * omega
//! ```
//!
//! Headings are never wrapped. The same map serves as plant, as prediction
//! model inside the filter, and as the detector's expectation model, so all
//! three evaluate bitwise-identical arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pose of one robot: position in metres and unwrapped heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RobotState {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        RobotState { x, y, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// Translational velocity `v` [m/s] and angular velocity `omega` [rad/s].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotInput {
    pub v: f64,
    pub omega: f64,
}

impl RobotInput {
    pub const ZERO: RobotInput = RobotInput { v: 0.0, omega: 0.0 };

    pub const fn new(v: f64, omega: f64) -> Self {
        RobotInput { v, omega }
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }
}

/// Stacked poses; index `i` is agent `i + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FleetState {
    pub agents: Vec<RobotState>,
}

impl FleetState {
    pub fn new(agents: Vec<RobotState>) -> Self {
        FleetState { agents }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.agents.iter().all(RobotState::is_finite)
    }

    /// Euclidean distance between two stacked state vectors (positions and headings).
    pub fn distance(&self, other: &FleetState) -> f64 {
        self.agents
            .iter()
            .zip(&other.agents)
            .map(|(a, b)| {
                let dx = a.x - b.x;
                let dy = a.y - b.y;
                let dt = a.theta - b.theta;
                dx * dx + dy * dy + dt * dt
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Stacked commands; index `i` is agent `i + 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FleetInput {
    pub agents: Vec<RobotInput>,
}

impl FleetInput {
    pub fn new(agents: Vec<RobotInput>) -> Self {
        FleetInput { agents }
    }

    pub fn zeros(n: usize) -> Self {
        FleetInput {
            agents: vec![RobotInput::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.agents.iter().all(RobotInput::is_finite)
    }

    /// Euclidean norm of the stacked difference `self - other`.
    pub fn distance(&self, other: &FleetInput) -> f64 {
        self.agents
            .iter()
            .zip(&other.agents)
            .map(|(a, b)| (a.v - b.v).powi(2) + (a.omega - b.omega).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `states[k + 1] = step_fleet(states[k], inputs[k], dt)` for a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub states: Vec<FleetState>,
    pub dt: f64,
}

impl StateTrajectory {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn initial(&self) -> &FleetState {
        &self.states[0]
    }

    pub fn terminal(&self) -> &FleetState {
        self.states.last().expect("trajectory has at least two states")
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time step must be positive and finite, got {dt}"
        )));
    }
    Ok(())
}

#[inline]
fn euler(s: &RobotState, u: &RobotInput, dt: f64) -> RobotState {
    let (sin, cos) = s.theta.sin_cos();
    RobotState {
        x: s.x + dt * u.v * cos,
        y: s.y + dt * u.v * sin,
        theta: s.theta + dt * u.omega,
    }
}

pub fn step_unicycle(s: &RobotState, u: &RobotInput, dt: f64) -> Result<RobotState> {
    check_dt(dt)?;
    if !s.is_finite() || !u.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite state {s:?} or input {u:?}"
        )));
    }
    Ok(euler(s, u, dt))
}

pub fn step_fleet(x: &FleetState, u: &FleetInput, dt: f64) -> Result<FleetState> {
    if x.len() != u.len() {
        return Err(Error::InvalidArgument(format!(
            "fleet has {} agents but {} inputs were given",
            x.len(),
            u.len()
        )));
    }
    let agents = x
        .agents
        .iter()
        .zip(&u.agents)
        .map(|(s, u)| step_unicycle(s, u, dt))
        .collect::<Result<Vec<_>>>()?;
    Ok(FleetState { agents })
}

pub fn rollout(x0: &FleetState, inputs: &[FleetInput], dt: f64) -> Result<StateTrajectory> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument(
            "rollout needs at least one input".into(),
        ));
    }
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for u in inputs {
        let next = step_fleet(states.last().unwrap(), u, dt)?;
        states.push(next);
    }
    Ok(StateTrajectory { states, dt })
}

// Flat-array kernels used by the optimizer. Decision vectors are laid out as
// `z[(k * n + i) * 2]` = v and `z[(k * n + i) * 2 + 1]` = omega for step k and
// agent i; states as `states[k * n + i]`.

pub(crate) fn rollout_flat(
    x0: &[[f64; 3]],
    z: &[f64],
    horizon: usize,
    dt: f64,
    states: &mut Vec<[f64; 3]>,
) {
    let n = x0.len();
    states.clear();
    states.extend_from_slice(x0);
    for k in 0..horizon {
        for i in 0..n {
            let s = states[k * n + i];
            let u = RobotInput::new(z[(k * n + i) * 2], z[(k * n + i) * 2 + 1]);
            let next = euler(&RobotState::new(s[0], s[1], s[2]), &u, dt);
            states.push([next.x, next.y, next.theta]);
        }
    }
}

/// Reverse accumulation through the Euler rollout.
///
/// `state_grad[k * n + i]` holds the partial derivatives of a scalar with
/// respect to the predicted states (consumed in place); the chained
/// derivative with respect to the inputs is added to `grad`.
pub(crate) fn backprop_flat(
    states: &[[f64; 3]],
    z: &[f64],
    n: usize,
    horizon: usize,
    dt: f64,
    state_grad: &mut [[f64; 3]],
    grad: &mut [f64],
) {
    for k in (0..horizon).rev() {
        for i in 0..n {
            let adj = state_grad[(k + 1) * n + i];
            let s = states[k * n + i];
            let v = z[(k * n + i) * 2];
            let (sin, cos) = s[2].sin_cos();
            grad[(k * n + i) * 2] += dt * (adj[0] * cos + adj[1] * sin);
            grad[(k * n + i) * 2 + 1] += dt * adj[2];
            let prev = &mut state_grad[k * n + i];
            prev[0] += adj[0];
            prev[1] += adj[1];
            prev[2] += adj[2] + dt * v * (adj[1] * cos - adj[0] * sin);
        }
    }
}

pub(crate) fn flatten_state(x: &FleetState) -> Vec<[f64; 3]> {
    x.agents.iter().map(|s| [s.x, s.y, s.theta]).collect()
}

pub(crate) fn flatten_inputs(inputs: &[FleetInput]) -> Vec<f64> {
    inputs
        .iter()
        .flat_map(|u| u.agents.iter().flat_map(|a| [a.v, a.omega]))
        .collect()
}

pub(crate) fn unflatten_inputs(z: &[f64], n: usize) -> Vec<FleetInput> {
    z.chunks(2 * n)
        .map(|step| FleetInput {
            agents: step.chunks(2).map(|c| RobotInput::new(c[0], c[1])).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    const DT: f64 = 0.02;

    #[test]
    fn straight_line_along_x() {
        let s = step_unicycle(&RobotState::new(0.0, 0.0, 0.0), &RobotInput::new(1.0, 0.0), DT)
            .unwrap();
        assert_eq!(s, RobotState::new(0.02, 0.0, 0.0));
    }

    #[test]
    fn straight_line_along_y() {
        let s = step_unicycle(
            &RobotState::new(0.0, 0.0, FRAC_PI_2),
            &RobotInput::new(1.0, 0.0),
            DT,
        )
        .unwrap();
        assert!(s.x.abs() <= 1e-15);
        assert!((s.y - 0.02).abs() <= 1e-15);
        assert_eq!(s.theta, FRAC_PI_2);
    }

    #[test]
    fn pure_rotation_keeps_position() {
        let s = step_unicycle(&RobotState::new(1.0, 1.0, 0.0), &RobotInput::new(0.0, 2.0), DT)
            .unwrap();
        assert_eq!(s, RobotState::new(1.0, 1.0, 0.04));
    }

    #[test]
    fn rejects_non_finite_and_bad_dt() {
        let s = RobotState::new(f64::NAN, 0.0, 0.0);
        assert!(step_unicycle(&s, &RobotInput::ZERO, DT).is_err());
        let u = RobotInput::new(f64::INFINITY, 0.0);
        assert!(step_unicycle(&RobotState::default(), &u, DT).is_err());
        assert!(step_unicycle(&RobotState::default(), &RobotInput::ZERO, 0.0).is_err());
    }

    #[test]
    fn fleet_size_mismatch() {
        let x = FleetState::new(vec![RobotState::default(); 2]);
        assert!(step_fleet(&x, &FleetInput::zeros(3), DT).is_err());
    }

    #[test]
    fn zero_input_two_agents_at_origin() {
        let x = FleetState::new(vec![RobotState::default(); 2]);
        assert_eq!(step_fleet(&x, &FleetInput::zeros(2), DT).unwrap(), x);
    }

    #[test]
    fn only_driven_agent_moves() {
        let x = FleetState::new(
            (0..20)
                .map(|i| RobotState::new(i as f64 * 0.1, -0.3, 0.1 * i as f64))
                .collect(),
        );
        let mut u = FleetInput::zeros(20);
        u.agents[0] = RobotInput::new(1.0, 0.0);
        let next = step_fleet(&x, &u, DT).unwrap();
        assert_ne!(next.agents[0], x.agents[0]);
        assert_eq!(next.agents[1..], x.agents[1..]);
    }

    #[test]
    fn rollout_cases() {
        let x0 = FleetState::new(vec![RobotState::new(0.3, -0.2, 1.0)]);
        let traj = rollout(&x0, &vec![FleetInput::zeros(1); 3], DT).unwrap();
        assert_eq!(traj.states.len(), 4);
        assert!(traj.states.iter().all(|s| *s == x0));

        let origin = FleetState::new(vec![RobotState::default()]);
        let u = FleetInput::new(vec![RobotInput::new(1.0, 0.0)]);
        let traj = rollout(&origin, &vec![u.clone(); 3], DT).unwrap();
        let xs: Vec<f64> = traj.states.iter().map(|s| s.agents[0].x).collect();
        let expected = [0.0, 0.02, 0.04, 0.06];
        for (a, b) in xs.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-15, "{xs:?}");
        }
        let one = rollout(&origin, std::slice::from_ref(&u), DT).unwrap();
        assert_eq!(one.states[1], step_fleet(&origin, &u, DT).unwrap());
        assert!(rollout(&origin, &[], DT).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let n = 3;
        let horizon = 4;
        let x0: Vec<[f64; 3]> = vec![[0.1, 0.2, 0.3], [-0.5, 0.4, 2.0], [1.0, -1.0, -1.2]];
        let z: Vec<f64> = (0..horizon * n * 2).map(|j| ((j as f64) * 0.37).sin()).collect();
        // scalar = sum over states of weights . state
        let weights: Vec<[f64; 3]> = (0..(horizon + 1) * n)
            .map(|j| [(j as f64).cos(), (j as f64 * 0.5).sin(), 0.3])
            .collect();
        let scalar = |z: &[f64]| {
            let mut states = Vec::new();
            rollout_flat(&x0, z, horizon, DT, &mut states);
            states
                .iter()
                .zip(&weights)
                .map(|(s, w)| s[0] * w[0] + s[1] * w[1] + s[2] * w[2])
                .sum::<f64>()
        };
        let mut states = Vec::new();
        rollout_flat(&x0, &z, horizon, DT, &mut states);
        let mut sg = weights.clone();
        let mut grad = vec![0.0; z.len()];
        backprop_flat(&states, &z, n, horizon, DT, &mut sg, &mut grad);
        let h = 1e-6;
        for j in 0..z.len() {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let fd = (scalar(&zp) - scalar(&zm)) / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-8, "component {j}: {fd} vs {}", grad[j]);
        }
    }

    fn fleet_strategy(n: usize) -> impl Strategy<Value = FleetState> {
        prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, -10.0..10.0f64), n)
            .prop_map(|v| FleetState::new(v.into_iter().map(|(x, y, t)| RobotState::new(x, y, t)).collect()))
    }

    fn inputs_strategy(n: usize, len: usize) -> impl Strategy<Value = Vec<FleetInput>> {
        prop::collection::vec(
            prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), n).prop_map(|v| {
                FleetInput::new(v.into_iter().map(|(a, b)| RobotInput::new(a, b)).collect())
            }),
            len,
        )
    }

    proptest! {
        #[test]
        fn rollout_composes(x0 in fleet_strategy(3), a in inputs_strategy(3, 2), b in inputs_strategy(3, 3)) {
            let mut all = a.clone();
            all.extend(b.iter().cloned());
            let whole = rollout(&x0, &all, DT).unwrap();
            let first = rollout(&x0, &a, DT).unwrap();
            let second = rollout(first.terminal(), &b, DT).unwrap();
            prop_assert_eq!(&whole.states[..3], &first.states[..]);
            prop_assert_eq!(&whole.states[2..], &second.states[..]);
        }

        #[test]
        fn zero_input_is_fixed_point(x in fleet_strategy(5)) {
            prop_assert_eq!(step_fleet(&x, &FleetInput::zeros(5), DT).unwrap(), x);
        }

        #[test]
        fn translation_equivariance(x0 in fleet_strategy(2), u in inputs_strategy(2, 4), c in -1.0..1.0f64) {
            let shifted = FleetState::new(x0.agents.iter().map(|s| RobotState::new(s.x + c, s.y, s.theta)).collect());
            let a = rollout(&x0, &u, DT).unwrap();
            let b = rollout(&shifted, &u, DT).unwrap();
            for (sa, sb) in a.states.iter().zip(&b.states) {
                for (ra, rb) in sa.agents.iter().zip(&sb.agents) {
                    prop_assert!((rb.x - ra.x - c).abs() <= 1e-12);
                    prop_assert_eq!(ra.y, rb.y);
                    prop_assert_eq!(ra.theta, rb.theta);
                }
            }
        }

        #[test]
        fn permutation_equivariance(x in fleet_strategy(4), u in inputs_strategy(4, 1)) {
            let perm = [2usize, 0, 3, 1];
            let xp = FleetState::new(perm.iter().map(|&p| x.agents[p]).collect());
            let up = FleetInput::new(perm.iter().map(|&p| u[0].agents[p]).collect());
            let next = step_fleet(&x, &u[0], DT).unwrap();
            let next_p = step_fleet(&xp, &up, DT).unwrap();
            for (slot, &p) in perm.iter().enumerate() {
                prop_assert_eq!(next_p.agents[slot], next.agents[p]);
            }
        }
    }
}
