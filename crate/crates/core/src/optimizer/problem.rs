use crate::constraints::ConstraintSet;
use crate::dynamics::{self, FleetInput, FleetState};
use crate::error::{Error, Result};

use super::{Multipliers, Nlp};

/// Quadratic pull of predicted positions towards reference points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingTerm {
    pub weight: f64,
    /// `reference[k - 1][i]` is the target position of agent `i` at predicted step `k`.
    pub reference: Vec<Vec<[f64; 2]>>,
}

/// Squared-hinge penalties on separation and wall clearance below the given thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftPenalty {
    pub weight: f64,
    pub pair_threshold: f64,
    pub wall_threshold: f64,
}

/// Fleet trajectory program over an `N`-step input sequence, with the
/// predicted states eliminated by rollout from `x0`.
///
/// Objective: `sum_k w_k ||U_k - T_k||^2`, optionally plus a tracking term and
/// soft penalties. Hard constraints (when enabled) are separation and wall
/// clearance at every predicted step `k = 1..=N`, and zero translational
/// velocity on the last input. Separation uses the smooth residual
/// `(d^2 - m^2) / (2 m)`, which agrees with `d - m` to first order at the
/// boundary and stays differentiable when two agents coincide.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    x0: Vec<[f64; 3]>,
    n_agents: usize,
    horizon: usize,
    dt: f64,
    constraint_set: ConstraintSet,
    lo: Vec<f64>,
    hi: Vec<f64>,
    target: Vec<f64>,
    target_weights: Vec<f64>,
    tracking: Option<TrackingTerm>,
    soft: Option<SoftPenalty>,
    /// Margin added to `delta_a` and `delta_w` when hard state constraints are on.
    state_tightening: Option<f64>,
    terminal_rest: bool,
}

impl NlpProblem {
    /// Unconstrained (box-only) problem with zero target and unit weights.
    pub fn new(x0: &FleetState, horizon: usize, dt: f64, constraint_set: &ConstraintSet) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        if x0.is_empty() || !x0.is_finite() {
            return Err(Error::InvalidProblem("initial state must be non-empty and finite".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidProblem(format!("invalid time step {dt}")));
        }
        let n = x0.len();
        let mut lo = Vec::with_capacity(2 * n * horizon);
        let mut hi = Vec::with_capacity(2 * n * horizon);
        for _ in 0..n * horizon {
            lo.extend([constraint_set.v_bounds[0], constraint_set.omega_bounds[0]]);
            hi.extend([constraint_set.v_bounds[1], constraint_set.omega_bounds[1]]);
        }
        Ok(NlpProblem {
            x0: dynamics::flatten_state(x0),
            n_agents: n,
            horizon,
            dt,
            constraint_set: *constraint_set,
            lo,
            hi,
            target: vec![0.0; 2 * n * horizon],
            target_weights: vec![1.0; horizon],
            tracking: None,
            soft: None,
            state_tightening: None,
            terminal_rest: false,
        })
    }

    /// The filter's least-deviation program: unit weight on the first input's
    /// deviation from `u_a`, `regularization` on later inputs (pulled towards
    /// zero), hard separation/clearance tightened by `tightening`, and the
    /// terminal rest condition.
    pub fn safety_filter(
        x0: &FleetState,
        u_a: &FleetInput,
        horizon: usize,
        dt: f64,
        constraint_set: &ConstraintSet,
        regularization: f64,
        tightening: f64,
    ) -> Result<Self> {
        let mut targets = vec![FleetInput::zeros(x0.len()); horizon];
        targets[0] = u_a.clone();
        let mut weights = vec![regularization; horizon];
        weights[0] = 1.0;
        Ok(Self::new(x0, horizon, dt, constraint_set)?
            .with_target(&targets, &weights)?
            .with_state_constraints(tightening)
            .with_terminal_rest())
    }

    pub fn with_target(mut self, targets: &[FleetInput], weights: &[f64]) -> Result<Self> {
        if targets.len() != self.horizon || weights.len() != self.horizon {
            return Err(Error::InvalidProblem("target sequence must span the horizon".into()));
        }
        if targets.iter().any(|t| t.len() != self.n_agents) {
            return Err(Error::InvalidProblem("target fleet size mismatch".into()));
        }
        self.target = dynamics::flatten_inputs(targets);
        self.target_weights = weights.to_vec();
        Ok(self)
    }

    pub fn with_tracking(mut self, term: TrackingTerm) -> Result<Self> {
        if term.reference.len() != self.horizon
            || term.reference.iter().any(|r| r.len() != self.n_agents)
        {
            return Err(Error::InvalidProblem("tracking reference must be horizon x agents".into()));
        }
        self.tracking = Some(term);
        Ok(self)
    }

    pub fn with_soft_penalty(mut self, soft: SoftPenalty) -> Self {
        self.soft = Some(soft);
        self
    }

    pub fn with_state_constraints(mut self, tightening: f64) -> Self {
        self.state_tightening = Some(tightening.max(0.0));
        self
    }

    pub fn with_terminal_rest(mut self) -> Self {
        self.terminal_rest = true;
        self
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn initial_state(&self) -> FleetState {
        FleetState::new(
            self.x0
                .iter()
                .map(|s| dynamics::RobotState::new(s[0], s[1], s[2]))
                .collect(),
        )
    }

    pub fn constraint_set(&self) -> &ConstraintSet {
        &self.constraint_set
    }

    pub fn encode(&self, inputs: &[FleetInput]) -> Vec<f64> {
        dynamics::flatten_inputs(inputs)
    }

    pub fn decode(&self, z: &[f64]) -> Vec<FleetInput> {
        dynamics::unflatten_inputs(z, self.n_agents)
    }

    fn pairs_per_step(&self) -> usize {
        self.n_agents * (self.n_agents - 1) / 2
    }

    fn ineq_per_step(&self) -> usize {
        self.pairs_per_step() + 4 * self.n_agents
    }

    fn rollout(&self, z: &[f64]) -> Vec<[f64; 3]> {
        let mut states = Vec::with_capacity((self.horizon + 1) * self.n_agents);
        dynamics::rollout_flat(&self.x0, z, self.horizon, self.dt, &mut states);
        states
    }

    /// Objective value; accumulates input and state partials when asked.
    fn objective_parts(
        &self,
        z: &[f64],
        states: &[[f64; 3]],
        mut derivs: Option<(&mut [[f64; 3]], &mut [f64])>,
    ) -> f64 {
        let n = self.n_agents;
        let mut value = 0.0;
        for k in 0..self.horizon {
            let w = self.target_weights[k];
            if w == 0.0 {
                continue;
            }
            for j in 2 * n * k..2 * n * (k + 1) {
                let d = z[j] - self.target[j];
                value += w * d * d;
                if let Some((_, grad)) = derivs.as_mut() {
                    grad[j] += 2.0 * w * d;
                }
            }
        }
        if let Some(track) = &self.tracking {
            for k in 1..=self.horizon {
                for i in 0..n {
                    let s = states[k * n + i];
                    let r = track.reference[k - 1][i];
                    let (ex, ey) = (s[0] - r[0], s[1] - r[1]);
                    value += track.weight * (ex * ex + ey * ey);
                    if let Some((sg, _)) = derivs.as_mut() {
                        sg[k * n + i][0] += 2.0 * track.weight * ex;
                        sg[k * n + i][1] += 2.0 * track.weight * ey;
                    }
                }
            }
        }
        if let Some(soft) = &self.soft {
            let cs = &self.constraint_set;
            for k in 1..=self.horizon {
                let row = &states[k * n..(k + 1) * n];
                for i in 0..n {
                    for j in i + 1..n {
                        let (dx, dy) = (row[i][0] - row[j][0], row[i][1] - row[j][1]);
                        let d = (dx * dx + dy * dy).sqrt();
                        let gap = soft.pair_threshold - d;
                        if gap > 0.0 {
                            value += soft.weight * gap * gap;
                            if let Some((sg, _)) = derivs.as_mut() {
                                if d > 1e-12 {
                                    let c = -2.0 * soft.weight * gap / d;
                                    sg[k * n + i][0] += c * dx;
                                    sg[k * n + i][1] += c * dy;
                                    sg[k * n + j][0] -= c * dx;
                                    sg[k * n + j][1] -= c * dy;
                                }
                            }
                        }
                    }
                    let clear = cs.clearances(row[i][0], row[i][1]);
                    for (wall, c) in clear.into_iter().enumerate() {
                        let gap = soft.wall_threshold - c;
                        if gap > 0.0 {
                            value += soft.weight * gap * gap;
                            if let Some((sg, _)) = derivs.as_mut() {
                                let (axis, sign) = wall_axis(wall);
                                sg[k * n + i][axis] += -2.0 * soft.weight * gap * sign;
                            }
                        }
                    }
                }
            }
        }
        value
    }

    fn constraint_values(&self, z: &[f64], states: &[[f64; 3]], ineq: &mut [f64], eq: &mut [f64]) {
        let n = self.n_agents;
        if let Some(tight) = self.state_tightening {
            let cs = &self.constraint_set;
            let m = cs.delta_a + tight;
            let scale = 0.5 / m;
            let mw = cs.delta_w + tight;
            let mut r = 0;
            for k in 1..=self.horizon {
                let row = &states[k * n..(k + 1) * n];
                for i in 0..n {
                    for j in i + 1..n {
                        let (dx, dy) = (row[i][0] - row[j][0], row[i][1] - row[j][1]);
                        ineq[r] = (dx * dx + dy * dy - m * m) * scale;
                        r += 1;
                    }
                }
                for s in row {
                    for c in cs.clearances(s[0], s[1]) {
                        ineq[r] = c - mw;
                        r += 1;
                    }
                }
            }
        }
        if self.terminal_rest {
            let base = 2 * n * (self.horizon - 1);
            for i in 0..n {
                eq[i] = z[base + 2 * i];
            }
        }
    }

    fn constraint_partials(&self, states: &[[f64; 3]], w_ineq: &[f64], w_eq: &[f64], sg: &mut [[f64; 3]], grad: &mut [f64]) {
        let n = self.n_agents;
        if let Some(tight) = self.state_tightening {
            let cs = &self.constraint_set;
            let scale = 0.5 / (cs.delta_a + tight);
            let mut r = 0;
            for k in 1..=self.horizon {
                let base = k * n;
                for i in 0..n {
                    for j in i + 1..n {
                        let w = w_ineq[r];
                        r += 1;
                        if w == 0.0 {
                            continue;
                        }
                        let dx = states[base + i][0] - states[base + j][0];
                        let dy = states[base + i][1] - states[base + j][1];
                        let c = 2.0 * scale * w;
                        sg[base + i][0] += c * dx;
                        sg[base + i][1] += c * dy;
                        sg[base + j][0] -= c * dx;
                        sg[base + j][1] -= c * dy;
                    }
                }
                for i in 0..n {
                    for wall in 0..4 {
                        let w = w_ineq[r];
                        r += 1;
                        if w != 0.0 {
                            let (axis, sign) = wall_axis(wall);
                            sg[base + i][axis] += w * sign;
                        }
                    }
                }
            }
        }
        if self.terminal_rest {
            let base = 2 * n * (self.horizon - 1);
            for i in 0..n {
                grad[base + 2 * i] += w_eq[i];
            }
        }
    }

    fn backprop(&self, z: &[f64], states: &[[f64; 3]], sg: &mut [[f64; 3]], grad: &mut [f64]) {
        dynamics::backprop_flat(states, z, self.n_agents, self.horizon, self.dt, sg, grad);
    }
}

/// Coordinate index and sign of `d clearance / d position` for wall `x_min`, `x_max`, `y_min`, `y_max`.
#[inline]
fn wall_axis(wall: usize) -> (usize, f64) {
    match wall {
        0 => (0, 1.0),
        1 => (0, -1.0),
        2 => (1, 1.0),
        _ => (1, -1.0),
    }
}

impl Nlp for NlpProblem {
    fn num_vars(&self) -> usize {
        2 * self.n_agents * self.horizon
    }

    fn num_ineq(&self) -> usize {
        if self.state_tightening.is_some() {
            self.ineq_per_step() * self.horizon
        } else {
            0
        }
    }

    fn num_eq(&self) -> usize {
        if self.terminal_rest {
            self.n_agents
        } else {
            0
        }
    }

    fn lower_bounds(&self) -> &[f64] {
        &self.lo
    }

    fn upper_bounds(&self) -> &[f64] {
        &self.hi
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let states = self.rollout(z);
        self.objective_parts(z, &states, None)
    }

    fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
        let states = self.rollout(z);
        let mut sg = vec![[0.0; 3]; states.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.objective_parts(z, &states, Some((&mut sg, grad)));
        self.backprop(z, &states, &mut sg, grad);
    }

    fn constraints(&self, z: &[f64], ineq: &mut [f64], eq: &mut [f64]) {
        let states = self.rollout(z);
        self.constraint_values(z, &states, ineq, eq);
    }

    fn constraints_vjp(&self, z: &[f64], w_ineq: &[f64], w_eq: &[f64], grad: &mut [f64]) {
        let states = self.rollout(z);
        let mut sg = vec![[0.0; 3]; states.len()];
        self.constraint_partials(&states, w_ineq, w_eq, &mut sg, grad);
        self.backprop(z, &states, &mut sg, grad);
    }

    fn merit(&self, z: &[f64], m: &Multipliers, grad: &mut [f64]) -> f64 {
        let states = self.rollout(z);
        let mut sg = vec![[0.0; 3]; states.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut value = self.objective_parts(z, &states, Some((&mut sg, grad)));
        if self.num_ineq() + self.num_eq() > 0 {
            let mut ineq = vec![0.0; self.num_ineq()];
            let mut eq = vec![0.0; self.num_eq()];
            self.constraint_values(z, &states, &mut ineq, &mut eq);
            let (penalty, w_ineq, w_eq) = m.penalty_terms(&ineq, &eq);
            value += penalty;
            self.constraint_partials(&states, &w_ineq, &w_eq, &mut sg, grad);
        }
        self.backprop(z, &states, &mut sg, grad);
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{min_pairwise_distance, state_within};
    use crate::dynamics::{rollout, RobotInput, RobotState};
    use crate::optimizer::{gradient_check, solve, SolveStatus, SolverConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const DT: f64 = 0.02;

    fn head_on() -> (FleetState, Vec<FleetInput>) {
        let x0 = FleetState::new(vec![RobotState::new(-0.15, 0.0, 0.0), RobotState::new(0.15, 0.0, PI)]);
        let target = vec![FleetInput::new(vec![RobotInput::new(2.0, 0.0); 2]); 3];
        (x0, target)
    }

    #[test]
    fn unconstrained_problem_returns_target() {
        let x0 = FleetState::new(vec![RobotState::new(0.0, 0.0, 0.3), RobotState::new(1.0, 0.0, 0.0)]);
        let target = vec![FleetInput::new(vec![RobotInput::new(0.4, -1.0), RobotInput::new(1.2, 0.5)]); 3];
        let p = NlpProblem::new(&x0, 3, DT, &ConstraintSet::default())
            .unwrap()
            .with_target(&target, &[1.0; 3])
            .unwrap();
        let r = solve(&p, None, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.objective < 1e-12);
        let want = p.encode(&target);
        for (a, b) in r.z_star.iter().zip(&want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn over_speed_target_is_clipped() {
        let x0 = FleetState::new(vec![RobotState::new(0.0, 0.0, 0.0)]);
        let target = vec![FleetInput::new(vec![RobotInput::new(3.0, 0.0)]); 2];
        let p = NlpProblem::new(&x0, 2, DT, &ConstraintSet::default())
            .unwrap()
            .with_target(&target, &[1.0; 2])
            .unwrap();
        let r = solve(&p, None, &SolverConfig::default()).unwrap();
        assert_eq!(r.z_star[0], 2.0);
        assert_eq!(r.z_star[2], 2.0);
    }

    #[test]
    fn head_on_pair_is_separated() {
        let (x0, target) = head_on();
        let cs = ConstraintSet::default();
        let p = NlpProblem::new(&x0, 3, DT, &cs)
            .unwrap()
            .with_target(&target, &[1.0; 3])
            .unwrap()
            .with_state_constraints(0.0)
            .with_terminal_rest();
        let cfg = SolverConfig::default();
        let r = solve(&p, None, &cfg).unwrap();
        assert!(r.status.is_feasible(), "{r:?}");
        assert!(r.max_ineq_violation <= 1e-6);
        let traj = rollout(&x0, &p.decode(&r.z_star), DT).unwrap();
        for s in &traj.states {
            assert!(min_pairwise_distance(s) >= 0.2 - 1e-6);
        }
        // Analytic optimum: four free velocities at 1.25 with the last pair at rest.
        assert!((r.objective - 10.25).abs() < 1e-3, "{}", r.objective);
    }

    #[test]
    fn static_pair_distance_gradient_is_unit_vector() {
        // Pair residual (d^2 - m^2)/(2m) has gradient (d/m) * unit vector; at d = m = 1 that is the unit vector.
        let x0 = FleetState::new(vec![RobotState::new(0.0, 0.0, 0.0), RobotState::new(0.6, 0.8, 0.0)]);
        let mut cs = ConstraintSet::default();
        cs.delta_a = 1.0;
        cs.arena = crate::constraints::Arena { x_min: -5.0, x_max: 5.0, y_min: -5.0, y_max: 5.0 };
        let p = NlpProblem::new(&x0, 1, DT, &cs).unwrap().with_state_constraints(0.0);
        let mut states = p.rollout(&vec![0.0; 4]);
        states.truncate(states.len());
        let mut w = vec![0.0; p.num_ineq()];
        w[0] = 1.0;
        let mut sg = vec![[0.0; 3]; states.len()];
        let mut grad = vec![0.0; 4];
        p.constraint_partials(&states, &w, &[], &mut sg, &mut grad);
        let g = sg[2];
        assert!((g[0] + 0.6).abs() < 1e-12 && (g[1] + 0.8).abs() < 1e-12, "{g:?}");
        assert!(gradient_check(&p, &[0.3, 0.1, -0.2, 0.4], 1e-6) <= 1e-6);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cs = ConstraintSet::default();
        for trial in 0..20 {
            let n = 2 + trial % 4;
            let x0 = FleetState::new(
                (0..n)
                    .map(|_| RobotState::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-PI..PI)))
                    .collect(),
            );
            let target = vec![
                FleetInput::new((0..n).map(|_| RobotInput::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect());
                3
            ];
            let reference = (0..3)
                .map(|_| (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
                .collect();
            let p = NlpProblem::new(&x0, 3, DT, &cs)
                .unwrap()
                .with_target(&target, &[1.0, 0.1, 0.1])
                .unwrap()
                .with_tracking(TrackingTerm { weight: 0.7, reference })
                .unwrap()
                .with_soft_penalty(SoftPenalty { weight: 3.0, pair_threshold: 5.0, wall_threshold: 5.0 })
                .with_state_constraints(1e-7)
                .with_terminal_rest();
            let z: Vec<f64> = (0..p.num_vars()).map(|_| rng.gen_range(-1.9..1.9)).collect();
            let err = gradient_check(&p, &z, 1e-6);
            assert!(err <= 1e-5, "trial {trial}: {err}");
        }
    }

    #[test]
    fn feasibility_certificate_holds_through_constraints_module() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cs = ConstraintSet::default();
        let cfg = SolverConfig::default();
        for _ in 0..10 {
            // Three agents on a small triangle heading inwards, attacked with full speed.
            let r0 = rng.gen_range(0.2..0.3);
            let phase = rng.gen_range(0.0..PI);
            let x0 = FleetState::new(
                (0..3)
                    .map(|i| {
                        let a = phase + 2.0 * PI * i as f64 / 3.0;
                        RobotState::new(r0 * a.cos(), r0 * a.sin(), a + PI)
                    })
                    .collect(),
            );
            let u_a = FleetInput::new(vec![RobotInput::new(2.0, 0.3); 3]);
            let p = NlpProblem::safety_filter(&x0, &u_a, 3, DT, &cs, 1e-6, 1e-7).unwrap();
            let r = solve(&p, None, &cfg).unwrap();
            if r.status == SolveStatus::Optimal {
                let inputs = p.decode(&r.z_star);
                let traj = rollout(&x0, &inputs, DT).unwrap();
                for s in &traj.states[1..] {
                    assert!(state_within(s, &cs, cfg.feas_tol));
                }
                assert!(inputs[2].agents.iter().all(|u| u.v.abs() <= cfg.feas_tol));
            }
        }
    }
}
