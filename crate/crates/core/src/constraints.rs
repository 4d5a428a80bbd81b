//! Admissible set of the fleet: inter-agent separation, wall clearance and
//! input boxes, plus membership in the terminal rest set.

use serde::{Deserialize, Serialize};

use crate::dynamics::{FleetInput, FleetState, RobotInput};
use crate::error::{Error, Result};

/// Axis-aligned arena `[x_min, x_max] x [y_min, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arena {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for Arena {
    fn default() -> Self {
        Arena {
            x_min: -2.0,
            x_max: 2.0,
            y_min: -2.0,
            y_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSet {
    /// Minimum inter-agent distance [m].
    pub delta_a: f64,
    /// Minimum wall clearance [m].
    pub delta_w: f64,
    pub v_bounds: [f64; 2],
    pub omega_bounds: [f64; 2],
    pub arena: Arena,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            delta_a: 0.2,
            delta_w: 0.2,
            v_bounds: [-2.0, 2.0],
            omega_bounds: [-2.0, 2.0],
            arena: Arena::default(),
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.delta_a,
            self.delta_w,
            self.v_bounds[0],
            self.v_bounds[1],
            self.omega_bounds[0],
            self.omega_bounds[1],
            self.arena.x_min,
            self.arena.x_max,
            self.arena.y_min,
            self.arena.y_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("constraint set has non-finite entries".into()));
        }
        if self.delta_a <= 0.0 || self.delta_w <= 0.0 {
            return Err(Error::Config("delta_a and delta_w must be positive".into()));
        }
        if self.v_bounds[0] >= self.v_bounds[1] || self.omega_bounds[0] >= self.omega_bounds[1] {
            return Err(Error::Config("input bounds must satisfy min < max".into()));
        }
        let a = &self.arena;
        if a.x_max - a.x_min <= 2.0 * self.delta_w || a.y_max - a.y_min <= 2.0 * self.delta_w {
            return Err(Error::Config(
                "arena too small for the required wall clearance".into(),
            ));
        }
        Ok(())
    }

    pub fn input_ok(&self, u: &RobotInput) -> bool {
        u.v >= self.v_bounds[0]
            && u.v <= self.v_bounds[1]
            && u.omega >= self.omega_bounds[0]
            && u.omega <= self.omega_bounds[1]
    }

    /// Largest command magnitude per agent, used to normalise interventions.
    pub fn u_max(&self) -> RobotInput {
        RobotInput::new(
            self.v_bounds[0].abs().max(self.v_bounds[1].abs()),
            self.omega_bounds[0].abs().max(self.omega_bounds[1].abs()),
        )
    }

    pub fn clamp_input(&self, u: &RobotInput) -> RobotInput {
        RobotInput::new(
            u.v.clamp(self.v_bounds[0], self.v_bounds[1]),
            u.omega.clamp(self.omega_bounds[0], self.omega_bounds[1]),
        )
    }

    /// Signed distances from `(x, y)` to the walls `x_min`, `x_max`, `y_min`, `y_max`.
    #[inline]
    pub fn clearances(&self, x: f64, y: f64) -> [f64; 4] {
        let a = &self.arena;
        [x - a.x_min, a.x_max - x, y - a.y_min, a.y_max - y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub min_pairwise: f64,
    pub min_wall: f64,
    pub input_ok: bool,
    pub state_ok: bool,
    /// Zero-based agent indices `(i, j)` with `i < j` and their distance.
    pub violating_pairs: Vec<(usize, usize, f64)>,
}

/// Distances between all agent pairs `(i, j)`, `i < j`, on positions only.
pub fn pairwise_distances(x: &FleetState) -> Vec<(usize, usize, f64)> {
    let a = &x.agents;
    let mut out = Vec::with_capacity(a.len() * a.len().saturating_sub(1) / 2);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            out.push((i, j, (a[i].x - a[j].x).hypot(a[i].y - a[j].y)));
        }
    }
    out
}

/// Perpendicular distance of each agent to each of the four walls, in the
/// order `x_min`, `x_max`, `y_min`, `y_max` (wall index 1..=4). Negative
/// values mean the agent is outside the arena.
pub fn wall_clearances(x: &FleetState, c: &ConstraintSet) -> Vec<(usize, usize, f64)> {
    x.agents
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            c.clearances(s.x, s.y)
                .into_iter()
                .enumerate()
                .map(move |(j, d)| (i, j + 1, d))
        })
        .collect()
}

pub fn min_pairwise_distance(x: &FleetState) -> f64 {
    pairwise_distances(x)
        .into_iter()
        .map(|(_, _, d)| d)
        .fold(f64::INFINITY, f64::min)
}

pub fn min_wall_clearance(x: &FleetState, c: &ConstraintSet) -> f64 {
    x.agents
        .iter()
        .flat_map(|s| c.clearances(s.x, s.y))
        .fold(f64::INFINITY, f64::min)
}

pub fn check_admissible(x: &FleetState, u: &FleetInput, c: &ConstraintSet) -> AdmissibilityReport {
    let pairs = pairwise_distances(x);
    let min_pairwise = pairs.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let violating_pairs: Vec<_> = pairs.into_iter().filter(|p| p.2 < c.delta_a).collect();
    let min_wall = min_wall_clearance(x, c);
    AdmissibilityReport {
        min_pairwise,
        min_wall,
        input_ok: u.agents.iter().all(|a| c.input_ok(a)),
        state_ok: violating_pairs.is_empty() && min_wall >= c.delta_w,
        violating_pairs,
    }
}

/// State margins with slack `tol`: every pair at least `delta_a - tol` apart
/// and every wall clearance at least `delta_w - tol`.
pub fn state_within(x: &FleetState, c: &ConstraintSet, tol: f64) -> bool {
    min_pairwise_distance(x) >= c.delta_a - tol && min_wall_clearance(x, c) >= c.delta_w - tol
}

/// Membership in the terminal rest set: separated, clear of the walls, and
/// with zero translational velocity for every agent. `omega` is free since a
/// unicycle with `v = 0` does not move.
pub fn in_terminal_set(x: &FleetState, u_last: &FleetInput, c: &ConstraintSet, tol: f64) -> bool {
    state_within(x, c, tol) && u_last.agents.iter().all(|u| u.v.abs() <= tol)
}
