//! Constrained least-deviation solver.
//!
//! Problems are posed as
//!
//! ```text
//! minimise f(z)  subject to  g(z) >= 0,  h(z) = 0,  lo <= z <= hi
//! ```
//!
//! and solved with an augmented-Lagrangian outer loop over `g` and `h` whose
//! subproblems are minimised by projected L-BFGS over the box. Fleet
//! trajectory problems eliminate the predicted states by rollout and supply
//! gradients by reverse accumulation through the Euler steps, see
//! [`NlpProblem`].

mod lbfgs;
mod problem;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use problem::{NlpProblem, SoftPenalty, TrackingTerm};

/// A smooth nonlinear program with box bounds.
pub trait Nlp {
    fn num_vars(&self) -> usize;
    fn num_ineq(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn lower_bounds(&self) -> &[f64];
    fn upper_bounds(&self) -> &[f64];

    fn objective(&self, z: &[f64]) -> f64;

    /// Overwrites `grad` with the objective gradient.
    fn objective_grad(&self, z: &[f64], grad: &mut [f64]);

    /// Writes the inequality residuals (`>= 0` when satisfied) and equality residuals.
    fn constraints(&self, z: &[f64], ineq: &mut [f64], eq: &mut [f64]);

    /// Adds `sum_i w_ineq[i] * grad g_i(z) + sum_j w_eq[j] * grad h_j(z)` to `grad`.
    fn constraints_vjp(&self, z: &[f64], w_ineq: &[f64], w_eq: &[f64], grad: &mut [f64]);

    /// Augmented-Lagrangian merit value; overwrites `grad` with its gradient.
    ///
    /// Implementors may override this to share work between the objective
    /// and constraint evaluations.
    fn merit(&self, z: &[f64], m: &Multipliers, grad: &mut [f64]) -> f64 {
        let mut ineq = vec![0.0; self.num_ineq()];
        let mut eq = vec![0.0; self.num_eq()];
        self.constraints(z, &mut ineq, &mut eq);
        let (value, w_ineq, w_eq) = m.penalty_terms(&ineq, &eq);
        self.objective_grad(z, grad);
        self.constraints_vjp(z, &w_ineq, &w_eq, grad);
        self.objective(z) + value
    }
}

/// Multiplier estimates and penalty parameter of the augmented Lagrangian.
#[derive(Debug, Clone)]
pub struct Multipliers {
    pub ineq: Vec<f64>,
    pub eq: Vec<f64>,
    pub penalty: f64,
}

impl Multipliers {
    /// Penalty value plus the constraint weights whose vector-Jacobian
    /// product gives the penalty gradient.
    pub fn penalty_terms(&self, ineq: &[f64], eq: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let mu = self.penalty;
        let mut value = 0.0;
        let w_ineq = ineq
            .iter()
            .zip(&self.ineq)
            .map(|(&g, &lam)| {
                let shifted = lam - mu * g;
                if shifted > 0.0 {
                    value += -lam * g + 0.5 * mu * g * g;
                    -shifted
                } else {
                    value += -0.5 * lam * lam / mu;
                    0.0
                }
            })
            .collect();
        let w_eq = eq
            .iter()
            .zip(&self.eq)
            .map(|(&h, &nu)| {
                value += nu * h + 0.5 * mu * h * h;
                nu + mu * h
            })
            .collect();
        (value, w_ineq, w_eq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub feas_tol: f64,
    pub stat_tol: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Multiplier estimates are clamped to `[-multiplier_bound, multiplier_bound]`.
    pub multiplier_bound: f64,
    pub lbfgs_memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            feas_tol: 1e-6,
            stat_tol: 1e-4,
            max_outer_iterations: 30,
            max_inner_iterations: 200,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e9,
            multiplier_bound: 1e8,
            lbfgs_memory: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feas_tol,
            self.stat_tol,
            self.initial_penalty,
            self.max_penalty,
            self.multiplier_bound,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("solver tolerances and penalties must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::Config("penalty growth must exceed 1".into()));
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 || self.lbfgs_memory == 0 {
            return Err(Error::Config("iteration limits and memory must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    FeasibleSuboptimal,
    Infeasible,
    IterationLimit,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::FeasibleSuboptimal => "feasible-suboptimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::IterationLimit => "iteration-limit",
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::FeasibleSuboptimal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub z_star: Vec<f64>,
    pub status: SolveStatus,
    pub objective: f64,
    pub max_ineq_violation: f64,
    pub max_eq_violation: f64,
    pub stationarity: f64,
    /// Inner (L-BFGS) iterations summed over all outer iterations.
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_clock_secs: f64,
}

struct Candidate {
    z: Vec<f64>,
    objective: f64,
    ineq_violation: f64,
    eq_violation: f64,
    stationarity: f64,
}

fn violations<P: Nlp + ?Sized>(p: &P, z: &[f64], ineq: &mut [f64], eq: &mut [f64]) -> (f64, f64) {
    p.constraints(z, ineq, eq);
    let vi = ineq.iter().fold(0.0f64, |m, &g| m.max(-g));
    let ve = eq.iter().fold(0.0f64, |m, &h| m.max(h.abs()));
    (vi, ve)
}

/// Stationarity of the Lagrangian `f - lam.g + nu.h` at `z`, measured by the
/// projected-gradient norm over the box.
fn lagrangian_stationarity<P: Nlp + ?Sized>(p: &P, z: &[f64], m: &Multipliers) -> f64 {
    let mut grad = vec![0.0; p.num_vars()];
    p.objective_grad(z, &mut grad);
    let w_ineq: Vec<f64> = m.ineq.iter().map(|l| -l).collect();
    p.constraints_vjp(z, &w_ineq, &m.eq, &mut grad);
    lbfgs::projected_gradient_norm(z, &grad, p.lower_bounds(), p.upper_bounds())
}

/// Solve `p` from `warm_start` (clipped to the box) or from the origin
/// projected onto the box.
pub fn solve<P: Nlp + ?Sized>(p: &P, warm_start: Option<&[f64]>, cfg: &SolverConfig) -> Result<SolveResult> {
    let started = Instant::now();
    cfg.validate()?;
    let n = p.num_vars();
    let (lo, hi) = (p.lower_bounds(), p.upper_bounds());
    if lo.len() != n || hi.len() != n || lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidProblem("inconsistent box bounds".into()));
    }
    let mut z: Vec<f64> = match warm_start {
        Some(w) if w.len() == n => w.to_vec(),
        Some(w) => {
            return Err(Error::InvalidProblem(format!(
                "warm start has {} entries, expected {n}",
                w.len()
            )))
        }
        None => vec![0.0; n],
    };
    for ((zi, &l), &h) in z.iter_mut().zip(lo).zip(hi) {
        *zi = zi.clamp(l, h);
    }

    let mut ineq = vec![0.0; p.num_ineq()];
    let mut eq = vec![0.0; p.num_eq()];
    let f0 = p.objective(&z);
    let (vi0, ve0) = violations(p, &z, &mut ineq, &mut eq);
    if !f0.is_finite() || ineq.iter().chain(&eq).any(|v| !v.is_finite()) {
        return Err(Error::InvalidProblem(
            "objective or constraints are not finite at the start point".into(),
        ));
    }

    let mut best: Option<Candidate> = None;
    let consider = |c: Candidate, best: &mut Option<Candidate>| {
        if c.ineq_violation <= cfg.feas_tol && c.eq_violation <= cfg.feas_tol {
            let better = match best {
                Some(b) => c.objective < b.objective,
                None => true,
            };
            if better {
                *best = Some(c);
            }
        }
    };
    let mut mult = Multipliers {
        ineq: vec![0.0; p.num_ineq()],
        eq: vec![0.0; p.num_eq()],
        penalty: cfg.initial_penalty,
    };
    // The warm start competes with every later iterate.
    consider(
        Candidate {
            z: z.clone(),
            objective: f0,
            ineq_violation: vi0,
            eq_violation: ve0,
            stationarity: lagrangian_stationarity(p, &z, &mult),
        },
        &mut best,
    );

    let inner_tol = (0.1 * cfg.stat_tol).max(1e-12);
    let mut total_inner = 0;
    let mut outer = 0;
    let mut prev_violation = f64::INFINITY;
    let mut status = SolveStatus::IterationLimit;
    let mut last = (f0, vi0, ve0, f64::INFINITY);
    let mut stalled = 0;

    while outer < cfg.max_outer_iterations {
        outer += 1;
        let inner = lbfgs::minimize_box(
            |z, g| p.merit(z, &mult, g),
            &mut z,
            lo,
            hi,
            cfg.max_inner_iterations,
            inner_tol,
            cfg.lbfgs_memory,
        );
        total_inner += inner.iterations;

        let (vi, ve) = violations(p, &z, &mut ineq, &mut eq);
        let mu = mult.penalty;
        for (lam, &g) in mult.ineq.iter_mut().zip(&ineq) {
            *lam = (*lam - mu * g).clamp(0.0, cfg.multiplier_bound);
        }
        for (nu, &h) in mult.eq.iter_mut().zip(&eq) {
            *nu = (*nu + mu * h).clamp(-cfg.multiplier_bound, cfg.multiplier_bound);
        }
        let stationarity = lagrangian_stationarity(p, &z, &mult);
        let f = p.objective(&z);
        if !f.is_finite() {
            break;
        }
        last = (f, vi, ve, stationarity);
        consider(
            Candidate {
                z: z.clone(),
                objective: f,
                ineq_violation: vi,
                eq_violation: ve,
                stationarity,
            },
            &mut best,
        );

        let violation = vi.max(ve);
        if violation <= cfg.feas_tol && stationarity <= cfg.stat_tol {
            status = SolveStatus::Optimal;
            break;
        }
        if violation > cfg.feas_tol && violation > 0.25 * prev_violation {
            if mult.penalty >= cfg.max_penalty {
                stalled += 1;
                if stalled >= 2 {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
            mult.penalty = (mult.penalty * cfg.penalty_growth).min(cfg.max_penalty);
        }
        prev_violation = violation;
    }

    // An unconverged, slightly infeasible final iterate is pulled back along
    // the segment towards the best feasible point found so far.
    let anchor = best.as_ref().map(|b| b.z.clone());
    if let (SolveStatus::IterationLimit | SolveStatus::Infeasible, Some(anchor)) = (status, anchor) {
        if last.1.max(last.2) > cfg.feas_tol && z.iter().all(|v| v.is_finite()) {
            let (mut lo_a, mut hi_a) = (0.0, 1.0);
            let mut trial = vec![0.0; n];
            let mut found = None;
            for _ in 0..30 {
                let a = 0.5 * (lo_a + hi_a);
                for i in 0..n {
                    trial[i] = anchor[i] + a * (z[i] - anchor[i]);
                }
                let (vi, ve) = violations(p, &trial, &mut ineq, &mut eq);
                if vi <= cfg.feas_tol && ve <= cfg.feas_tol {
                    lo_a = a;
                    found = Some((trial.clone(), vi, ve));
                } else {
                    hi_a = a;
                }
            }
            if let Some((zt, vi, ve)) = found {
                consider(
                    Candidate {
                        objective: p.objective(&zt),
                        stationarity: lagrangian_stationarity(p, &zt, &mult),
                        z: zt,
                        ineq_violation: vi,
                        eq_violation: ve,
                    },
                    &mut best,
                );
            }
        }
    }

    let (z_star, objective, vi, ve, stat, status) = match (status, best) {
        (SolveStatus::Optimal, Some(b)) => {
            // The converged point wins unless an earlier feasible candidate
            // (possibly the warm start) has a strictly lower objective.
            if b.objective < last.0 {
                (b.z, b.objective, b.ineq_violation, b.eq_violation, b.stationarity, SolveStatus::FeasibleSuboptimal)
            } else {
                (z, last.0, last.1, last.2, last.3, SolveStatus::Optimal)
            }
        }
        (_, Some(b)) => {
            let status = if b.stationarity <= cfg.stat_tol {
                SolveStatus::Optimal
            } else {
                SolveStatus::FeasibleSuboptimal
            };
            (b.z, b.objective, b.ineq_violation, b.eq_violation, b.stationarity, status)
        }
        (status, None) => (z, last.0, last.1, last.2, last.3, status),
    };

    Ok(SolveResult {
        z_star,
        status,
        objective,
        max_ineq_violation: vi,
        max_eq_violation: ve,
        stationarity: stat,
        iterations: total_inner,
        outer_iterations: outer,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Compare analytic gradients of the objective and of every constraint
/// residual against central finite differences with step `h`.
///
/// Returns the largest error `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradient_check<P: Nlp + ?Sized>(p: &P, z: &[f64], h: f64) -> f64 {
    let n = p.num_vars();
    let (mi, me) = (p.num_ineq(), p.num_eq());
    let rel = |a: f64, b: f64| (a - b).abs() / 1f64.max(a.abs()).max(b.abs());

    let mut worst = 0.0f64;
    let mut grad = vec![0.0; n];
    p.objective_grad(z, &mut grad);
    let mut zp = z.to_vec();
    for j in 0..n {
        zp[j] = z[j] + h;
        let fp = p.objective(&zp);
        zp[j] = z[j] - h;
        let fm = p.objective(&zp);
        zp[j] = z[j];
        worst = worst.max(rel(grad[j], (fp - fm) / (2.0 * h)));
    }

    // Numerical Jacobian, one column per variable.
    let mut jac = vec![0.0; (mi + me) * n];
    let (mut gp, mut ep) = (vec![0.0; mi], vec![0.0; me]);
    let (mut gm, mut em) = (vec![0.0; mi], vec![0.0; me]);
    for j in 0..n {
        zp[j] = z[j] + h;
        p.constraints(&zp, &mut gp, &mut ep);
        zp[j] = z[j] - h;
        p.constraints(&zp, &mut gm, &mut em);
        zp[j] = z[j];
        for r in 0..mi {
            jac[r * n + j] = (gp[r] - gm[r]) / (2.0 * h);
        }
        for r in 0..me {
            jac[(mi + r) * n + j] = (ep[r] - em[r]) / (2.0 * h);
        }
    }
    let mut w_ineq = vec![0.0; mi];
    let mut w_eq = vec![0.0; me];
    for r in 0..mi + me {
        w_ineq.iter_mut().for_each(|w| *w = 0.0);
        w_eq.iter_mut().for_each(|w| *w = 0.0);
        if r < mi {
            w_ineq[r] = 1.0;
        } else {
            w_eq[r - mi] = 1.0;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        p.constraints_vjp(z, &w_ineq, &w_eq, &mut grad);
        for j in 0..n {
            worst = worst.max(rel(grad[j], jac[r * n + j]));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min sum (z_i - t_i)^2 s.t. optional linear constraints, on a box.
    struct Quadratic {
        target: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        /// a.z >= b rows
        ineq: Vec<(Vec<f64>, f64)>,
        /// a.z = b rows
        eq: Vec<(Vec<f64>, f64)>,
        scale: f64,
    }

    impl Nlp for Quadratic {
        fn num_vars(&self) -> usize {
            self.target.len()
        }
        fn num_ineq(&self) -> usize {
            self.ineq.len()
        }
        fn num_eq(&self) -> usize {
            self.eq.len()
        }
        fn lower_bounds(&self) -> &[f64] {
            &self.lo
        }
        fn upper_bounds(&self) -> &[f64] {
            &self.hi
        }
        fn objective(&self, z: &[f64]) -> f64 {
            self.scale * z.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        }
        fn objective_grad(&self, z: &[f64], grad: &mut [f64]) {
            for ((g, a), b) in grad.iter_mut().zip(z).zip(&self.target) {
                *g = 2.0 * self.scale * (a - b);
            }
        }
        fn constraints(&self, z: &[f64], ineq: &mut [f64], eq: &mut [f64]) {
            let dot = |a: &[f64]| a.iter().zip(z).map(|(x, y)| x * y).sum::<f64>();
            for (r, (a, b)) in ineq.iter_mut().zip(&self.ineq) {
                *r = dot(a) - b;
            }
            for (r, (a, b)) in eq.iter_mut().zip(&self.eq) {
                *r = dot(a) - b;
            }
        }
        fn constraints_vjp(&self, _z: &[f64], wi: &[f64], we: &[f64], grad: &mut [f64]) {
            for (w, (a, _)) in wi.iter().zip(&self.ineq).chain(we.iter().zip(&self.eq)) {
                for (g, x) in grad.iter_mut().zip(a) {
                    *g += w * x;
                }
            }
        }
    }

    fn quad(target: Vec<f64>) -> Quadratic {
        let n = target.len();
        Quadratic {
            target,
            lo: vec![-2.0; n],
            hi: vec![2.0; n],
            ineq: vec![],
            eq: vec![],
            scale: 1.0,
        }
    }

    #[test]
    fn unconstrained_hits_target() {
        let p = quad(vec![0.5, -1.0, 1.5]);
        let r = solve(&p, None, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        for (a, b) in r.z_star.iter().zip(&p.target) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(r.objective < 1e-16);
    }

    #[test]
    fn target_outside_box_is_clipped() {
        let p = quad(vec![3.0, 0.0]);
        let r = solve(&p, None, &SolverConfig::default()).unwrap();
        assert_eq!(r.z_star[0], 2.0);
        assert!(r.z_star[1].abs() < 1e-9);
    }

    #[test]
    fn linear_constraints_kkt() {
        // min (z0-1)^2 + (z1-1)^2 s.t. z0 + z1 <= 1, z0 - z1 = 0.2
        let mut p = quad(vec![1.0, 1.0]);
        p.ineq.push((vec![-1.0, -1.0], -1.0));
        p.eq.push((vec![1.0, -1.0], 0.2));
        let cfg = SolverConfig::default();
        let r = solve(&p, None, &cfg).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "{r:?}");
        assert!((r.z_star[0] - 0.6).abs() < 1e-5 && (r.z_star[1] - 0.4).abs() < 1e-5, "{r:?}");
        assert!(r.max_ineq_violation <= cfg.feas_tol && r.max_eq_violation <= cfg.feas_tol);
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // z0 >= 3 on a box capped at 2
        let mut p = quad(vec![0.0]);
        p.ineq.push((vec![1.0], 3.0));
        let r = solve(&p, None, &SolverConfig::default()).unwrap();
        assert!(!r.status.is_feasible());
        assert!(r.max_ineq_violation > 0.5);
    }

    #[test]
    fn feasible_warm_start_is_never_beaten_by_worse_point() {
        let mut p = quad(vec![1.0, 1.0]);
        p.ineq.push((vec![-1.0, -1.0], -1.0));
        let warm = [0.5, 0.5];
        let f_warm = p.objective(&warm);
        let r = solve(&p, Some(&warm), &SolverConfig::default()).unwrap();
        assert!(r.objective <= f_warm + 1e-12);
    }

    #[test]
    fn truncated_run_is_pulled_back_to_feasibility() {
        // One outer iteration with a soft penalty ends outside z0 + z1 <= 1;
        // the result must still be feasible and beat the feasible warm start.
        let mut p = quad(vec![1.0, 1.0]);
        p.ineq.push((vec![-1.0, -1.0], -1.0));
        let cfg = SolverConfig {
            max_outer_iterations: 1,
            initial_penalty: 1.0,
            ..SolverConfig::default()
        };
        let warm = [0.0, 0.0];
        let r = solve(&p, Some(&warm), &cfg).unwrap();
        assert!(r.status.is_feasible(), "{r:?}");
        assert!(r.max_ineq_violation <= cfg.feas_tol);
        assert!(r.objective < p.objective(&warm) - 0.5, "{r:?}");
    }

    #[test]
    fn returned_warm_start_reports_finite_stationarity() {
        // The warm start is already optimal, so it wins every comparison.
        let mut p = quad(vec![0.25, 0.25]);
        p.ineq.push((vec![-1.0, -1.0], -1.0));
        let warm = [0.25, 0.25];
        let r = solve(&p, Some(&warm), &SolverConfig::default()).unwrap();
        assert_eq!(r.z_star, warm.to_vec());
        assert!(r.stationarity.is_finite() && r.stationarity <= 1e-12, "{r:?}");
    }

    #[test]
    fn objective_scaling_leaves_argmin() {
        let mut p = quad(vec![1.0, 1.0]);
        p.ineq.push((vec![-1.0, -2.0], -1.0));
        let a = solve(&p, None, &SolverConfig::default()).unwrap();
        p.scale = 7.5;
        let b = solve(&p, None, &SolverConfig::default()).unwrap();
        for (x, y) in a.z_star.iter().zip(&b.z_star) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn non_finite_start_is_invalid() {
        let mut p = quad(vec![0.0]);
        p.target[0] = f64::NAN;
        assert!(matches!(solve(&p, None, &SolverConfig::default()), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn gradient_check_exact_for_quadratics() {
        let mut p = quad(vec![0.3, -0.2, 0.1]);
        p.ineq.push((vec![1.0, 2.0, 3.0], 0.5));
        let err = gradient_check(&p, &[0.1, 0.2, -0.3], 1e-6);
        assert!(err <= 1e-9, "{err}");
    }
}
