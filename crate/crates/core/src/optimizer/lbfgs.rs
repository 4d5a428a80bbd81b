//! Projected limited-memory BFGS for smooth objectives over a box.

use std::collections::VecDeque;

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, Copy)]
pub(crate) struct InnerOutcome {
    pub iterations: usize,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|| P(z - g) - z ||_inf`, the first-order optimality measure on a box.
pub(crate) fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&zi, &gi), (&l, &h))| ((zi - gi).clamp(l, h) - zi).abs())
        .fold(0.0, f64::max)
}

struct Memory {
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl Memory {
    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = dot(&s, &y);
        if sy <= 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() || sy <= 0.0 {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion applied to `q` restricted to the free variables.
    fn apply(&self, q: &mut [f64], free: &[bool]) {
        let masked_dot = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .zip(free)
                .filter(|(_, &f)| f)
                .map(|((x, y), _)| x * y)
                .sum()
        };
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * masked_dot(s, q);
            for ((qi, yi), &f) in q.iter_mut().zip(y).zip(free) {
                if f {
                    *qi -= a * yi;
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let yy = masked_dot(y, y);
            let gamma = masked_dot(s, y) / yy;
            if yy > 0.0 && gamma > 0.0 && gamma.is_finite() {
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * masked_dot(y, q);
            for ((qi, si), &f) in q.iter_mut().zip(s).zip(free) {
                if f {
                    *qi += (a - b) * si;
                }
            }
        }
    }
}

/// Minimise `f` over `[lo, hi]` starting from `z` (clipped in place).
///
/// `eval(z, grad)` returns the objective value and overwrites `grad`.
pub(crate) fn minimize_box<F>(
    mut eval: F,
    z: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    max_iter: usize,
    tol: f64,
    memory: usize,
) -> InnerOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = z.len();
    for ((zi, &l), &h) in z.iter_mut().zip(lo).zip(hi) {
        *zi = zi.clamp(l, h);
    }
    let mut grad = vec![0.0; n];
    let mut value = eval(z, &mut grad);
    let mut mem = Memory {
        pairs: VecDeque::with_capacity(memory),
        capacity: memory.max(1),
    };
    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut free = vec![true; n];
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(z, &grad, lo, hi);

    while iterations < max_iter && pg > tol {
        iterations += 1;
        for i in 0..n {
            free[i] = !((z[i] <= lo[i] && grad[i] > 0.0) || (z[i] >= hi[i] && grad[i] < 0.0));
        }
        let mut accepted = false;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !mem.pairs.is_empty();
            for i in 0..n {
                dir[i] = if free[i] { grad[i] } else { 0.0 };
            }
            if use_memory {
                mem.apply(&mut dir, &free);
            }
            dir.iter_mut().for_each(|d| *d = -*d);
            let mut slope = dot(&dir, &grad);
            if slope >= 0.0 {
                if use_memory {
                    continue;
                }
                break;
            }
            let mut step = if use_memory {
                1.0
            } else {
                let gmax = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
                (1.0 / gmax).min(1.0)
            };
            for _ in 0..MAX_BACKTRACKS {
                for i in 0..n {
                    trial[i] = (z[i] + step * dir[i]).clamp(lo[i], hi[i]);
                }
                slope = (0..n).map(|i| grad[i] * (trial[i] - z[i])).sum::<f64>();
                let f_trial = eval(&trial, &mut trial_grad);
                if f_trial.is_finite() && f_trial <= value + ARMIJO * slope.min(0.0) {
                    let s: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
                    let y: Vec<f64> = (0..n).map(|i| trial_grad[i] - grad[i]).collect();
                    mem.push(s, y);
                    z.copy_from_slice(&trial);
                    grad.copy_from_slice(&trial_grad);
                    value = f_trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
            mem.pairs.clear();
        }
        pg = projected_gradient_norm(z, &grad, lo, hi);
        if !accepted {
            break;
        }
    }

    InnerOutcome { iterations }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock_unconstrained() {
        let mut z = vec![-1.2, 1.0];
        let out = minimize_box(
            |z, g| {
                let (a, b) = (z[0], z[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &mut z,
            &[-5.0, -5.0],
            &[5.0, 5.0],
            500,
            1e-9,
            8,
        );
        assert!((z[0] - 1.0).abs() < 1e-6 && (z[1] - 1.0).abs() < 1e-6, "{z:?} {out:?}");
    }

    #[test]
    fn box_active_quadratic() {
        // min (z0 - 3)^2 + (z1 + 0.5)^2 on [-2, 2]^2 -> (2, -0.5)
        let mut z = vec![0.0, 0.0];
        minimize_box(
            |z, g| {
                g[0] = 2.0 * (z[0] - 3.0);
                g[1] = 2.0 * (z[1] + 0.5);
                (z[0] - 3.0).powi(2) + (z[1] + 0.5).powi(2)
            },
            &mut z,
            &[-2.0, -2.0],
            &[2.0, 2.0],
            100,
            1e-12,
            5,
        );
        assert_eq!(z[0], 2.0);
        assert!((z[1] + 0.5).abs() < 1e-10);
    }
}
