//! Quick invariant checks runnable from a release binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::AttackKind;
use crate::constraints::{in_terminal_set, min_pairwise_distance, ConstraintSet};
use crate::dynamics::{rollout, step_unicycle, FleetInput, FleetState, RobotInput, RobotState};
use crate::harness::{run_scenario, ScenarioConfig};
use crate::optimizer::{gradient_check, NlpProblem};
use crate::safety_filter::{shift_backup, FilterConfig, FilterMode};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check { name, passed: true, detail },
        Err(detail) => Check { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_fleet(rng: &mut ChaCha8Rng, n: usize) -> FleetState {
    FleetState::new(
        (0..n)
            .map(|_| RobotState::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-3.0..3.0)))
            .collect(),
    )
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("unicycle step", || {
            let s = step_unicycle(&RobotState::new(0.0, 0.0, 0.0), &RobotInput::new(1.0, 0.0), 0.02).map_err(|e| e.to_string())?;
            ensure(s == RobotState::new(0.02, 0.0, 0.0), format!("{s:?}"))?;
            Ok("forward step matches".into())
        }),
        check("zero input is a fixed point", || {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let x = random_fleet(&mut rng, 5);
            let t = rollout(&x, &vec![FleetInput::zeros(5); 4], 0.02).map_err(|e| e.to_string())?;
            ensure(t.states.iter().all(|s| *s == x), "state moved")?;
            Ok("4 steps".into())
        }),
        check("gradient check", || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let cs = ConstraintSet::default();
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let n = rng.gen_range(2..=5);
                let x = random_fleet(&mut rng, n);
                let u = FleetInput::new((0..n).map(|_| RobotInput::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect());
                let p = NlpProblem::safety_filter(&x, &u, 3, 0.02, &cs, 1e-6, 0.0).map_err(|e| e.to_string())?;
                let z: Vec<f64> = (0..6 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                worst = worst.max(gradient_check(&p, &z, 1e-6));
            }
            ensure(worst <= 1e-5, format!("max error {worst:.3e}"))?;
            Ok(format!("max error {worst:.3e}"))
        }),
        check("filter certificate", || {
            let cfg = FilterConfig::default();
            let x = FleetState::new(vec![RobotState::new(-0.105, 0.0, 0.0), RobotState::new(0.105, 0.0, std::f64::consts::PI)]);
            let u = FleetInput::new(vec![RobotInput::new(2.0, 0.0); 2]);
            let out = crate::safety_filter::filter_step(&x, &u, None, &cfg, 0).map_err(|e| e.to_string())?;
            ensure(out.mode == FilterMode::Modified, format!("mode {:?}", out.mode))?;
            out.backup.validate(&cfg.constraints, 1e-6)?;
            let shifted = shift_backup(&out.backup).map_err(|e| e.to_string())?;
            shifted.validate(&cfg.constraints, 1e-6)?;
            ensure(
                in_terminal_set(shifted.states.terminal(), shifted.inputs.last().unwrap(), &cfg.constraints, 1e-6),
                "shifted backup does not end at rest",
            )?;
            let next = shifted.states.states[1].clone();
            ensure(min_pairwise_distance(&next) >= 0.2 - 1e-6, "separation lost")?;
            Ok(format!("intervention {:.3e}", out.intervention))
        }),
        check("short covert scenario", || {
            let mut cfg = ScenarioConfig::with_attack(AttackKind::Covert);
            cfg.fleet_size = 5;
            cfg.duration = 3.0;
            cfg.attack.window = [1.0, 2.0];
            let log = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let min_d = log.records.iter().map(|r| r.min_pair).fold(f64::INFINITY, f64::min);
            ensure(min_d >= 0.2 - 1e-6, format!("min separation {min_d}"))?;
            let inside = log.records.iter().filter(|r| r.step > 50 && r.step < 100);
            ensure(inside.clone().all(|r| r.residual == 0.0), "nonzero residual inside the window")?;
            ensure(log.records[100].alarm, "no alarm when the window closes")?;
            ensure(log.fallback_count() == 0, "fallback used")?;
            Ok(format!("min separation {min_d:.6}"))
        }),
    ]
}
