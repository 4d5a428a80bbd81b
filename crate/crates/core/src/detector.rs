//! One-step residual anomaly detector on the networked side.
//!
//! The detector predicts the transmitted state from the previous transmitted
//! state and command with the nominal model and raises an alarm when the next
//! transmission deviates by at least `epsilon`. It is purely observational.

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_fleet, FleetInput, FleetState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub epsilon: f64,
    /// Include headings in the residual norm (positions only otherwise).
    pub include_heading: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            epsilon: 1e-6,
            include_heading: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("detector threshold must be positive".into()));
        }
        Ok(())
    }
}

/// `||x_a - x_c||` over the stacked state.
pub fn residual(x_a: &FleetState, x_c: &FleetState, include_heading: bool) -> f64 {
    x_a.agents
        .iter()
        .zip(&x_c.agents)
        .map(|(a, c)| {
            let mut s = (a.x - c.x).powi(2) + (a.y - c.y).powi(2);
            if include_heading {
                s += (a.theta - c.theta).powi(2);
            }
            s
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
pub struct DetectorState {
    cfg: DetectorConfig,
    dt: f64,
    prev: Option<(FleetState, FleetInput)>,
    history: Vec<bool>,
    residuals: Vec<f64>,
}

impl DetectorState {
    pub fn new(cfg: DetectorConfig, dt: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(DetectorState {
            cfg,
            dt,
            prev: None,
            history: Vec::new(),
            residuals: Vec::new(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Flags `a(t)` in processing order.
    pub fn history(&self) -> &[bool] {
        &self.history
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// Evaluates the transmitted state `x_a_now`. The first call has no
    /// prediction to compare against and returns `false` with residual 0.
    pub fn detect(&mut self, x_a_now: &FleetState) -> Result<bool> {
        let r = match &self.prev {
            None => 0.0,
            Some((x, u)) => residual(x_a_now, &step_fleet(x, u, self.dt)?, self.cfg.include_heading),
        };
        let flag = r >= self.cfg.epsilon;
        self.history.push(flag);
        self.residuals.push(r);
        Ok(flag)
    }

    /// Stores the pair `(x_a(t), u_c(t))` used to predict the next transmission.
    pub fn record(&mut self, x_a: &FleetState, u_c: &FleetInput) {
        self.prev = Some((x_a.clone(), u_c.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{RobotInput, RobotState};
    use proptest::prelude::*;

    const DT: f64 = 0.02;

    fn x0() -> FleetState {
        FleetState::new(vec![RobotState::new(0.5, -0.2, 1.0), RobotState::new(-1.0, 0.4, -0.3)])
    }

    fn u0() -> FleetInput {
        FleetInput::new(vec![RobotInput::new(1.2, -0.7), RobotInput::new(0.3, 2.0)])
    }

    #[test]
    fn first_sample_is_silent() {
        let mut d = DetectorState::new(DetectorConfig::default(), DT).unwrap();
        assert!(!d.detect(&x0()).unwrap());
        assert_eq!(d.residuals(), &[0.0]);
    }

    #[test]
    fn consistent_trace_has_exactly_zero_residual() {
        let mut d = DetectorState::new(DetectorConfig::default(), DT).unwrap();
        let mut x = x0();
        for _ in 0..100 {
            assert!(!d.detect(&x).unwrap());
            d.record(&x, &u0());
            x = step_fleet(&x, &u0(), DT).unwrap();
        }
        assert!(d.residuals().iter().all(|&r| r == 0.0));
        assert_eq!(d.history().len(), 100);
    }

    #[test]
    fn jump_raises_alarm() {
        let mut d = DetectorState::new(DetectorConfig::default(), DT).unwrap();
        d.detect(&x0()).unwrap();
        d.record(&x0(), &u0());
        let mut jumped = step_fleet(&x0(), &u0(), DT).unwrap();
        jumped.agents[1].y += 1e-5;
        assert!(d.detect(&jumped).unwrap());
        assert!((d.residuals()[1] - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn heading_option() {
        let a = x0();
        let mut b = x0();
        b.agents[0].theta += 0.5;
        assert_eq!(residual(&a, &b, true), 0.5);
        assert_eq!(residual(&a, &b, false), 0.0);
    }

    proptest! {
        #[test]
        fn threshold_monotonicity(offsets in proptest::collection::vec(0.0..1e-5f64, 1..30), e1 in 1e-7..1e-5f64, scale in 1.0..5.0f64) {
            let e2 = e1 * scale;
            let mut lo = DetectorState::new(DetectorConfig { epsilon: e1, ..Default::default() }, DT).unwrap();
            let mut hi = DetectorState::new(DetectorConfig { epsilon: e2, ..Default::default() }, DT).unwrap();
            let mut x = x0();
            for off in offsets {
                for d in [&mut lo, &mut hi] {
                    d.detect(&x).unwrap();
                    d.record(&x, &u0());
                }
                x = step_fleet(&x, &u0(), DT).unwrap();
                x.agents[0].x += off;
            }
            for (a, b) in lo.history().iter().zip(hi.history()) {
                prop_assert!(*a || !*b);
            }
        }
    }
}
