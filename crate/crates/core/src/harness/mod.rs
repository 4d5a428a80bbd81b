//! Closed-loop scenario runner.
//!
//! One step of the loop, in order: the adversary produces the transmitted
//! state from the true state, the detector checks it against its one-step
//! prediction, the tracker answers with `u_c`, the adversary rewrites the
//! command, the safety filter (if enabled) maps the true state and the
//! received command to `u_s`, and the plant advances.

mod export;
mod metrics;

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, AttackKind, AttackSpec};
use crate::constraints::{min_pairwise_distance, min_wall_clearance, ConstraintSet};
use crate::detector::{DetectorConfig, DetectorState};
use crate::dynamics::{step_fleet, FleetInput, FleetState, RobotState};
use crate::error::{Error, Result};
use crate::optimizer::SolverConfig;
use crate::safety_filter::{BackupTrajectory, FilterConfig, FilterMode, SafetyFilter, SolverStats};
use crate::tracking::{mean_tracking_error, ReferenceSpec, Tracker, TrackerConfig};

pub use export::{csv_header, read_csv, read_json, write_csv, write_json, CsvLog, CsvRow, ExportFormat, JsonDocument};
pub use metrics::{summarize, window_means, MetricRow, MetricsSummary, SummaryParams};

/// How the fleet is placed at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialConditions {
    /// Equally spaced on a circle, agent `i` next to its own reference
    /// point, all facing the origin.
    Ring {
        #[serde(default = "default_ring_radius")]
        radius: f64,
        /// Angular offset from the reference ordering [rad].
        #[serde(default = "default_ring_offset")]
        offset: f64,
        /// Uniform jitter half-width on positions [m] and headings [rad],
        /// drawn from the scenario seed.
        #[serde(default)]
        jitter: f64,
    },
    /// One `[x, y, theta]` row per agent.
    Explicit { states: Vec<[f64; 3]> },
}

fn default_ring_radius() -> f64 {
    1.8
}

fn default_ring_offset() -> f64 {
    PI / 20.0
}

impl Default for InitialConditions {
    fn default() -> Self {
        InitialConditions::Ring {
            radius: default_ring_radius(),
            offset: default_ring_offset(),
            jitter: 0.0,
        }
    }
}

impl InitialConditions {
    pub fn generate(&self, fleet_size: usize, seed: u64) -> Result<FleetState> {
        match self {
            InitialConditions::Ring { radius, offset, jitter } => {
                if !(radius.is_finite() && *radius > 0.0 && offset.is_finite() && jitter.is_finite() && *jitter >= 0.0) {
                    return Err(Error::Config("ring radius must be positive, offset and jitter finite".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut noise = || if *jitter > 0.0 { rng.gen_range(-*jitter..*jitter) } else { 0.0 };
                Ok(FleetState::new(
                    (0..fleet_size)
                        .map(|i| {
                            // Reference point i sits at polar angle pi/2 - 2 pi i / n.
                            let psi = PI / 2.0 - TAU * i as f64 / fleet_size as f64 + offset;
                            let (x, y) = (radius * psi.cos() + noise(), radius * psi.sin() + noise());
                            RobotState::new(x, y, psi + PI + noise())
                        })
                        .collect(),
                ))
            }
            InitialConditions::Explicit { states } => {
                if states.len() != fleet_size {
                    return Err(Error::Config(format!(
                        "{} explicit initial states for a fleet of {fleet_size}",
                        states.len()
                    )));
                }
                let x = FleetState::new(states.iter().map(|s| RobotState::new(s[0], s[1], s[2])).collect());
                if !x.is_finite() {
                    return Err(Error::Config("initial states must be finite".into()));
                }
                Ok(x)
            }
        }
    }
}

/// Filter settings other than horizon, sampling period, constraints and solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterTuning {
    pub pass_tol: f64,
    pub regularization: f64,
    pub tightening: f64,
}

impl Default for FilterTuning {
    fn default() -> Self {
        let f = FilterConfig::default();
        FilterTuning {
            pass_tol: f.pass_tol,
            regularization: f.regularization,
            tightening: f.tightening,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub fleet_size: usize,
    /// Scenario length [s].
    pub duration: f64,
    pub dt: f64,
    pub filter_horizon: usize,
    pub filter_enabled: bool,
    pub constraints: ConstraintSet,
    pub reference: ReferenceSpec,
    pub tracker: TrackerConfig,
    pub attack: AttackSpec,
    pub solver: SolverConfig,
    pub detector: DetectorConfig,
    pub filter_tuning: FilterTuning,
    pub initial_conditions: InitialConditions,
    /// Seeds initial-condition jitter only.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            fleet_size: 20,
            duration: 15.0,
            dt: 0.02,
            filter_horizon: 3,
            filter_enabled: true,
            constraints: ConstraintSet::default(),
            reference: ReferenceSpec::default(),
            tracker: TrackerConfig::default(),
            attack: AttackSpec::default(),
            solver: SolverConfig::default(),
            detector: DetectorConfig::default(),
            filter_tuning: FilterTuning::default(),
            initial_conditions: InitialConditions::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Default scenario with the given attack kind.
    pub fn with_attack(kind: AttackKind) -> Self {
        let mut cfg = ScenarioConfig::default();
        cfg.attack.kind = kind;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.fleet_size == 0 {
            return Err(Error::Config("fleet_size must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite() && self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration and dt must be positive".into()));
        }
        let steps = self.duration / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::Config(format!(
                "duration {} is not an integer multiple of dt {}",
                self.duration, self.dt
            )));
        }
        self.filter_config().validate()?;
        self.reference_spec().validate()?;
        self.tracker_config().validate()?;
        self.attack.validate(self.duration)?;
        self.detector.validate()?;
        Ok(())
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            horizon: self.filter_horizon,
            dt: self.dt,
            constraints: self.constraints,
            pass_tol: self.filter_tuning.pass_tol,
            regularization: self.filter_tuning.regularization,
            tightening: self.filter_tuning.tightening,
            solver: self.solver.clone(),
        }
    }

    pub fn reference_spec(&self) -> ReferenceSpec {
        ReferenceSpec {
            fleet_size: self.fleet_size,
            ..self.reference
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            dt: self.dt,
            ..self.tracker.clone()
        }
    }

    pub fn initial_state(&self) -> Result<FleetState> {
        self.initial_conditions.generate(self.fleet_size, self.seed)
    }

    pub fn summary_params(&self) -> SummaryParams {
        SummaryParams {
            reference: self.reference_spec(),
            pass_tol: self.filter_tuning.pass_tol,
            attack_window: (self.attack.kind != AttackKind::None).then_some(self.attack.window),
        }
    }
}

/// Everything observed at one step. States are at time `t`, before `u_s`
/// is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub x_true: FleetState,
    pub x_a: FleetState,
    pub u_c: FleetInput,
    pub u_a: FleetInput,
    pub u_s: FleetInput,
    pub mode: FilterMode,
    pub intervention: f64,
    pub agent_intervention: Vec<f64>,
    /// Detector flag `a(t)`.
    pub alarm: bool,
    pub residual: f64,
    pub min_pair: f64,
    pub min_wall: f64,
    pub tracking_error: f64,
    pub solver: Option<SolverStats>,
    pub backup: Option<BackupTrajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLog {
    pub dt: f64,
    pub records: Vec<StepRecord>,
    /// State after the last step.
    pub final_state: FleetState,
}

impl SimLog {
    pub fn fleet_size(&self) -> usize {
        self.final_state.len()
    }

    pub fn fallback_count(&self) -> usize {
        self.records.iter().filter(|r| r.mode == FilterMode::Fallback).count()
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        self.records
            .iter()
            .map(|r| MetricRow {
                t: r.t,
                x_true: r.x_true.clone(),
                intervention: r.intervention,
                agent_intervention: Some(r.agent_intervention.clone()),
                alarm: r.alarm,
                min_pair: r.min_pair,
                min_wall: r.min_wall,
                mode: r.mode,
            })
            .collect()
    }
}

/// Runs a scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimLog> {
    run_scenario_with(cfg, |_| {})
}

/// Runs a scenario, handing every record to `observe` as it is produced.
pub fn run_scenario_with<F: FnMut(&StepRecord)>(cfg: &ScenarioConfig, mut observe: F) -> Result<SimLog> {
    cfg.validate()?;
    let cs = cfg.constraints;
    let spec = cfg.reference_spec();
    let mut x = cfg.initial_state()?;
    let (d0, w0) = (min_pairwise_distance(&x), min_wall_clearance(&x, &cs));
    if !(d0 > cs.delta_a && w0 > cs.delta_w) {
        return Err(Error::InitialInfeasibility(format!(
            "initial state is not strictly admissible (min separation {d0:.6}, min wall clearance {w0:.6})"
        )));
    }

    let mut tracker = Tracker::new(cfg.tracker_config(), spec, cs)?;
    let mut adversary = Adversary::new(cfg.attack.clone(), cs, cfg.dt);
    let mut detector = DetectorState::new(cfg.detector, cfg.dt)?;
    let mut filter = SafetyFilter::new(cfg.filter_config())?;

    let steps = cfg.num_steps();
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        let abort = |e: Error| match e {
            Error::InitialInfeasibility(m) if step == 0 => Error::InitialInfeasibility(m),
            Error::RuntimeAbort { .. } => e,
            other => Error::RuntimeAbort {
                step,
                reason: other.to_string(),
            },
        };

        let x_a = adversary.sensor(step, &x);
        let alarm = detector.detect(&x_a).map_err(abort)?;
        let residual = *detector.residuals().last().unwrap();
        let u_c = tracker.compute_command(&x_a, t).map_err(abort)?;
        detector.record(&x_a, &u_c);
        let u_a = adversary.actuation(step, &u_c, &x).map_err(abort)?;

        let (u_s, mode, intervention, agent_intervention, solver, backup) = if cfg.filter_enabled {
            let out = filter.step(&x, &u_a).map_err(abort)?;
            (out.u_s, out.mode, out.intervention, out.agent_intervention, out.solver, Some(out.backup))
        } else {
            let n = u_a.len();
            (u_a.clone(), FilterMode::Disabled, 0.0, vec![0.0; n], None, None)
        };

        let next = step_fleet(&x, &u_s, cfg.dt).map_err(abort)?;
        if !next.is_finite() {
            return Err(Error::RuntimeAbort {
                step,
                reason: "plant state became non-finite".into(),
            });
        }
        let record = StepRecord {
            step,
            t,
            min_pair: min_pairwise_distance(&x),
            min_wall: min_wall_clearance(&x, &cs),
            tracking_error: mean_tracking_error(&x, t, &spec)?,
            x_true: std::mem::replace(&mut x, next),
            x_a,
            u_c,
            u_a,
            u_s,
            mode,
            intervention,
            agent_intervention,
            alarm,
            residual,
            solver,
            backup,
        };
        observe(&record);
        records.push(record);
    }

    Ok(SimLog {
        dt: cfg.dt,
        records,
        final_state: x,
    })
}
