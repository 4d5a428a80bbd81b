//! Modular predictive safety filter for networked unicycle fleets, together
//! with the attack models, tracking controller, anomaly detector and
//! closed-loop harness used to exercise it.

pub mod adversary;
pub mod constraints;
pub mod detector;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod optimizer;
pub mod safety_filter;
pub mod selftest;
pub mod tracking;

pub use adversary::{Adversary, AttackKind, AttackSpec};
pub use constraints::{AdmissibilityReport, Arena, ConstraintSet};
pub use detector::{DetectorConfig, DetectorState};
pub use dynamics::{FleetInput, FleetState, RobotInput, RobotState, StateTrajectory};
pub use error::{Error, Result};
pub use harness::{run_scenario, MetricsSummary, ScenarioConfig, SimLog, StepRecord};
pub use optimizer::{NlpProblem, SolveResult, SolveStatus, SolverConfig};
pub use safety_filter::{BackupTrajectory, FilterConfig, FilterMode, FilterOutcome, SafetyFilter};
pub use tracking::{ReferenceSpec, Tracker, TrackerConfig};
