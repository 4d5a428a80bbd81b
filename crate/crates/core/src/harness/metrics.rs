use serde::{Deserialize, Serialize};

use crate::constraints::{min_pairwise_distance, min_wall_clearance, ConstraintSet};
use crate::dynamics::FleetState;
use crate::error::{Error, Result};
use crate::safety_filter::FilterMode;
use crate::tracking::{mean_tracking_error, ReferenceSpec};

/// The part of a step record that metrics depend on. Logs read back from CSV
/// carry no per-agent interventions.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub t: f64,
    pub x_true: FleetState,
    pub intervention: f64,
    pub agent_intervention: Option<Vec<f64>>,
    pub alarm: bool,
    pub min_pair: f64,
    pub min_wall: f64,
    pub mode: FilterMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryParams {
    pub reference: ReferenceSpec,
    pub pass_tol: f64,
    pub attack_window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub steps: usize,
    pub min_pair_distance: f64,
    pub min_wall_clearance: f64,
    pub max_intervention: f64,
    /// Maximal closed spans `[t_first, t_last]` of steps with intervention above `pass_tol`.
    pub intervention_intervals: Vec<[f64; 2]>,
    /// First time each agent's own command was corrected; empty when the log
    /// has no per-agent data.
    pub agent_intervention_onsets: Vec<Option<f64>>,
    pub first_alarm: Option<f64>,
    pub alarm_count: usize,
    pub pass_through_count: usize,
    pub modified_count: usize,
    pub fallback_count: usize,
    /// Mean tracking error over the second before the attack starts.
    pub pre_attack_tracking_error: Option<f64>,
    /// Mean tracking error over the last second of the run.
    pub final_tracking_error: f64,
    /// Time from the end of the attack until the tracking error is back
    /// within 10% of its pre-attack level.
    pub recovery_time: Option<f64>,
}

/// Mean tracking error over consecutive windows `[t0 + k w, t0 + (k+1) w)`
/// inside `[t0, t1)`.
pub fn window_means(rows: &[MetricRow], reference: &ReferenceSpec, t0: f64, t1: f64, width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0) || t1 <= t0 {
        return Err(Error::InvalidArgument("empty or degenerate window".into()));
    }
    let count = ((t1 - t0) / width - 1e-9).ceil().max(0.0) as usize;
    let mut sums = vec![(0.0, 0usize); count];
    for r in rows {
        if r.t + 1e-9 < t0 || r.t + 1e-9 >= t1 {
            continue;
        }
        let k = (((r.t - t0) / width) + 1e-9).floor() as usize;
        if k < count {
            sums[k].0 += mean_tracking_error(&r.x_true, r.t, reference)?;
            sums[k].1 += 1;
        }
    }
    Ok(sums.into_iter().filter(|s| s.1 > 0).map(|(s, c)| s / c as f64).collect())
}

pub fn summarize(rows: &[MetricRow], final_state: Option<&FleetState>, constraints: &ConstraintSet, params: &SummaryParams) -> Result<MetricsSummary> {
    let last = rows.last().ok_or_else(|| Error::InvalidArgument("empty log".into()))?;
    let mut min_pair = rows.iter().map(|r| r.min_pair).fold(f64::INFINITY, f64::min);
    let mut min_wall = rows.iter().map(|r| r.min_wall).fold(f64::INFINITY, f64::min);
    if let Some(x) = final_state {
        min_pair = min_pair.min(min_pairwise_distance(x));
        min_wall = min_wall.min(min_wall_clearance(x, constraints));
    }

    let mut intervals: Vec<[f64; 2]> = Vec::new();
    let mut open = false;
    for r in rows {
        if r.intervention > params.pass_tol {
            match (open, intervals.last_mut()) {
                (true, Some(span)) => span[1] = r.t,
                _ => intervals.push([r.t, r.t]),
            }
            open = true;
        } else {
            open = false;
        }
    }

    let agents = rows
        .iter()
        .map(|r| r.agent_intervention.as_ref().map(Vec::len))
        .collect::<Option<Vec<_>>>()
        .and_then(|lens| lens.first().copied());
    let agent_intervention_onsets = match agents {
        Some(n) => (0..n)
            .map(|i| {
                rows.iter()
                    .find(|r| r.agent_intervention.as_ref().is_some_and(|a| a[i] > params.pass_tol))
                    .map(|r| r.t)
            })
            .collect(),
        None => Vec::new(),
    };

    let count_mode = |m: FilterMode| rows.iter().filter(|r| r.mode == m).count();
    let error_between = |a: f64, b: f64| -> Result<Option<f64>> {
        let means = window_means(rows, &params.reference, a, b, b - a)?;
        Ok(means.first().copied())
    };
    let final_tracking_error = error_between((last.t - 1.0).max(0.0), last.t + 1e-6)?.unwrap_or(f64::NAN);

    let (pre_attack_tracking_error, recovery_time) = match params.attack_window {
        Some([start, end]) if start > 0.0 => {
            let pre = error_between((start - 1.0).max(0.0), start)?;
            let recovery = match pre {
                Some(level) => {
                    let mut found = None;
                    for r in rows.iter().filter(|r| r.t + 1e-9 >= end) {
                        if mean_tracking_error(&r.x_true, r.t, &params.reference)? <= 1.1 * level {
                            found = Some(r.t - end);
                            break;
                        }
                    }
                    found
                }
                None => None,
            };
            (pre, recovery)
        }
        _ => (None, None),
    };

    Ok(MetricsSummary {
        steps: rows.len(),
        min_pair_distance: min_pair,
        min_wall_clearance: min_wall,
        max_intervention: rows.iter().map(|r| r.intervention).fold(0.0, f64::max),
        intervention_intervals: intervals,
        agent_intervention_onsets,
        first_alarm: rows.iter().find(|r| r.alarm).map(|r| r.t),
        alarm_count: rows.iter().filter(|r| r.alarm).count(),
        pass_through_count: count_mode(FilterMode::PassThrough),
        modified_count: count_mode(FilterMode::Modified),
        fallback_count: count_mode(FilterMode::Fallback),
        pre_attack_tracking_error,
        final_tracking_error,
        recovery_time,
    })
}
