//! Step reward and the transient voltage recovery criterion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset after fault clearance from which the last criterion level applies
/// when checking a full trace.
pub const TVRC_FINAL_WINDOW: f64 = 1.5;

/// Weights of the per-step reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    /// Weight on the voltage-deficit term.
    pub c1: f64,
    /// Weight on shed load (p.u.).
    pub c2: f64,
    /// Weight on invalid shedding actions.
    pub c3: f64,
    /// Reward returned when the late-recovery check fails.
    pub penalty: f64,
    /// Seconds after clearance from which the final threshold is enforced.
    pub check_delay: f64,
    pub final_threshold: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            c1: 1.0,
            c2: 5.0,
            c3: 100.0,
            penalty: -10_000.0,
            check_delay: 4.0,
            final_threshold: 0.95,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.c3 >= 0.0) {
            return Err(Error::config("reward weights c1, c2, c3 must be nonnegative"));
        }
        if !(self.penalty < 0.0) {
            return Err(Error::config("reward penalty must be negative"));
        }
        if !(self.check_delay > 0.0) {
            return Err(Error::config("reward check_delay must be positive"));
        }
        if !(self.final_threshold > 0.0 && self.final_threshold <= 1.3) {
            return Err(Error::config("reward final_threshold must be in (0, 1.3]"));
        }
        Ok(())
    }
}

/// Piecewise-constant voltage recovery envelope, timed from fault clearance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionCurve {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Default for CriterionCurve {
    fn default() -> Self {
        CriterionCurve {
            v1: 0.7,
            v2: 0.8,
            v3: 0.9,
            t1: 0.33,
            t2: 0.5,
        }
    }
}

impl CriterionCurve {
    /// The stricter recovery levels 0.8, 0.9 and 0.95 p.u., whose last level
    /// matches the final voltage check.
    pub fn recovery_levels() -> Self {
        CriterionCurve {
            v1: 0.8,
            v2: 0.9,
            v3: 0.95,
            t1: 0.33,
            t2: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v1 < self.v2 && self.v2 < self.v3) {
            return Err(Error::config("criterion requires v1 < v2 < v3"));
        }
        if !(0.0 < self.t1 && self.t1 < self.t2) {
            return Err(Error::config("criterion requires 0 < t1 < t2"));
        }
        Ok(())
    }

    /// Threshold in force at time `t` for a fault cleared at `t_pf`.
    ///
    /// Before clearance there is no criterion and this returns 0.
    pub fn value_at(&self, t: f64, t_pf: f64) -> f64 {
        if t < t_pf {
            0.0
        } else if t < t_pf + self.t1 {
            self.v1
        } else if t < t_pf + self.t2 {
            self.v2
        } else {
            self.v3
        }
    }
}

/// Quantities of one control step that feed the reward.
#[derive(Debug, Clone, Copy)]
pub struct StepSummary<'a> {
    /// Time at the end of the step.
    pub time: f64,
    /// Fault clearance instant.
    pub t_pf: f64,
    /// Monitored voltages at the end of the step.
    pub voltages: &'a [f64],
    /// Load shed during the step, p.u.
    pub shed_pu: f64,
    /// Buses that were asked to shed with nothing left to shed.
    pub invalid_actions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReward {
    pub reward: f64,
    pub failed: bool,
}

/// Voltage deficit of one bus against the windowed envelope. Zero at or
/// before clearance.
pub fn voltage_deficit(v: f64, t: f64, t_pf: f64, criterion: &CriterionCurve) -> f64 {
    if t <= t_pf {
        return 0.0;
    }
    (v - criterion.value_at(t, t_pf)).min(0.0)
}

pub fn compute_reward(
    step: &StepSummary<'_>,
    weights: &RewardWeights,
    criterion: &CriterionCurve,
) -> StepReward {
    if step.time > step.t_pf + weights.check_delay
        && step.voltages.iter().any(|&v| v < weights.final_threshold)
    {
        return StepReward {
            reward: weights.penalty,
            failed: true,
        };
    }
    let deficit: f64 = step
        .voltages
        .iter()
        .map(|&v| voltage_deficit(v, step.time, step.t_pf, criterion))
        .sum();
    StepReward {
        reward: weights.c1 * deficit
            - weights.c2 * step.shed_pu
            - weights.c3 * step.invalid_actions as f64,
        failed: false,
    }
}

/// Checks a sampled voltage trace against the recovery envelope.
///
/// `trace` holds `(time, voltages)` samples. Comparisons are closed: a
/// voltage equal to the threshold passes.
pub fn check_tvrc<'a, I>(trace: I, t_pf: f64, criterion: &CriterionCurve) -> bool
where
    I: IntoIterator<Item = (f64, &'a [f64])>,
{
    trace.into_iter().all(|(t, voltages)| {
        let floor = if t >= t_pf + TVRC_FINAL_WINDOW {
            criterion.v3
        } else if t >= t_pf + criterion.t2 {
            criterion.v2
        } else if t >= t_pf + criterion.t1 {
            criterion.v1
        } else {
            return true;
        };
        voltages.iter().all(|&v| v >= floor)
    })
}
