//! Action masks built from a voltage recovery criterion.
//!
//! A bus may shed only while its voltage is strictly below the criterion
//! threshold in force. Before fault clearance every bus may shed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CriterionCurve;
use crate::policy::CRITERION_OUTPUTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    #[default]
    None,
    /// Static criterion curve for the whole run.
    Fixed,
    /// Criterion read from the policy output every control step.
    Tam,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::None => "none",
            MaskMode::Fixed => "fixed",
            MaskMode::Tam => "tam",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "fixed" => Ok(MaskMode::Fixed),
            "tam" => Ok(MaskMode::Tam),
            other => Err(Error::config(format!(
                "unknown mask mode `{other}` (expected none, fixed or tam)"
            ))),
        }
    }
}

/// Closed interval for one criterion output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub const fn new(low: f64, high: f64) -> Self {
        Interval { low, high }
    }

    fn squash(&self, raw: f64) -> f64 {
        let s = 1.0 / (1.0 + (-raw).exp());
        self.low + (self.high - self.low) * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionBounds {
    pub v1: Interval,
    pub v2: Interval,
    pub v3: Interval,
    pub t1: Interval,
    pub t2: Interval,
}

impl Default for CriterionBounds {
    fn default() -> Self {
        CriterionBounds {
            v1: Interval::new(0.7, 0.85),
            v2: Interval::new(0.85, 0.92),
            v3: Interval::new(0.92, 0.96),
            t1: Interval::new(0.25, 0.4),
            t2: Interval::new(0.4, 0.6),
        }
    }
}

impl CriterionBounds {
    pub fn validate(&self) -> Result<()> {
        let all = [self.v1, self.v2, self.v3, self.t1, self.t2];
        if all.iter().any(|i| !(i.low < i.high) || !i.low.is_finite() || !i.high.is_finite()) {
            return Err(Error::config("criterion bounds need finite low < high"));
        }
        if !(self.v1.high <= self.v2.low && self.v2.high <= self.v3.low) {
            return Err(Error::config("voltage bound intervals must be ordered and disjoint"));
        }
        if !(self.t1.low > 0.0 && self.t1.high <= self.t2.low) {
            return Err(Error::config("time bound intervals must be positive, ordered and disjoint"));
        }
        Ok(())
    }
}

/// Maps raw policy outputs into the bound intervals with a logistic squash.
pub fn clamp_criterion(raw: &[f64; CRITERION_OUTPUTS], bounds: &CriterionBounds) -> CriterionCurve {
    CriterionCurve {
        v1: bounds.v1.squash(raw[0]),
        v2: bounds.v2.squash(raw[1]),
        v3: bounds.v3.squash(raw[2]),
        t1: bounds.t1.squash(raw[3]),
        t2: bounds.t2.squash(raw[4]),
    }
}

/// Threshold in force at `t`; `None` before clearance.
pub fn criterion_value_at(curve: &CriterionCurve, t: f64, t_pf: f64) -> Option<f64> {
    (t >= t_pf).then(|| curve.value_at(t, t_pf))
}

/// Writes a 0/1 mask into `out`. A missing threshold permits every bus.
pub fn build_mask(voltages: &[f64], threshold: Option<f64>, out: &mut Vec<f64>) {
    out.clear();
    match threshold {
        None => out.extend(std::iter::repeat_n(1.0, voltages.len())),
        Some(th) => out.extend(voltages.iter().map(|&v| if v < th { 1.0 } else { 0.0 })),
    }
}

pub fn apply_mask(actions: &mut [f64], mask: &[f64]) -> Result<()> {
    if actions.len() != mask.len() {
        return Err(Error::dim("mask", actions.len(), mask.len()));
    }
    actions.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
    Ok(())
}

/// Per-step masking for one episode.
#[derive(Debug, Clone)]
pub struct ActionMasker {
    mode: MaskMode,
    fixed: CriterionCurve,
    bounds: CriterionBounds,
    buf: Vec<f64>,
}

impl ActionMasker {
    pub fn new(mode: MaskMode, fixed: CriterionCurve, bounds: CriterionBounds) -> Self {
        ActionMasker {
            mode,
            fixed,
            bounds,
            buf: Vec::new(),
        }
    }

    pub fn mode(&self) -> MaskMode {
        self.mode
    }

    /// Masks `actions` in place given the voltages of the controllable buses.
    pub fn apply(
        &mut self,
        actions: &mut [f64],
        voltages: &[f64],
        criterion_raw: &[f64; CRITERION_OUTPUTS],
        t: f64,
        t_pf: f64,
    ) -> Result<()> {
        let curve = match self.mode {
            MaskMode::None => return Ok(()),
            MaskMode::Fixed => self.fixed,
            MaskMode::Tam => clamp_criterion(criterion_raw, &self.bounds),
        };
        build_mask(voltages, criterion_value_at(&curve, t, t_pf), &mut self.buf);
        apply_mask(actions, &self.buf)
    }
}
