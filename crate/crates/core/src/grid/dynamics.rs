//! Lumped surrogate of post-fault voltage dynamics.
//!
//! Each bus carries a static load and a single-phase motor load. Reactive
//! demand of every bus depresses the algebraic voltage target through a
//! fixed, diagonally dominant sensitivity matrix; bus voltages relax toward
//! that target with a first-order lag. Motors held below the stall voltage
//! for the stall time lock and draw far more reactive power, which is what
//! keeps voltages depressed after the fault clears.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const V_MIN: f64 = 0.0;
pub const V_MAX: f64 = 1.3;

/// Load state of one bus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusLoadState {
    /// Initial static load, p.u. on the system base.
    pub static_load: f64,
    /// Initial motor load, p.u. on the system base.
    pub motor_load: f64,
    /// Share of the bus's motor load that is stalled, 0 or 1.
    pub stalled_fraction: f64,
    /// Remaining fraction of the initial bus load.
    pub remaining_fraction: f64,
    /// Time spent continuously below the stall voltage.
    pub stall_timer: f64,
}

impl BusLoadState {
    pub fn new(total_load: f64, motor_share: f64) -> Self {
        BusLoadState {
            static_load: total_load * (1.0 - motor_share),
            motor_load: total_load * motor_share,
            stalled_fraction: 0.0,
            remaining_fraction: 1.0,
            stall_timer: 0.0,
        }
    }

    pub fn initial_load(&self) -> f64 {
        self.static_load + self.motor_load
    }

    pub fn remaining_load(&self) -> f64 {
        self.remaining_fraction * self.initial_load()
    }

    pub fn is_stalled(&self) -> bool {
        self.stalled_fraction > 0.0
    }
}

/// Physical constants of the surrogate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    /// Reactive demand per unit static load.
    pub q_static: f64,
    /// Reactive demand per unit running motor load.
    pub q_run: f64,
    /// Reactive demand per unit stalled motor load.
    pub q_stall: f64,
    /// Share of each bus load that is motor load.
    pub motor_share: f64,
    pub stall_voltage: f64,
    pub stall_time: f64,
    /// Voltage lag time constant, seconds.
    pub tau_v: f64,
    /// Self-sensitivity of bus voltage to bus reactive demand.
    pub sensitivity_self: f64,
    /// Electrical length over which mutual sensitivity decays, in buses.
    pub sensitivity_length: f64,
    /// Voltage depression at the faulted bus, as a fraction of nominal.
    pub fault_depth: f64,
    /// Electrical length over which the fault depression decays, in buses.
    pub fault_spread: f64,
    /// Nominal profile shift per unit of (gen_scale - load_scale).
    pub gen_voltage_gain: f64,
    /// Amplitude of the bus-to-bus variation of the nominal profile.
    pub profile_spread: f64,
    /// Amplitude of the bus-to-bus variation of base loads.
    pub load_spread: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            q_static: 0.2,
            q_run: 0.4,
            q_stall: 6.0,
            motor_share: 0.33,
            stall_voltage: 0.5,
            stall_time: 0.05,
            tau_v: 0.15,
            sensitivity_self: 0.1,
            sensitivity_length: 0.7,
            fault_depth: 0.95,
            fault_spread: 2.0,
            gen_voltage_gain: 0.05,
            profile_spread: 0.02,
            load_spread: 0.25,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q_static", self.q_static),
            ("q_run", self.q_run),
            ("q_stall", self.q_stall),
            ("stall_voltage", self.stall_voltage),
            ("stall_time", self.stall_time),
            ("tau_v", self.tau_v),
            ("sensitivity_self", self.sensitivity_self),
            ("sensitivity_length", self.sensitivity_length),
            ("fault_spread", self.fault_spread),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("dynamics.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.motor_share) {
            return Err(Error::config("dynamics.motor_share must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fault_depth) {
            return Err(Error::config("dynamics.fault_depth must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.load_spread) {
            return Err(Error::config("dynamics.load_spread must be in [0, 1)"));
        }
        Ok(())
    }

    /// Row-major `k x k` sensitivity matrix on a radial line of buses.
    pub fn sensitivity_matrix(&self, k: usize) -> Vec<f64> {
        let mut s = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d = i.abs_diff(j) as f64;
                s[i * k + j] = self.sensitivity_self * (-d / self.sensitivity_length).exp();
            }
        }
        s
    }

    /// Base (unscaled) load of each bus, p.u.
    pub fn base_loads(&self, k: usize) -> Vec<f64> {
        (0..k)
            .map(|j| 1.0 + self.load_spread * (1.7 * j as f64 + 0.3).sin())
            .collect()
    }

    /// Pre-fault voltage profile for a loading condition.
    pub fn nominal_profile(&self, k: usize, load_scale: f64, gen_scale: f64) -> Vec<f64> {
        let shift = self.gen_voltage_gain * (gen_scale - load_scale);
        (0..k)
            .map(|i| {
                let phase = std::f64::consts::TAU * i as f64 / k as f64;
                1.0 + self.profile_spread * phase.cos() + shift
            })
            .collect()
    }

    /// Depth-weighted proximity of each bus to the faulted bus.
    pub fn fault_proximity(&self, k: usize, fault_bus: usize) -> Vec<f64> {
        (0..k)
            .map(|i| (-(i.abs_diff(fault_bus) as f64) / self.fault_spread).exp())
            .collect()
    }

    /// Reactive demand of one bus.
    pub fn reactive_demand(&self, bus: &BusLoadState) -> f64 {
        let running = 1.0 - bus.stalled_fraction;
        bus.remaining_fraction
            * (self.q_static * bus.static_load
                + self.q_run * running * bus.motor_load
                + self.q_stall * bus.stalled_fraction * bus.motor_load)
    }
}

/// Advances the stall timers by `dt` against the given voltages.
///
/// A bus whose voltage stays below the stall voltage for the stall time
/// stalls for good; the timer resets whenever the voltage recovers first.
pub fn motor_stall_update(
    voltages: &[f64],
    buses: &mut [BusLoadState],
    dt: f64,
    config: &DynamicsConfig,
) {
    for (bus, &v) in buses.iter_mut().zip(voltages) {
        if bus.is_stalled() {
            continue;
        }
        if v < config.stall_voltage {
            bus.stall_timer += dt;
            // Accumulated substeps land a few ulps either side of the limit.
            if bus.stall_timer >= config.stall_time - 1e-9 {
                bus.stalled_fraction = 1.0;
            }
        } else {
            bus.stall_timer = 0.0;
        }
    }
}

/// Voltage targets `V0 - S q` for the current load state.
pub fn voltage_targets(
    v_ref: &[f64],
    sensitivity: &[f64],
    buses: &[BusLoadState],
    config: &DynamicsConfig,
    out: &mut [f64],
) {
    let k = v_ref.len();
    let q: Vec<f64> = buses.iter().map(|b| config.reactive_demand(b)).collect();
    for i in 0..k {
        let row = &sensitivity[i * k..(i + 1) * k];
        let drop: f64 = row.iter().zip(&q).map(|(s, q)| s * q).sum();
        out[i] = v_ref[i] - drop;
    }
}

/// One explicit Euler step of the voltage lag, clamped to the valid range.
pub fn voltage_dynamics_update(
    voltages: &mut [f64],
    v_ref: &[f64],
    sensitivity: &[f64],
    buses: &[BusLoadState],
    dt: f64,
    config: &DynamicsConfig,
    time: f64,
) -> Result<()> {
    let mut target = vec![0.0; voltages.len()];
    voltage_targets(v_ref, sensitivity, buses, config, &mut target);
    let gain = dt / config.tau_v;
    for (v, vt) in voltages.iter_mut().zip(&target) {
        let next = *v + gain * (vt - *v);
        if !next.is_finite() {
            return Err(Error::Simulation {
                time,
                reason: "non-finite bus voltage".into(),
            });
        }
        *v = next.clamp(V_MIN, V_MAX);
    }
    Ok(())
}
