//! Operation scenarios: a power-flow condition crossed with a fault.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One operation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario_id: u64,
    /// Multiplier on every bus load.
    pub load_scale: f64,
    /// Multiplier on generation; shifts the pre-fault voltage profile.
    pub gen_scale: f64,
    pub fault_bus: usize,
    /// Seconds.
    pub fault_start: f64,
    /// Seconds.
    pub fault_duration: f64,
}

impl ScenarioSpec {
    /// Fault clearance instant.
    pub fn clearance_time(&self) -> f64 {
        self.fault_start + self.fault_duration
    }

    pub fn validate(&self, bus_count: usize) -> Result<()> {
        let id = self.scenario_id;
        if !(self.load_scale > 0.0 && self.load_scale.is_finite()) {
            return Err(Error::config(format!("scenario {id}: load_scale must be > 0")));
        }
        if !(self.gen_scale > 0.0 && self.gen_scale.is_finite()) {
            return Err(Error::config(format!("scenario {id}: gen_scale must be > 0")));
        }
        if !(self.fault_start >= 0.0) {
            return Err(Error::config(format!("scenario {id}: fault_start must be >= 0")));
        }
        if !(self.fault_duration > 0.0) {
            return Err(Error::config(format!("scenario {id}: fault_duration must be > 0")));
        }
        if self.fault_bus >= bus_count {
            return Err(Error::config(format!(
                "scenario {id}: fault bus {} outside 0..{bus_count}",
                self.fault_bus
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerFlowVariant {
    pub load_scale: f64,
    pub gen_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultTiming {
    pub start: f64,
    pub duration: f64,
}

/// Generator for a scenario set: every power-flow variant crossed with every
/// (fault bus, fault timing) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSetConfig {
    pub power_flows: Vec<PowerFlowVariant>,
    pub fault_buses: Vec<usize>,
    pub fault_timings: Vec<FaultTiming>,
    /// First scenario id; ids are assigned consecutively.
    #[serde(default)]
    pub id_offset: u64,
}

impl ScenarioSetConfig {
    /// Four power-flow conditions shaped like the benchmark's loading table.
    pub fn default_power_flows() -> Vec<PowerFlowVariant> {
        vec![
            PowerFlowVariant { load_scale: 1.0, gen_scale: 1.0 },
            PowerFlowVariant { load_scale: 1.2, gen_scale: 1.2 },
            PowerFlowVariant { load_scale: 1.35, gen_scale: 1.35 },
            PowerFlowVariant { load_scale: 1.5, gen_scale: 1.15 },
        ]
    }

    /// Desk-scale training set: 4 power flows x 3 fault buses = 12 scenarios.
    pub fn desk_training() -> Self {
        ScenarioSetConfig {
            power_flows: Self::default_power_flows(),
            fault_buses: vec![2, 5, 7],
            fault_timings: vec![FaultTiming { start: 1.0, duration: 0.1 }],
            id_offset: 0,
        }
    }

    /// Desk-scale held-out set: 4 power flows x 6 fault buses = 24 scenarios,
    /// three of the buses unseen in training and a shorter, earlier fault.
    pub fn desk_held_out() -> Self {
        ScenarioSetConfig {
            power_flows: Self::default_power_flows(),
            fault_buses: vec![2, 5, 7, 0, 4, 9],
            fault_timings: vec![FaultTiming { start: 0.5, duration: 0.08 }],
            id_offset: 1000,
        }
    }

    pub fn fault_variant_count(&self) -> usize {
        self.fault_buses.len() * self.fault_timings.len()
    }

    pub fn len(&self) -> usize {
        self.power_flows.len() * self.fault_variant_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Expands a scenario-set configuration, ordered by (power-flow index, fault
/// index). Fault variants are ordered bus-major, then timing.
pub fn build_scenario_set(config: &ScenarioSetConfig, bus_count: usize) -> Result<Vec<ScenarioSpec>> {
    if config.power_flows.is_empty() {
        return Err(Error::config("scenario set has no power-flow variants"));
    }
    if config.fault_buses.is_empty() || config.fault_timings.is_empty() {
        return Err(Error::config("scenario set has no fault variants"));
    }
    let mut out = Vec::with_capacity(config.len());
    let mut id = config.id_offset;
    for pf in &config.power_flows {
        for &bus in &config.fault_buses {
            for timing in &config.fault_timings {
                let spec = ScenarioSpec {
                    scenario_id: id,
                    load_scale: pf.load_scale,
                    gen_scale: pf.gen_scale,
                    fault_bus: bus,
                    fault_start: timing.start,
                    fault_duration: timing.duration,
                };
                spec.validate(bus_count)?;
                out.push(spec);
                id += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timing() -> Vec<FaultTiming> {
        vec![FaultTiming { start: 1.0, duration: 0.1 }]
    }

    #[test]
    fn benchmark_sized_sets() {
        let train = ScenarioSetConfig {
            power_flows: ScenarioSetConfig::default_power_flows(),
            fault_buses: (0..9).collect(),
            fault_timings: timing(),
            id_offset: 0,
        };
        assert_eq!(build_scenario_set(&train, 300).unwrap().len(), 36);

        let test = ScenarioSetConfig {
            fault_buses: (0..34).collect(),
            fault_timings: vec![FaultTiming { start: 0.5, duration: 0.08 }],
            ..train
        };
        assert_eq!(build_scenario_set(&test, 300).unwrap().len(), 136);
    }

    #[test]
    fn singleton_and_ordering() {
        let one = ScenarioSetConfig {
            power_flows: vec![PowerFlowVariant { load_scale: 1.0, gen_scale: 1.0 }],
            fault_buses: vec![3],
            fault_timings: timing(),
            id_offset: 7,
        };
        let set = build_scenario_set(&one, 10).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].scenario_id, 7);

        let set = build_scenario_set(&ScenarioSetConfig::desk_training(), 10).unwrap();
        assert_eq!(set.len(), 12);
        // Power-flow major.
        assert_eq!(set[0].load_scale, 1.0);
        assert_eq!(set[2].load_scale, 1.0);
        assert_eq!(set[3].load_scale, 1.2);
        assert_eq!(set[1].fault_bus, 5);
        assert_eq!(build_scenario_set(&ScenarioSetConfig::desk_held_out(), 10).unwrap().len(), 24);
    }

    #[test]
    fn empty_variants_rejected() {
        let mut c = ScenarioSetConfig::desk_training();
        c.fault_buses.clear();
        assert!(matches!(build_scenario_set(&c, 10), Err(Error::Config(_))));
        let mut c = ScenarioSetConfig::desk_training();
        c.power_flows.clear();
        assert!(build_scenario_set(&c, 10).is_err());
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut c = ScenarioSetConfig::desk_training();
        c.power_flows[0].load_scale = 0.0;
        assert!(build_scenario_set(&c, 10).is_err());
        let c = ScenarioSetConfig::desk_training();
        assert!(build_scenario_set(&c, 5).is_err());
    }
}
