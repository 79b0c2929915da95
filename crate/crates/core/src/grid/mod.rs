//! Desk-scale surrogate environment for fault-induced delayed voltage
//! recovery, with load shedding as the control.

mod dynamics;
mod reward;
mod scenario;

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use dynamics::{
    motor_stall_update, voltage_dynamics_update, voltage_targets, BusLoadState, DynamicsConfig,
    V_MAX, V_MIN,
};
pub use reward::{
    check_tvrc, compute_reward, voltage_deficit, CriterionCurve, RewardWeights, StepReward,
    StepSummary, TVRC_FINAL_WINDOW,
};
pub use scenario::{build_scenario_set, FaultTiming, PowerFlowVariant, ScenarioSetConfig, ScenarioSpec};

use crate::error::{Error, Result};
use crate::rng;

/// Largest shed fraction a single control step may request.
pub const MAX_SHED_FRACTION: f64 = 0.2;

/// Environment block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Buses in the surrogate; every bus is monitored and controllable.
    pub bus_count: usize,
    /// Episode length, seconds.
    pub horizon: f64,
    /// Control interval, seconds.
    pub control_interval: f64,
    /// Inner integration step, seconds.
    pub inner_step: f64,
    /// Standard deviation of additive observation noise on voltages.
    pub obs_noise: f64,
    /// Discount applied when summing step rewards into an episode return.
    pub gamma: f64,
    pub dynamics: DynamicsConfig,
    pub reward: RewardWeights,
    pub criterion: CriterionCurve,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            bus_count: 10,
            horizon: 10.0,
            control_interval: 0.1,
            inner_step: 0.005,
            obs_noise: 0.0,
            gamma: 1.0,
            dynamics: DynamicsConfig::default(),
            reward: RewardWeights::default(),
            criterion: CriterionCurve::default(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bus_count == 0 {
            return Err(Error::config("env.bus_count must be >= 1"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("env.horizon must be positive"));
        }
        if !(self.inner_step > 0.0 && self.inner_step <= 0.01) {
            return Err(Error::config("env.inner_step must be in (0, 0.01]"));
        }
        if !(self.control_interval >= self.inner_step) {
            return Err(Error::config("env.control_interval must be >= inner_step"));
        }
        let ratio = self.control_interval / self.inner_step;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::config(
                "env.control_interval must be a whole multiple of inner_step",
            ));
        }
        if !(self.obs_noise >= 0.0) {
            return Err(Error::config("env.obs_noise must be >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("env.gamma must be in (0, 1]"));
        }
        self.dynamics.validate()?;
        self.reward.validate()?;
        self.criterion.validate()
    }

    pub fn substeps(&self) -> usize {
        (self.control_interval / self.inner_step).round() as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.horizon / self.control_interval).round() as usize
    }
}

/// Immutable model data shared by every environment instance.
#[derive(Debug)]
pub struct GridModel {
    config: GridConfig,
    sensitivity: Vec<f64>,
    base_loads: Vec<f64>,
}

impl GridModel {
    pub fn new(config: GridConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let k = config.bus_count;
        Ok(Arc::new(GridModel {
            sensitivity: config.dynamics.sensitivity_matrix(k),
            base_loads: config.dynamics.base_loads(k),
            config,
        }))
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn bus_count(&self) -> usize {
        self.config.bus_count
    }

    pub fn sensitivity(&self) -> &[f64] {
        &self.sensitivity
    }
}

/// Observable state after a control step.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub time: f64,
    /// Per-bus voltage magnitude, p.u.
    pub voltages: Vec<f64>,
    /// Per-bus remaining load fraction.
    pub remaining_fractions: Vec<f64>,
    pub done: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub failed: bool,
    /// Load shed during the step, p.u.
    pub shed_pu: f64,
}

/// Voltages and stall flags at one inner integration step, as seen by the
/// stall logic.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstepRecord {
    pub time: f64,
    pub dt: f64,
    pub voltages: Vec<f64>,
    pub stalled: Vec<bool>,
}

/// One environment instance. Single-threaded; clone one per concurrent
/// evaluation.
#[derive(Debug, Clone)]
pub struct GridEnv {
    model: Arc<GridModel>,
    scenario: ScenarioSpec,
    buses: Vec<BusLoadState>,
    state: GridState,
    v_ref: Vec<f64>,
    fault_level: Vec<f64>,
    substep_index: usize,
    rng: ChaCha8Rng,
    substep_log: Option<Vec<SubstepRecord>>,
}

impl GridEnv {
    /// Creates an environment reset to `scenario` with the scenario's own
    /// episode seed.
    pub fn new(model: Arc<GridModel>, scenario: &ScenarioSpec) -> Result<Self> {
        Self::with_seed(model, scenario, 0)
    }

    pub fn with_seed(model: Arc<GridModel>, scenario: &ScenarioSpec, seed: u64) -> Result<Self> {
        let k = model.bus_count();
        let mut env = GridEnv {
            model,
            scenario: scenario.clone(),
            buses: Vec::with_capacity(k),
            state: GridState {
                time: 0.0,
                voltages: vec![0.0; k],
                remaining_fractions: vec![1.0; k],
                done: false,
                failed: false,
            },
            v_ref: vec![0.0; k],
            fault_level: vec![0.0; k],
            substep_index: 0,
            rng: rng::rng_for(&[rng::stream::EPISODE, scenario.scenario_id, seed]),
            substep_log: None,
        };
        env.reset_with_seed(scenario, seed)?;
        Ok(env)
    }

    pub fn model(&self) -> &Arc<GridModel> {
        &self.model
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }

    pub fn state(&self) -> &GridState {
        &self.state
    }

    pub fn buses(&self) -> &[BusLoadState] {
        &self.buses
    }

    pub fn clearance_time(&self) -> f64 {
        self.scenario.clearance_time()
    }

    /// Records every inner step's voltages and stall flags from now on.
    pub fn record_substeps(&mut self, on: bool) {
        self.substep_log = on.then(Vec::new);
    }

    pub fn take_substep_log(&mut self) -> Vec<SubstepRecord> {
        self.substep_log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn reset(&mut self, scenario: &ScenarioSpec) -> Result<&GridState> {
        self.reset_with_seed(scenario, 0)
    }

    /// Resets to the pre-fault equilibrium of `scenario`. The episode stream
    /// is keyed by the scenario id and `seed`.
    pub fn reset_with_seed(&mut self, scenario: &ScenarioSpec, seed: u64) -> Result<&GridState> {
        let k = self.model.bus_count();
        scenario.validate(k)?;
        let dyncfg = &self.model.config.dynamics;
        self.scenario = scenario.clone();
        self.buses = self
            .model
            .base_loads
            .iter()
            .map(|p| BusLoadState::new(p * scenario.load_scale, dyncfg.motor_share))
            .collect();

        let profile = dyncfg.nominal_profile(k, scenario.load_scale, scenario.gen_scale);
        // V0 is chosen so that the nominal profile is the fixed point of the
        // dynamics with every motor running and nothing shed.
        let mut drop = vec![0.0; k];
        voltage_targets(&vec![0.0; k], &self.model.sensitivity, &self.buses, dyncfg, &mut drop);
        for i in 0..k {
            self.v_ref[i] = profile[i] - drop[i];
        }
        let proximity = dyncfg.fault_proximity(k, scenario.fault_bus);
        for i in 0..k {
            self.fault_level[i] = profile[i] * (1.0 - dyncfg.fault_depth * proximity[i]);
        }

        self.state = GridState {
            time: 0.0,
            voltages: profile,
            remaining_fractions: vec![1.0; k],
            done: false,
            failed: false,
        };
        self.substep_index = 0;
        self.rng = rng::rng_for(&[rng::stream::EPISODE, scenario.scenario_id, seed]);
        if let Some(log) = self.substep_log.as_mut() {
            log.clear();
        }
        Ok(&self.state)
    }

    /// Observation vector: voltages followed by remaining load fractions.
    pub fn observation(&mut self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(2 * self.model.bus_count());
        self.observe_into(&mut obs);
        obs
    }

    pub fn observe_into(&mut self, obs: &mut Vec<f64>) {
        obs.clear();
        let noise = self.model.config.obs_noise;
        if noise > 0.0 {
            for &v in &self.state.voltages {
                let e: f64 = self.rng.sample(StandardNormal);
                obs.push(v + noise * e);
            }
        } else {
            obs.extend_from_slice(&self.state.voltages);
        }
        obs.extend_from_slice(&self.state.remaining_fractions);
    }

    fn fault_active(&self, t: f64) -> bool {
        let s = &self.scenario;
        t + 1e-9 >= s.fault_start && t + 1e-9 < s.fault_start + s.fault_duration
    }

    /// Applies per-bus shed fractions to the remaining load. Returns the
    /// shed amount in p.u. and the number of invalid requests.
    fn apply_shedding(&mut self, action: &[f64]) -> (f64, usize) {
        let mut shed = 0.0;
        let mut invalid = 0;
        for (bus, &f) in self.buses.iter_mut().zip(action) {
            if f > 0.0 {
                if bus.remaining_fraction == 0.0 {
                    invalid += 1;
                    continue;
                }
                let before = bus.remaining_fraction;
                bus.remaining_fraction = before * (1.0 - f);
                shed += (before - bus.remaining_fraction) * bus.initial_load();
            }
        }
        (shed, invalid)
    }

    /// Advances one control interval with the given shed fractions.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let k = self.model.bus_count();
        if self.state.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != k {
            return Err(Error::dim("step action", k, action.len()));
        }
        if action.iter().any(|a| a.is_nan()) {
            return Err(Error::NonFinite("step action"));
        }
        if let Some(bad) = action
            .iter()
            .find(|&&a| !(0.0..=MAX_SHED_FRACTION).contains(&a))
        {
            return Err(Error::config(format!(
                "shed fraction {bad} outside [0, {MAX_SHED_FRACTION}]"
            )));
        }
        let (shed_pu, invalid) = self.apply_shedding(action);
        self.advance()?;
        Ok(self.finish_step(shed_pu, invalid))
    }

    /// Sheds every bus's remaining load at once. Outside the control action
    /// bounds; used to establish the recovery envelope of a scenario.
    pub fn shed_everything(&mut self) -> f64 {
        let all = vec![1.0; self.model.bus_count()];
        self.apply_shedding(&all).0
    }

    fn advance(&mut self) -> Result<()> {
        let model = Arc::clone(&self.model);
        let cfg = &model.config;
        let dt = cfg.inner_step;
        for _ in 0..cfg.substeps() {
            let t = self.substep_index as f64 * dt;
            if self.fault_active(t) {
                self.state.voltages.copy_from_slice(&self.fault_level);
            }
            motor_stall_update(&self.state.voltages, &mut self.buses, dt, &cfg.dynamics);
            if let Some(log) = self.substep_log.as_mut() {
                log.push(SubstepRecord {
                    time: t,
                    dt,
                    voltages: self.state.voltages.clone(),
                    stalled: self.buses.iter().map(|b| b.is_stalled()).collect(),
                });
            }
            voltage_dynamics_update(
                &mut self.state.voltages,
                &self.v_ref,
                &model.sensitivity,
                &self.buses,
                dt,
                &cfg.dynamics,
                t,
            )?;
            self.substep_index += 1;
        }
        self.state.time = self.substep_index as f64 * dt;
        for (r, b) in self.state.remaining_fractions.iter_mut().zip(&self.buses) {
            *r = b.remaining_fraction;
        }
        Ok(())
    }

    fn finish_step(&mut self, shed_pu: f64, invalid: usize) -> StepOutcome {
        let cfg = &self.model.config;
        let r = compute_reward(
            &StepSummary {
                time: self.state.time,
                t_pf: self.scenario.clearance_time(),
                voltages: &self.state.voltages,
                shed_pu,
                invalid_actions: invalid,
            },
            &cfg.reward,
            &cfg.criterion,
        );
        self.state.failed = r.failed;
        self.state.done = r.failed || self.state.time >= cfg.horizon - 1e-9;
        StepOutcome {
            reward: r.reward,
            done: self.state.done,
            failed: r.failed,
            shed_pu,
        }
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    pub voltages: Vec<f64>,
    pub remaining: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub failed: bool,
}

impl TraceRow {
    pub fn from_state(state: &GridState, reward: f64) -> Self {
        TraceRow {
            time: state.time,
            voltages: state.voltages.clone(),
            remaining: state.remaining_fractions.clone(),
            reward,
            done: state.done,
            failed: state.failed,
        }
    }
}

/// Writes a trace as CSV: time, per-bus voltage, per-bus remaining fraction,
/// reward, done, failed.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map_or(0, |r| r.voltages.len());
    let mut header = vec!["time".to_string()];
    header.extend((0..k).map(|i| format!("v{i}")));
    header.extend((0..k).map(|i| format!("lambda{i}")));
    header.extend(["reward", "done", "failed"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![format!("{:.3}", r.time)];
        rec.extend(r.voltages.iter().map(|v| v.to_string()));
        rec.extend(r.remaining.iter().map(|v| v.to_string()));
        rec.push(r.reward.to_string());
        rec.push(u8::from(r.done).to_string());
        rec.push(u8::from(r.failed).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Smallest stall reactive multiplier from `candidates` for which every
/// scenario fails without control while shedding all load at clearance
/// still recovers.
pub fn calibrate_stall_multiplier(
    config: &GridConfig,
    scenarios: &[ScenarioSpec],
    candidates: &[f64],
) -> Result<Option<f64>> {
    for &q in candidates {
        let mut cfg = config.clone();
        cfg.dynamics.q_stall = q;
        let model = GridModel::new(cfg)?;
        let mut all_ok = true;
        for s in scenarios {
            let open = uncontrolled_rollout(&model, s)?;
            let shed = full_shed_rollout(&model, s)?;
            if !(open.failed && !open.tvrc_pass && shed.tvrc_pass && !shed.failed) {
                all_ok = false;
                break;
            }
        }
        if all_ok {
            return Ok(Some(q));
        }
    }
    Ok(None)
}

/// Summary of a scripted rollout.
#[derive(Debug, Clone)]
pub struct ScriptedRollout {
    pub total_reward: f64,
    pub failed: bool,
    pub tvrc_pass: bool,
    pub trace: Vec<TraceRow>,
}

fn scripted_rollout<F>(model: &Arc<GridModel>, scenario: &ScenarioSpec, mut policy: F) -> Result<ScriptedRollout>
where
    F: FnMut(&mut GridEnv) -> Vec<f64>,
{
    let mut env = GridEnv::new(Arc::clone(model), scenario)?;
    let mut trace = vec![TraceRow::from_state(env.state(), 0.0)];
    let mut total = 0.0;
    while !env.state().done {
        let action = policy(&mut env);
        let out = env.step(&action)?;
        total += out.reward;
        trace.push(TraceRow::from_state(env.state(), out.reward));
    }
    let failed = env.state().failed;
    let t_pf = scenario.clearance_time();
    let tvrc = !failed
        && check_tvrc(
            trace.iter().map(|r| (r.time, r.voltages.as_slice())),
            t_pf,
            &model.config.criterion,
        );
    Ok(ScriptedRollout {
        total_reward: total,
        failed,
        tvrc_pass: tvrc,
        trace,
    })
}

/// Rollout with no shedding at all.
pub fn uncontrolled_rollout(model: &Arc<GridModel>, scenario: &ScenarioSpec) -> Result<ScriptedRollout> {
    let k = model.bus_count();
    scripted_rollout(model, scenario, |_| vec![0.0; k])
}

/// Rollout that sheds every load at the first control instant at or after
/// fault clearance.
pub fn full_shed_rollout(model: &Arc<GridModel>, scenario: &ScenarioSpec) -> Result<ScriptedRollout> {
    let k = model.bus_count();
    let t_pf = scenario.clearance_time();
    let mut done = false;
    scripted_rollout(model, scenario, |env| {
        if !done && env.state().time + 1e-9 >= t_pf {
            env.shed_everything();
            done = true;
        }
        vec![0.0; k]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Arc<GridModel> {
        GridModel::new(GridConfig::default()).unwrap()
    }

    fn quiet_scenario() -> ScenarioSpec {
        ScenarioSpec {
            scenario_id: 1,
            load_scale: 1.0,
            gen_scale: 1.0,
            fault_bus: 4,
            fault_start: 100.0,
            fault_duration: 0.1,
        }
    }

    fn severe() -> ScenarioSpec {
        ScenarioSpec {
            scenario_id: 2,
            load_scale: 1.5,
            gen_scale: 1.15,
            fault_bus: 5,
            fault_start: 1.0,
            fault_duration: 0.1,
        }
    }

    #[test]
    fn reset_profile_within_band_and_deterministic() {
        let m = model();
        for pf in ScenarioSetConfig::default_power_flows() {
            let s = ScenarioSpec {
                load_scale: pf.load_scale,
                gen_scale: pf.gen_scale,
                ..quiet_scenario()
            };
            let env = GridEnv::new(m.clone(), &s).unwrap();
            assert!(env.state().voltages.iter().all(|v| (0.95..=1.05).contains(v)));
            let again = GridEnv::new(m.clone(), &s).unwrap();
            assert_eq!(env.state(), again.state());
        }
    }

    #[test]
    fn zero_load_scale_rejected() {
        let s = ScenarioSpec {
            load_scale: 0.0,
            ..quiet_scenario()
        };
        assert!(GridEnv::new(model(), &s).is_err());
    }

    #[test]
    fn equilibrium_holds_without_fault() {
        let mut env = GridEnv::new(model(), &quiet_scenario()).unwrap();
        let v0 = env.state().voltages.clone();
        let k = v0.len();
        let mut steps = 0;
        while !env.state().done {
            let out = env.step(&vec![0.0; k]).unwrap();
            assert_eq!(out.reward, 0.0);
            let dev = env
                .state()
                .voltages
                .iter()
                .zip(&v0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-6, "deviation {dev}");
            steps += 1;
        }
        assert_eq!(steps, 100);
        assert!(!env.state().failed);
    }

    #[test]
    fn shedding_scales_remaining_fraction() {
        let mut env = GridEnv::new(model(), &quiet_scenario()).unwrap();
        let k = env.model().bus_count();
        let mut a = vec![0.0; k];
        a[3] = 0.2;
        env.step(&a).unwrap();
        assert!((env.state().remaining_fractions[3] - 0.8).abs() < 1e-15);
        env.buses[3].remaining_fraction = 0.5;
        env.step(&a).unwrap();
        assert!((env.state().remaining_fractions[3] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn action_validation() {
        let mut env = GridEnv::new(model(), &quiet_scenario()).unwrap();
        assert!(matches!(env.step(&[0.0; 3]), Err(Error::Dimension { .. })));
        let mut a = vec![0.0; 10];
        a[0] = f64::NAN;
        assert!(matches!(env.step(&a), Err(Error::NonFinite(_))));
        a[0] = 0.3;
        assert!(env.step(&a).is_err());
    }

    #[test]
    fn severe_fault_without_control_fails() {
        let r = uncontrolled_rollout(&model(), &severe()).unwrap();
        assert!(r.failed);
        assert!(!r.tvrc_pass);
        assert!(r.total_reward <= -10_000.0);
    }

    #[test]
    fn full_shed_recovers_within_five_time_constants() {
        let m = model();
        let s = severe();
        let mut env = GridEnv::new(m.clone(), &s).unwrap();
        let k = m.bus_count();
        while env.state().time + 1e-9 < s.clearance_time() {
            env.step(&vec![0.0; k]).unwrap();
        }
        assert!(env.buses().iter().any(|b| b.is_stalled()));
        env.shed_everything();
        let tau = m.config().dynamics.tau_v;
        let t0 = env.state().time;
        while env.state().time < t0 + 5.0 * tau - 1e-9 {
            env.step(&vec![0.0; k]).unwrap();
        }
        assert!(env.state().voltages.iter().all(|&v| v > 0.95), "{:?}", env.state().voltages);
        let r = full_shed_rollout(&m, &s).unwrap();
        assert!(r.tvrc_pass && !r.failed);
    }

    #[test]
    fn stepping_after_done_is_an_error() {
        let mut env = GridEnv::new(model(), &severe()).unwrap();
        while !env.state().done {
            env.step(&[0.0; 10]).unwrap();
        }
        assert!(matches!(env.step(&[0.0; 10]), Err(Error::EpisodeDone)));
    }

    #[test]
    fn invalid_action_after_full_shed() {
        let mut env = GridEnv::new(model(), &quiet_scenario()).unwrap();
        env.shed_everything();
        let mut a = vec![0.0; 10];
        a[1] = 0.1;
        a[2] = 0.2;
        let out = env.step(&a).unwrap();
        assert_eq!(out.reward, -200.0);
        assert_eq!(out.shed_pu, 0.0);
    }

    #[test]
    fn trace_csv_header() {
        let env = GridEnv::new(model(), &quiet_scenario()).unwrap();
        let rows = vec![TraceRow::from_state(env.state(), 0.0)];
        let mut buf = Vec::new();
        write_trace_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("time,v0,"));
        assert!(header.ends_with("lambda9,reward,done,failed"));
    }
}
