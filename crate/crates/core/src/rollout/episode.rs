use std::sync::Arc;
use std::time::Instant;

use crate::error::Result;
use crate::grid::{check_tvrc, GridEnv, GridModel, ScenarioSpec, TraceRow};
use crate::mask::{ActionMasker, CriterionBounds, MaskMode};
use crate::grid::CriterionCurve;
use crate::policy::{PolicyNet, PolicyOutput, Scratch, CRITERION_OUTPUTS};

/// Everything an episode needs besides parameters, latent and scenario.
/// Shared read-only by all workers.
#[derive(Debug, Clone)]
pub struct EpisodeContext {
    pub model: Arc<GridModel>,
    pub net: PolicyNet,
    pub mask_mode: MaskMode,
    pub fixed_curve: CriterionCurve,
    pub bounds: CriterionBounds,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EpisodeOptions {
    pub seed: u64,
    pub record_trace: bool,
    pub time_actions: bool,
    pub check_tvrc: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    /// Discounted sum of step rewards.
    pub total_reward: f64,
    pub failed: bool,
    pub tvrc_pass: Option<bool>,
    pub steps: usize,
    /// Seconds spent in forward pass, clamp and mask, per step.
    pub action_seconds: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl EpisodeContext {
    pub fn masker(&self) -> ActionMasker {
        ActionMasker::new(self.mask_mode, self.fixed_curve, self.bounds)
    }

    /// Runs one episode of the masked policy from the scenario's pre-fault
    /// equilibrium.
    pub fn run_episode(
        &self,
        params: &[f64],
        latent: &[f64],
        scenario: &ScenarioSpec,
        opts: EpisodeOptions,
    ) -> Result<EpisodeResult> {
        let mut env = GridEnv::with_seed(Arc::clone(&self.model), scenario, opts.seed)?;
        let gamma = self.model.config().gamma;
        let t_pf = scenario.clearance_time();
        let k = self.model.bus_count();
        let mut masker = self.masker();
        let mut rec = self.net.initial_state();
        let mut scratch = Scratch::default();
        let mut out = PolicyOutput {
            shed_actions: Vec::with_capacity(k),
            criterion_raw: [0.0; CRITERION_OUTPUTS],
        };
        let mut obs = Vec::with_capacity(2 * k);
        let mut result = EpisodeResult {
            total_reward: 0.0,
            failed: false,
            tvrc_pass: None,
            steps: 0,
            action_seconds: Vec::new(),
            trace: Vec::new(),
        };
        let keep_trace = opts.record_trace || opts.check_tvrc;
        if keep_trace {
            result.trace.push(TraceRow::from_state(env.state(), 0.0));
        }
        let mut discount = 1.0;
        while !env.state().done {
            env.observe_into(&mut obs);
            let started = opts.time_actions.then(Instant::now);
            self.net
                .forward_into(params, &obs, latent, &mut rec, &mut scratch, &mut out)?;
            let t = env.state().time;
            masker.apply(&mut out.shed_actions, &obs[..k], &out.criterion_raw, t, t_pf)?;
            if let Some(s) = started {
                result.action_seconds.push(s.elapsed().as_secs_f64());
            }
            let step = env.step(&out.shed_actions)?;
            result.total_reward += discount * step.reward;
            discount *= gamma;
            result.steps += 1;
            if keep_trace {
                result.trace.push(TraceRow::from_state(env.state(), step.reward));
            }
        }
        result.failed = env.state().failed;
        if opts.check_tvrc {
            let pass = !result.failed
                && check_tvrc(
                    result.trace.iter().map(|r| (r.time, r.voltages.as_slice())),
                    t_pf,
                    &self.model.config().criterion,
                );
            result.tvrc_pass = Some(pass);
        }
        if !opts.record_trace {
            result.trace.clear();
        }
        Ok(result)
    }

    /// Episode return only.
    pub fn episode_return(
        &self,
        params: &[f64],
        latent: &[f64],
        scenario: &ScenarioSpec,
        seed: u64,
    ) -> Result<f64> {
        let opts = EpisodeOptions {
            seed,
            ..Default::default()
        };
        Ok(self.run_episode(params, latent, scenario, opts)?.total_reward)
    }
}
