//! Training loop: antithetic perturbation pairs evaluated over sampled
//! scenarios, top-b guided update, latent refresh, checkpoints and logs.
//!
//! Each iteration flattens (direction, sign, scenario) into one task list.
//! Workers evaluate tasks independently; results come back in task order
//! and are reduced sequentially, so the outcome does not depend on the
//! number of workers.

mod episode;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use episode::{EpisodeContext, EpisodeOptions, EpisodeResult};

use crate::config::{Manifest, MetaSection, RunConfig};
use crate::error::{Error, Result};
use crate::es::{GuidedEs, RewardPair};
use crate::grid::{build_scenario_set, GridModel, ScenarioSpec};
use crate::meta::{hill_climb, latent_schedule, HillClimbConfig, LatentContext, LatentStore, SearchOutcome};
use crate::policy::{save_checkpoint, Checkpoint, CheckpointMeta, PolicyNet, PolicyParams};
use crate::rng::{self, derive_seed};

pub use crate::es::select_top_b;

/// Seed of the episode for scenario `scenario_id` in iteration `t`. Shared
/// by every direction and both signs.
pub fn episode_seed(master: u64, t: u64, scenario_id: u64) -> u64 {
    derive_seed(&[rng::stream::EPISODE, master, t, scenario_id])
}

fn perturbed(theta: &[f64], eps: &[f64], scale: f64) -> Vec<f64> {
    theta.iter().zip(eps).map(|(t, e)| t + scale * e).collect()
}

/// Scenario-averaged returns of `θ + σε` and `θ − σε`, evaluated
/// sequentially. `latents[j]` and `seeds[j]` belong to `scenarios[j]`.
pub fn evaluate_pair(
    ctx: &EpisodeContext,
    theta: &[f64],
    eps: &[f64],
    sigma: f64,
    scenarios: &[ScenarioSpec],
    latents: &[Vec<f64>],
    seeds: &[u64],
) -> Result<RewardPair> {
    if scenarios.is_empty() {
        return Err(Error::config("evaluate_pair needs at least one scenario"));
    }
    let mut sums = [0.0, 0.0];
    for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
        let p = perturbed(theta, eps, sign * sigma);
        for ((sc, c), &seed) in scenarios.iter().zip(latents).zip(seeds) {
            sums[s] += ctx.episode_return(&p, c, sc, seed)?;
        }
    }
    let m = scenarios.len() as f64;
    Ok(RewardPair::new(sums[0] / m, sums[1] / m))
}

/// Latent search for one scenario under fixed episode seeds. Never returns
/// a latent worse than `init`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent(
    ctx: &EpisodeContext,
    params: &[f64],
    scenario: &ScenarioSpec,
    init: &[f64],
    budget: usize,
    hill: &HillClimbConfig,
    search_seed: u64,
    episode_seed: u64,
) -> Result<SearchOutcome> {
    hill_climb(init, budget, search_seed, hill, |c| {
        ctx.episode_return(params, c, scenario, episode_seed)
    })
}

/// Latent-only adaptation. Starts from the scenario's stored latent when
/// it has one, otherwise from the mean of the store, and stores the result.
pub fn adapt_to_new_scenario(
    ctx: &EpisodeContext,
    params: &[f64],
    store: &mut LatentStore,
    scenario: &ScenarioSpec,
    budget: usize,
    hill: &HillClimbConfig,
    master_seed: u64,
) -> Result<(LatentContext, SearchOutcome)> {
    let init = store
        .get(scenario.scenario_id)
        .map(|c| c.values.clone())
        .unwrap_or_else(|| store.mean());
    let outcome = optimize_latent(
        ctx,
        params,
        scenario,
        &init,
        budget,
        hill,
        derive_seed(&[rng::stream::LATENT, master_seed, u64::MAX, scenario.scenario_id]),
        adaptation_seed(master_seed, scenario.scenario_id),
    )?;
    let ctx_out = LatentContext::new(scenario.scenario_id, outcome.best.clone())?;
    store.insert(ctx_out.clone())?;
    Ok((ctx_out, outcome))
}

/// Episode seed used for every evaluation while adapting to a scenario.
pub fn adaptation_seed(master: u64, scenario_id: u64) -> u64 {
    derive_seed(&[rng::stream::EPISODE, master, u64::MAX, scenario_id])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub mean_reward: f64,
    pub best_reward: f64,
    pub grad_norm: f64,
    pub eta: f64,
    pub sigma: f64,
    pub subspace_rank: usize,
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: u64,
    pub scenario_ids: Vec<u64>,
    pub pairs: Vec<RewardPair>,
    pub selected: Vec<usize>,
    pub grad_norm: f64,
    pub eta: f64,
    pub sigma: f64,
    pub subspace_rank: usize,
    pub latent_refreshed: bool,
    pub episodes: usize,
    pub wall_seconds: f64,
}

impl IterationReport {
    pub fn log_row(&self) -> LogRow {
        let all = self.pairs.iter().flat_map(|p| [p.plus, p.minus]);
        let n = 2 * self.pairs.len();
        LogRow {
            iteration: self.iteration,
            mean_reward: all.clone().sum::<f64>() / n as f64,
            best_reward: all.fold(f64::NEG_INFINITY, f64::max),
            grad_norm: self.grad_norm,
            eta: self.eta,
            sigma: self.sigma,
            subspace_rank: self.subspace_rank,
        }
    }
}

pub fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))
}

/// Shared read-only pieces of a run derived from its configuration.
pub fn episode_context(config: &RunConfig) -> Result<EpisodeContext> {
    Ok(EpisodeContext {
        model: GridModel::new(config.env.clone())?,
        net: PolicyNet::new(config.policy_config())?,
        mask_mode: config.mask.mode,
        fixed_curve: config.mask.fixed,
        bounds: config.mask.bounds,
    })
}

pub struct Trainer {
    config: RunConfig,
    ctx: EpisodeContext,
    training: Vec<ScenarioSpec>,
    params: PolicyParams,
    latents: LatentStore,
    es: GuidedEs,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: RunConfig, workers: usize) -> Result<Self> {
        config.validate()?;
        let ctx = episode_context(&config)?;
        let training = build_scenario_set(&config.scenarios.training, config.env.bus_count)?;
        let params = ctx
            .net
            .init_params(derive_seed(&[config.master_seed, config.policy.init_seed]));
        let mut latents = LatentStore::new(config.policy.latent_dim, config.meta.t_inner)?;
        if config.meta.enabled {
            for s in &training {
                latents.insert(LatentContext::new(s.scenario_id, vec![0.0; config.policy.latent_dim])?)?;
            }
        }
        let es = GuidedEs::new(config.optimizer.clone(), params.len(), config.master_seed)?;
        Ok(Trainer {
            pool: build_pool(workers)?,
            config,
            ctx,
            training,
            params,
            latents,
            es,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn context(&self) -> &EpisodeContext {
        &self.ctx
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn latents(&self) -> &LatentStore {
        &self.latents
    }

    pub fn iterations_done(&self) -> u64 {
        self.es.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            latents: self.latents.clone(),
            config_hash: self.config.config_hash(),
            meta: CheckpointMeta {
                variant: self.config.variant_label(),
                meta_enabled: self.config.meta.enabled,
                mask_mode: self.config.mask.mode,
                iteration: self.es.iteration,
                master_seed: self.config.master_seed,
                policy: self.config.policy_config(),
            },
        }
    }

    fn sample_scenarios(&self, t: u64) -> Vec<ScenarioSpec> {
        let m = self.config.scenarios_per_iteration();
        if m >= self.training.len() {
            return self.training.clone();
        }
        let mut rng = rng::rng_for(&[rng::stream::SCENARIO_SAMPLE, self.config.master_seed, t]);
        let mut idx = sample_indices(&mut rng, self.training.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.training[i].clone()).collect()
    }

    fn latent_for(&self, scenario_id: u64) -> Vec<f64> {
        if self.config.meta.enabled {
            self.latents.values_or_zero(scenario_id)
        } else {
            vec![0.0; self.config.policy.latent_dim]
        }
    }

    fn refresh_latents(&mut self, t: u64, scenarios: &[ScenarioSpec]) -> Result<()> {
        let master = self.config.master_seed;
        let meta = &self.config.meta;
        let theta = &self.params.flat;
        let ctx = &self.ctx;
        let store = &self.latents;
        let results: Vec<Result<LatentContext>> = self.pool.install(|| {
            scenarios
                .par_iter()
                .map(|s| {
                    let out = optimize_latent(
                        ctx,
                        theta,
                        s,
                        &store.values_or_zero(s.scenario_id),
                        meta.train_budget,
                        &meta.hill_climb,
                        derive_seed(&[rng::stream::LATENT, master, t, s.scenario_id]),
                        episode_seed(master, t, s.scenario_id),
                    )?;
                    LatentContext::new(s.scenario_id, out.best)
                })
                .collect()
        });
        for r in results {
            self.latents.insert(r?)?;
        }
        Ok(())
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<IterationReport> {
        let started = Instant::now();
        let t = self.es.iteration + 1;
        let scenarios = self.sample_scenarios(t);
        let refresh = self.config.meta.enabled && latent_schedule(t, &self.latents);
        if refresh {
            self.refresh_latents(t, &scenarios)?;
        }
        let latents: Vec<Vec<f64>> = scenarios.iter().map(|s| self.latent_for(s.scenario_id)).collect();
        let seeds: Vec<u64> = scenarios
            .iter()
            .map(|s| episode_seed(self.config.master_seed, t, s.scenario_id))
            .collect();

        let perts = self.es.perturbations();
        let n_dir = perts.len();
        let m = scenarios.len();
        let sigma = self.es.config.sigma;
        let theta = &self.params.flat;
        let ctx = &self.ctx;
        let returns: Vec<Result<f64>> = self.pool.install(|| {
            (0..n_dir * 2 * m)
                .into_par_iter()
                .map(|task| {
                    let (i, rest) = (task / (2 * m), task % (2 * m));
                    let (s, j) = (rest / m, rest % m);
                    let sign = if s == 0 { 1.0 } else { -1.0 };
                    let p = perturbed(theta, &perts[i], sign * sigma);
                    ctx.episode_return(&p, &latents[j], &scenarios[j], seeds[j])
                        .map_err(|e| Error::Task {
                            iteration: t as usize,
                            direction: i,
                            sign: if s == 0 { '+' } else { '-' },
                            scenario: scenarios[j].scenario_id,
                            source: Box::new(e),
                        })
                })
                .collect()
        });
        let mut pairs = Vec::with_capacity(n_dir);
        let mut it = returns.into_iter();
        for _ in 0..n_dir {
            let mut sums = [0.0; 2];
            for sum in &mut sums {
                for _ in 0..m {
                    *sum += it.next().expect("task count")?;
                }
            }
            pairs.push(RewardPair::new(sums[0] / m as f64, sums[1] / m as f64));
        }

        let info = self.es.step(&mut self.params.flat, &pairs, &perts, None)?;
        self.params.version += 1;
        Ok(IterationReport {
            iteration: t,
            scenario_ids: scenarios.iter().map(|s| s.scenario_id).collect(),
            pairs,
            selected: info.selected,
            grad_norm: info.grad_norm,
            eta: info.eta,
            sigma: info.sigma,
            subspace_rank: info.subspace_rank,
            latent_refreshed: refresh,
            episodes: 2 * n_dir * m,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// File names inside a run directory.
pub mod artifacts {
    pub const MANIFEST: &str = "manifest.json";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const FINAL_CHECKPOINT: &str = "final.ckpt";

    pub fn checkpoint_name(iteration: u64) -> String {
        format!("checkpoint_{iteration:05}.ckpt")
    }
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<IterationReport>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Full training run. With `out_dir` set, writes the manifest, the log CSV,
/// periodic checkpoints and `final.ckpt`.
pub fn run_training<F>(
    config: &RunConfig,
    workers: usize,
    out_dir: Option<&Path>,
    mut on_iteration: F,
) -> Result<TrainingOutcome>
where
    F: FnMut(&IterationReport),
{
    let mut trainer = Trainer::new(config.clone(), workers)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Manifest::new(config, trainer.params().len()).write(&dir.join(artifacts::MANIFEST))?;
            Some(csv::Writer::from_path(dir.join(artifacts::TRAIN_LOG))?)
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let report = trainer.step()?;
        if let Some(w) = log.as_mut() {
            w.serialize(report.log_row())?;
            w.flush()?;
        }
        let every = config.checkpoint_every as u64;
        if let (Some(dir), true) = (out_dir, every > 0 && report.iteration % every == 0) {
            save_checkpoint(&trainer.checkpoint(), &dir.join(artifacts::checkpoint_name(report.iteration)))?;
        }
        log::info!(
            "iteration {} mean {:.3} best {:.3} |g| {:.4} ({:.2}s)",
            report.iteration,
            report.log_row().mean_reward,
            report.log_row().best_reward,
            report.grad_norm,
            report.wall_seconds
        );
        on_iteration(&report);
        reports.push(report);
    }
    if let Some(w) = log.as_mut() {
        // An empty log still gets its header.
        if reports.is_empty() {
            w.write_record([
                "iteration",
                "mean_reward",
                "best_reward",
                "grad_norm",
                "eta",
                "sigma",
                "subspace_rank",
            ])?;
        }
        w.flush()?;
    }
    let checkpoint = trainer.checkpoint();
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(artifacts::FINAL_CHECKPOINT);
            save_checkpoint(&checkpoint, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainingOutcome {
        checkpoint,
        reports,
        final_checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario_id: u64,
    pub fault_bus: usize,
    pub load_scale: f64,
    pub reward: f64,
    /// Episode reward below the late-recovery penalty.
    pub failed: bool,
    pub tvrc_pass: bool,
    pub adapted: bool,
    pub mean_action_ms: f64,
    pub max_action_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub rows: Vec<ScenarioResult>,
    pub failed_cases: usize,
    pub average_reward: f64,
    pub mean_step_latency_ms: f64,
    pub max_step_latency_ms: f64,
}

/// Evaluates a policy on `scenarios`. With `meta` enabled each scenario's
/// latent is adapted first; adapted latents are written into `latents`.
pub fn evaluate_policy(
    ctx: &EpisodeContext,
    params: &[f64],
    latents: &mut LatentStore,
    meta: Option<&MetaSection>,
    scenarios: &[ScenarioSpec],
    master_seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<TestReport> {
    if scenarios.is_empty() {
        return Err(Error::config("test scenario set is empty"));
    }
    let penalty = ctx.model.config().reward.penalty;
    let base = latents.clone();
    let results: Vec<Result<(ScenarioResult, Option<LatentContext>)>> = pool.install(|| {
        scenarios
            .par_iter()
            .map(|s| {
                let (latent, adapted) = match meta {
                    Some(m) => {
                        let mut store = base.clone();
                        let (c, _) = adapt_to_new_scenario(
                            ctx,
                            params,
                            &mut store,
                            s,
                            m.adapt_budget,
                            &m.hill_climb,
                            master_seed,
                        )?;
                        (c.values.clone(), Some(c))
                    }
                    None => (vec![0.0; ctx.net.config().latent_dim], None),
                };
                let ep = ctx.run_episode(
                    params,
                    &latent,
                    s,
                    EpisodeOptions {
                        seed: adaptation_seed(master_seed, s.scenario_id),
                        time_actions: true,
                        check_tvrc: true,
                        record_trace: false,
                    },
                )?;
                let n = ep.action_seconds.len().max(1) as f64;
                let row = ScenarioResult {
                    scenario_id: s.scenario_id,
                    fault_bus: s.fault_bus,
                    load_scale: s.load_scale,
                    reward: ep.total_reward,
                    failed: ep.total_reward < penalty,
                    tvrc_pass: ep.tvrc_pass.unwrap_or(false),
                    adapted: adapted.is_some(),
                    mean_action_ms: 1e3 * ep.action_seconds.iter().sum::<f64>() / n,
                    max_action_ms: 1e3 * ep.action_seconds.iter().copied().fold(0.0, f64::max),
                };
                Ok((row, adapted))
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(scenarios.len());
    for r in results {
        let (row, adapted) = r?;
        if let Some(c) = adapted {
            latents.insert(c)?;
        }
        rows.push(row);
    }
    let n = rows.len() as f64;
    Ok(TestReport {
        failed_cases: rows.iter().filter(|r| r.failed).count(),
        average_reward: rows.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_step_latency_ms: rows.iter().map(|r| r.mean_action_ms).sum::<f64>() / n,
        max_step_latency_ms: rows.iter().map(|r| r.max_action_ms).fold(0.0, f64::max),
        rows,
    })
}
