//! Trains several variants under one budget and ranks them on a shared
//! held-out set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::build_scenario_set;
use crate::rollout::{build_pool, episode_context, evaluate_policy, run_training, TestReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub seed: u64,
    pub average_reward: f64,
    pub failed_cases: usize,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub failed_cases: usize,
    pub average_reward: f64,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    /// Input order.
    pub summaries: Vec<VariantSummary>,
    /// Variant names, fewest failures first, then higher reward.
    pub ranking: Vec<String>,
}

/// Refuses comparisons whose training or test budgets differ.
pub fn check_shared_budget(configs: &[(String, RunConfig)]) -> Result<()> {
    let Some((first_name, first)) = configs.first() else {
        return Ok(());
    };
    for (name, c) in &configs[1..] {
        let mut diffs = Vec::new();
        if c.iterations != first.iterations {
            diffs.push("iterations");
        }
        if c.optimizer.directions != first.optimizer.directions {
            diffs.push("optimizer.directions");
        }
        if c.optimizer.top_b != first.optimizer.top_b {
            diffs.push("optimizer.top_b");
        }
        if c.scenarios_per_iteration() != first.scenarios_per_iteration() {
            diffs.push("optimizer.scenarios_per_iteration");
        }
        if c.scenarios != first.scenarios {
            diffs.push("scenarios");
        }
        if c.env != first.env {
            diffs.push("env");
        }
        if c.meta.train_budget != first.meta.train_budget || c.meta.adapt_budget != first.meta.adapt_budget {
            diffs.push("meta budgets");
        }
        if !diffs.is_empty() {
            return Err(Error::config(format!(
                "unfair comparison: `{name}` differs from `{first_name}` in {}",
                diffs.join(", ")
            )));
        }
    }
    Ok(())
}

/// Trains and tests one configuration.
pub fn train_and_test(config: &RunConfig, workers: usize, out_dir: Option<&Path>) -> Result<TestReport> {
    let outcome = run_training(config, workers, out_dir, |_| {})?;
    let ctx = episode_context(config)?;
    let test = build_scenario_set(&config.scenarios.test, config.env.bus_count)?;
    let mut latents = outcome.checkpoint.latents.clone();
    let meta = config.meta.enabled.then_some(&config.meta);
    evaluate_policy(
        &ctx,
        &outcome.checkpoint.params.flat,
        &mut latents,
        meta,
        &test,
        config.master_seed,
        &build_pool(workers)?,
    )
}

/// Every configuration is trained once per seed; `seeds` replace each
/// configuration's master seed.
pub fn compare_variants<F>(
    configs: &[(String, RunConfig)],
    seeds: &[u64],
    workers: usize,
    out_dir: Option<&Path>,
    mut progress: F,
) -> Result<CompareReport>
where
    F: FnMut(&CompareRow),
{
    if configs.len() < 2 {
        return Err(Error::config("compare needs at least two variants"));
    }
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }
    check_shared_budget(configs)?;
    for (name, c) in configs {
        c.validate()
            .map_err(|e| Error::config(format!("variant `{name}`: {e}")))?;
    }
    let mut rows = Vec::new();
    for (name, base) in configs {
        for &seed in seeds {
            let mut c = base.clone();
            c.master_seed = seed;
            let dir = out_dir.map(|d| d.join(format!("{name}_seed{seed}")));
            let report = train_and_test(&c, workers, dir.as_deref())?;
            let row = CompareRow {
                variant: name.clone(),
                seed,
                average_reward: report.average_reward,
                failed_cases: report.failed_cases,
                mean_latency_ms: report.mean_step_latency_ms,
            };
            progress(&row);
            rows.push(row);
        }
    }
    let summaries: Vec<VariantSummary> = configs
        .iter()
        .map(|(name, _)| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| &r.variant == name).collect();
            let n = mine.len() as f64;
            VariantSummary {
                variant: name.clone(),
                failed_cases: mine.iter().map(|r| r.failed_cases).sum(),
                average_reward: mine.iter().map(|r| r.average_reward).sum::<f64>() / n,
                mean_latency_ms: mine.iter().map(|r| r.mean_latency_ms).sum::<f64>() / n,
            }
        })
        .collect();
    let mut order: Vec<&VariantSummary> = summaries.iter().collect();
    order.sort_by(|a, b| {
        a.failed_cases
            .cmp(&b.failed_cases)
            .then(b.average_reward.total_cmp(&a.average_reward))
    });
    let ranking = order.iter().map(|s| s.variant.clone()).collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("compare_summary.csv"))?;
        for s in &summaries {
            w.serialize(s)?;
        }
        w.flush()?;
    }
    Ok(CompareReport {
        rows,
        summaries,
        ranking,
    })
}
