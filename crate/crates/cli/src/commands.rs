use std::fs;
use std::path::{Path, PathBuf};

use gmes_core::compare::{compare_variants, CompareReport};
use gmes_core::config::{Manifest, RunConfig, Variant};
use gmes_core::grid::{build_scenario_set, ScenarioSpec};
use gmes_core::objectives::{convergence_experiment, standard, ConvergenceSummary};
use gmes_core::policy::{load_checkpoint, save_checkpoint, Checkpoint};
use gmes_core::rollout::{
    adapt_to_new_scenario, build_pool, episode_context, evaluate_policy, run_training,
    EpisodeContext,
};
use gmes_core::{Error, Result};

use crate::{Cli, Command, GlobalArgs, Switch};

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train { manifest } => train(g, manifest.as_deref()),
        Command::Test {
            checkpoint,
            training_set,
        } => test(g, &checkpoint, training_set),
        Command::Adapt {
            checkpoint,
            scenario,
            budget,
        } => adapt(g, &checkpoint, scenario, budget),
        Command::Compare {
            variants,
            configs,
            seeds,
        } => compare(g, variants, &configs, seeds),
        Command::Bench { seeds } => bench(g, seeds),
    }
}

/// File, then variant, then individual flags; every value lands in the
/// config that is later echoed into the manifest.
fn apply_overrides(mut c: RunConfig, g: &GlobalArgs) -> RunConfig {
    if let Some(v) = g.variant {
        v.apply(&mut c);
    }
    if let Some(m) = g.mask {
        c.mask.mode = m;
    }
    if let Some(m) = g.meta {
        c.meta.enabled = m == Switch::On;
    }
    if let Some(v) = c.variant {
        if v.mask() != c.mask.mode || v.meta() != c.meta.enabled {
            c.variant = None;
        }
    }
    if let Some(s) = g.seed {
        c.master_seed = s;
    }
    if let Some(o) = &g.out {
        c.output_dir = o.clone();
    }
    c
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = apply_overrides(base, g);
    c.validate()?;
    Ok(c)
}

fn print_plan(c: &RunConfig, params: usize) {
    let m = c.scenarios_per_iteration();
    println!("variant                 {}", c.variant_label());
    println!("policy parameters       {params}");
    println!("training scenarios      {}", c.scenarios.training.len());
    println!("test scenarios          {}", c.scenarios.test.len());
    println!("directions N            {}", c.optimizer.directions);
    println!("scenarios per direction {m}");
    println!("episodes per iteration  {}", c.episodes_per_iteration());
    println!("iterations              {}", c.iterations);
    println!(
        "total episodes          {}",
        c.episodes_per_iteration() * c.iterations
    );
}

fn train(g: &GlobalArgs, manifest: Option<&Path>) -> Result<()> {
    let config = match manifest {
        Some(p) => {
            let mut c = Manifest::read(p)?.config;
            if let Some(o) = &g.out {
                c.output_dir = o.clone();
            }
            c.validate()?;
            c
        }
        None => resolve_config(g)?,
    };
    let params = gmes_core::PolicyNet::new(config.policy_config())?.param_count();
    if g.dry_run {
        print_plan(&config, params);
        return Ok(());
    }
    let out = config.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    let outcome = run_training(&config, g.workers, Some(&out), |r| {
        let row = r.log_row();
        println!(
            "iter {:>5}  mean {:>12.3}  best {:>12.3}  |g| {:>10.4}  rank {:>2}",
            row.iteration, row.mean_reward, row.best_reward, row.grad_norm, row.subspace_rank
        );
    })?;
    println!(
        "wrote {} iterations to {}",
        outcome.reports.len(),
        out.display()
    );
    Ok(())
}

fn load_compatible(path: &Path, config: &RunConfig) -> Result<(Checkpoint, EpisodeContext)> {
    let ckpt = load_checkpoint(path)?;
    ckpt.verify_config_hash(&config.config_hash());
    let mut c = config.clone();
    c.mask.mode = ckpt.meta.mask_mode;
    c.meta.enabled = ckpt.meta.meta_enabled;
    c.policy.latent_dim = ckpt.meta.policy.latent_dim;
    c.policy.hidden = ckpt.meta.policy.hidden.clone();
    let ctx = episode_context(&c)?;
    ctx.net.check_params(&ckpt.params)?;
    Ok((ckpt, ctx))
}

fn test(g: &GlobalArgs, checkpoint: &Path, training_set: bool) -> Result<()> {
    let config = resolve_config(g)?;
    let set = if training_set {
        &config.scenarios.training
    } else {
        &config.scenarios.test
    };
    let scenarios = build_scenario_set(set, config.env.bus_count)?;
    if g.dry_run {
        println!("would evaluate {} scenarios", scenarios.len());
        return Ok(());
    }
    let (ckpt, ctx) = load_compatible(checkpoint, &config)?;
    let mut latents = ckpt.latents.clone();
    let meta = ckpt.meta.meta_enabled.then_some(&config.meta);
    let report = evaluate_policy(
        &ctx,
        &ckpt.params.flat,
        &mut latents,
        meta,
        &scenarios,
        config.master_seed,
        &build_pool(g.workers)?,
    )?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("test_report.csv"))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(
        out.join("test_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "schema_version": gmes_core::config::REPORT_SCHEMA_VERSION,
            "checkpoint": checkpoint,
            "variant": ckpt.meta.variant,
            "scenarios": report.rows.len(),
            "failed_cases": report.failed_cases,
            "average_reward": report.average_reward,
            "mean_step_latency_ms": report.mean_step_latency_ms,
            "max_step_latency_ms": report.max_step_latency_ms,
        }))?,
    )?;
    println!("scenarios       {}", report.rows.len());
    println!("failed cases    {}", report.failed_cases);
    println!("average reward  {:.3}", report.average_reward);
    println!(
        "step latency    mean {:.4} ms, max {:.4} ms",
        report.mean_step_latency_ms, report.max_step_latency_ms
    );
    Ok(())
}

fn find_scenario(config: &RunConfig, id: u64) -> Result<ScenarioSpec> {
    for set in [&config.scenarios.test, &config.scenarios.training] {
        if let Some(s) = build_scenario_set(set, config.env.bus_count)?
            .into_iter()
            .find(|s| s.scenario_id == id)
        {
            return Ok(s);
        }
    }
    Err(Error::config(format!("no scenario with id {id} in the test or training set")))
}

fn adapt(g: &GlobalArgs, checkpoint: &Path, scenario_id: u64, budget: Option<usize>) -> Result<()> {
    let config = resolve_config(g)?;
    let scenario = find_scenario(&config, scenario_id)?;
    let budget = budget.unwrap_or(config.meta.adapt_budget);
    if g.dry_run {
        println!("would adapt scenario {scenario_id} with {budget} episodes");
        return Ok(());
    }
    let (mut ckpt, ctx) = load_compatible(checkpoint, &config)?;
    if !ckpt.meta.meta_enabled {
        return Err(Error::config(
            "checkpoint was trained without latents; adapt needs a meta-enabled checkpoint",
        ));
    }
    let before = ckpt.params.flat.clone();
    let (ctx_out, outcome) = adapt_to_new_scenario(
        &ctx,
        &ckpt.params.flat,
        &mut ckpt.latents,
        &scenario,
        budget,
        &config.meta.hill_climb,
        config.master_seed,
    )?;
    debug_assert_eq!(before, ckpt.params.flat);

    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("adapt_log.csv"))?;
    w.write_record(["evaluation", "objective", "best_so_far"])?;
    for (i, (v, b)) in outcome.evaluations.iter().zip(outcome.best_so_far()).enumerate() {
        w.write_record([i.to_string(), v.to_string(), b.to_string()])?;
    }
    w.flush()?;
    let path = out.join("adapted.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!(
        "scenario {} adapted over {} episodes: {:.3} -> {:.3}",
        ctx_out.scenario_id,
        outcome.evaluations.len(),
        outcome.evaluations.first().copied().unwrap_or(f64::NAN),
        outcome.best_value.unwrap_or(f64::NAN)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(g: &GlobalArgs, variants: Vec<Variant>, configs: &[PathBuf], seeds: u64) -> Result<()> {
    let arms: Vec<(String, RunConfig)> = if !configs.is_empty() {
        configs
            .iter()
            .map(|p| {
                let c = apply_overrides(RunConfig::load(p)?, g);
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| c.variant_label());
                Ok((name, c))
            })
            .collect::<Result<_>>()?
    } else {
        let base = resolve_config(g)?;
        let list = if variants.is_empty() {
            Variant::ALL.to_vec()
        } else {
            variants
        };
        list.into_iter()
            .map(|v| {
                let mut c = base.clone();
                v.apply(&mut c);
                (v.name().to_string(), c)
            })
            .collect()
    };
    let first_seed = arms.first().map_or(0, |a| a.1.master_seed);
    let seed_list: Vec<u64> = (0..seeds).map(|s| first_seed + s).collect();
    if g.dry_run {
        gmes_core::compare::check_shared_budget(&arms)?;
        for (name, c) in &arms {
            c.validate()?;
            println!(
                "{name}: {} iterations x {} episodes, {} seeds",
                c.iterations,
                c.episodes_per_iteration(),
                seed_list.len()
            );
        }
        return Ok(());
    }
    let out = arms
        .first()
        .map(|a| a.1.output_dir.clone())
        .unwrap_or_default();
    let report = compare_variants(&arms, &seed_list, g.workers, Some(&out), |row| {
        println!(
            "{:<18} seed {:<4} failed {:>3}  reward {:>12.3}  latency {:.4} ms",
            row.variant, row.seed, row.failed_cases, row.average_reward, row.mean_latency_ms
        );
    })?;
    print_ranking(&report);
    Ok(())
}

fn print_ranking(report: &CompareReport) {
    println!();
    println!("{:<18} {:>7} {:>14} {:>12}", "variant", "failed", "avg reward", "latency ms");
    for s in &report.summaries {
        println!(
            "{:<18} {:>7} {:>14.3} {:>12.4}",
            s.variant, s.failed_cases, s.average_reward, s.mean_latency_ms
        );
    }
    println!("ranking: {}", report.ranking.join(" > "));
}

fn bench(g: &GlobalArgs, seeds: u64) -> Result<()> {
    let seed_list: Vec<u64> = (0..seeds).collect();
    let (exact_arm, exact_obj) = standard::exact_subspace();
    let arms = [
        (standard::vanilla(), standard::objective()),
        (standard::guided(), standard::objective()),
        (exact_arm, exact_obj),
    ];
    if g.dry_run {
        for (a, _) in &arms {
            println!("{}: {} seeds, budget {}", a.name, seeds, standard::BUDGET);
        }
        return Ok(());
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("runs/bench"));
    fs::create_dir_all(&out)?;
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    w.write_record(["variant", "seed", "iterations", "final_value"])?;
    for (arm, obj) in &arms {
        let summary: ConvergenceSummary = convergence_experiment(
            arm,
            obj,
            &standard::start(),
            &seed_list,
            standard::threshold(),
            standard::BUDGET,
        )?;
        for r in &summary.runs {
            let its = r.iterations.map_or_else(|| "censored".to_string(), |i| i.to_string());
            w.write_record([r.arm.clone(), r.seed.to_string(), its, r.final_value.to_string()])?;
        }
        println!(
            "{:<16} median {:>7.1} iterations, {} censored",
            arm.name, summary.median_iterations, summary.censored
        );
    }
    w.flush()?;
    Ok(())
}
