use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use gmes_core::es::{direction_rng, sample_guided, sample_perturbations};
use gmes_core::grid::build_scenario_set;
use gmes_core::rollout::episode_context;
use gmes_core::{GradientSubspace, GridEnv, RunConfig};

fn policy_forward(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ctx = episode_context(&cfg).unwrap();
    let params = ctx.net.init_params(0).flat;
    let obs = vec![0.9; 2 * cfg.env.bus_count];
    let latent = vec![0.0; cfg.policy.latent_dim];
    let rec = ctx.net.initial_state();
    c.bench_function("policy_forward", |b| {
        b.iter(|| ctx.net.forward(&params, black_box(&obs), &latent, &rec).unwrap())
    });
}

fn env_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let ctx = episode_context(&cfg).unwrap();
    let scenario = build_scenario_set(&cfg.scenarios.training, cfg.env.bus_count).unwrap()[0].clone();
    let action = vec![0.05; cfg.env.bus_count];
    c.bench_function("env_step", |b| {
        b.iter_batched(
            || GridEnv::new(ctx.model.clone(), &scenario).unwrap(),
            |mut env| env.step(black_box(&action)).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn episode(c: &mut Criterion) {
    let mut g = c.benchmark_group("episode");
    for variant in ["ars", "guided-meta-tam"] {
        let mut cfg = RunConfig::default();
        variant.parse::<gmes_core::Variant>().unwrap().apply(&mut cfg);
        let ctx = episode_context(&cfg).unwrap();
        let scenario = build_scenario_set(&cfg.scenarios.training, cfg.env.bus_count).unwrap()[0].clone();
        let params = ctx.net.init_params(0).flat;
        let latent = vec![0.0; cfg.policy.latent_dim];
        g.bench_function(variant, |b| {
            b.iter(|| ctx.episode_return(&params, &latent, &scenario, 0).unwrap())
        });
    }
    g.finish();
}

fn subspace(c: &mut Criterion) {
    let dim = 10_383;
    let mut rng = direction_rng(1, 0, 0);
    let mut s = GradientSubspace::new(dim, 8).unwrap();
    let grads: Vec<Vec<f64>> = (0..8)
        .map(|_| gmes_core::es::sample_isotropic(dim, &mut rng))
        .collect();
    for g in &grads {
        s.update(g).unwrap();
    }
    c.bench_function("subspace_update_k8", |b| {
        b.iter(|| s.update(black_box(&grads[3])).unwrap())
    });
    c.bench_function("sample_guided", |b| {
        b.iter(|| sample_guided(&s, 0.5, &mut rng))
    });
    c.bench_function("sample_perturbations_n16", |b| {
        b.iter(|| sample_perturbations(&s, 0.5, 16, 7, black_box(3)))
    });
}

criterion_group!(benches, policy_forward, env_step, episode, subspace);
criterion_main!(benches);
