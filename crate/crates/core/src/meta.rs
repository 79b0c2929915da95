//! Per-scenario latent contexts and the latent-only hill climb used both
//! during training and for test-time adaptation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const LATENT_BOUND: f64 = 3.0;
pub const DEFAULT_T_INNER: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentContext {
    pub scenario_id: u64,
    pub values: Vec<f64>,
}

impl LatentContext {
    /// Clamps every entry into `[-3, 3]`.
    pub fn new(scenario_id: u64, mut values: Vec<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        clamp_box(&mut values);
        Ok(LatentContext { scenario_id, values })
    }
}

fn clamp_box(values: &mut [f64]) {
    values
        .iter_mut()
        .for_each(|v| *v = v.clamp(-LATENT_BOUND, LATENT_BOUND));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStore {
    pub latent_dim: usize,
    pub t_inner: usize,
    latents: BTreeMap<u64, LatentContext>,
}

impl LatentStore {
    pub fn new(latent_dim: usize, t_inner: usize) -> Result<Self> {
        if t_inner == 0 {
            return Err(Error::config("meta.t_inner must be >= 1"));
        }
        if latent_dim == 0 {
            return Err(Error::config("latent dimension must be >= 1"));
        }
        Ok(LatentStore {
            latent_dim,
            t_inner,
            latents: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn get(&self, scenario_id: u64) -> Option<&LatentContext> {
        self.latents.get(&scenario_id)
    }

    /// Stored values, or zeros for an unknown scenario.
    pub fn values_or_zero(&self, scenario_id: u64) -> Vec<f64> {
        self.get(scenario_id)
            .map(|c| c.values.clone())
            .unwrap_or_else(|| vec![0.0; self.latent_dim])
    }

    pub fn insert(&mut self, ctx: LatentContext) -> Result<()> {
        if ctx.values.len() != self.latent_dim {
            return Err(Error::dim("latent", self.latent_dim, ctx.values.len()));
        }
        self.latents.insert(ctx.scenario_id, ctx);
        Ok(())
    }

    /// Ascending scenario id.
    pub fn iter(&self) -> impl Iterator<Item = &LatentContext> {
        self.latents.values()
    }

    /// Mean of stored latents; zero when empty.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.latent_dim];
        if self.latents.is_empty() {
            return m;
        }
        for c in self.latents.values() {
            m.iter_mut().zip(&c.values).for_each(|(a, b)| *a += b);
        }
        let n = self.latents.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Whether latents are refreshed at (1-based) iteration `t`.
pub fn latent_schedule(iteration: u64, store: &LatentStore) -> bool {
    iteration.is_multiple_of(store.t_inner as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HillClimbConfig {
    pub initial_step: f64,
    /// Consecutive non-improvements before the step halves.
    pub patience: usize,
}

impl Default for HillClimbConfig {
    fn default() -> Self {
        HillClimbConfig {
            initial_step: 0.3,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Vec<f64>,
    /// `None` only when the budget was zero.
    pub best_value: Option<f64>,
    /// Objective of every evaluated candidate, initial point first.
    pub evaluations: Vec<f64>,
}

impl SearchOutcome {
    /// Best-so-far objective after each evaluation.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.evaluations
            .iter()
            .scan(f64::NEG_INFINITY, |acc, &v| {
                *acc = acc.max(v);
                Some(*acc)
            })
            .collect()
    }
}

/// (1+1) Gaussian hill climb in the latent box. Evaluating `init` uses one
/// unit of `budget`; a candidate replaces the incumbent only on strict
/// improvement.
pub fn hill_climb<F>(
    init: &[f64],
    budget: usize,
    seed: u64,
    config: &HillClimbConfig,
    mut objective: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut best = init.to_vec();
    if budget == 0 {
        return Ok(SearchOutcome {
            best,
            best_value: None,
            evaluations: Vec::new(),
        });
    }
    clamp_box(&mut best);
    let mut best_value = objective(&best)?;
    let mut evaluations = vec![best_value];
    let mut rng = rng::rng_for(&[rng::stream::LATENT, seed]);
    let mut step = config.initial_step;
    let mut misses = 0;
    let mut candidate = vec![0.0; best.len()];
    while evaluations.len() < budget {
        for (c, b) in candidate.iter_mut().zip(&best) {
            let z: f64 = rng.sample(StandardNormal);
            *c = (b + step * z).clamp(-LATENT_BOUND, LATENT_BOUND);
        }
        let value = objective(&candidate)?;
        evaluations.push(value);
        if value > best_value {
            best_value = value;
            best.copy_from_slice(&candidate);
            misses = 0;
        } else {
            misses += 1;
            if misses == config.patience {
                step *= 0.5;
                misses = 0;
            }
        }
    }
    Ok(SearchOutcome {
        best,
        best_value: Some(best_value),
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = LatentStore::new(16, 10).unwrap();
        assert!(latent_schedule(20, &s));
        assert!(!latent_schedule(21, &s));
        let every = LatentStore::new(16, 1).unwrap();
        assert!((1..50).all(|t| latent_schedule(t, &every)));
        assert!(LatentStore::new(16, 0).is_err());
    }

    #[test]
    fn contexts_clamped_and_finite() {
        let c = LatentContext::new(1, vec![5.0, -7.0, 0.5]).unwrap();
        assert_eq!(c.values, [3.0, -3.0, 0.5]);
        assert!(LatentContext::new(1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn store_mean_and_isolation() {
        let mut s = LatentStore::new(2, 10).unwrap();
        assert_eq!(s.mean(), [0.0, 0.0]);
        s.insert(LatentContext::new(1, vec![1.0, 2.0]).unwrap()).unwrap();
        s.insert(LatentContext::new(2, vec![3.0, -2.0]).unwrap()).unwrap();
        assert_eq!(s.mean(), [2.0, 0.0]);
        let before = s.get(2).cloned();
        s.insert(LatentContext::new(1, vec![0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(s.get(2).cloned(), before);
        assert!(s.insert(LatentContext::new(3, vec![0.0]).unwrap()).is_err());
    }

    #[test]
    fn zero_budget_returns_init() {
        let out = hill_climb(&[0.4; 4], 0, 1, &HillClimbConfig::default(), |_| {
            panic!("no evaluation expected")
        })
        .unwrap();
        assert_eq!(out.best, [0.4; 4]);
        assert!(out.evaluations.is_empty());
    }

    #[test]
    fn constant_objective_keeps_init() {
        let init = [0.1, -0.2, 0.3];
        let out = hill_climb(&init, 50, 2, &HillClimbConfig::default(), |_| Ok(1.0)).unwrap();
        assert_eq!(out.best, init);
        assert_eq!(out.evaluations.len(), 50);
    }

    #[test]
    fn budget_is_exact_and_best_is_monotone() {
        let target = [1.0, -2.0, 0.5, 0.0];
        let f = |c: &[f64]| Ok(-c.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        let out = hill_climb(&[0.0; 4], 77, 5, &HillClimbConfig::default(), f).unwrap();
        assert_eq!(out.evaluations.len(), 77);
        let trace = out.best_so_far();
        assert!(trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*trace.last().unwrap(), out.best_value.unwrap());
        assert!(out.best_value.unwrap() > out.evaluations[0]);
    }
}
