//! Evolution-strategy optimizers: vanilla ES, antithetic guided ES and the
//! surrogate-gradient subspace that shapes guided sampling.
//!
//! Guided perturbations are `ε = α ε′ + (1 − α) U ε″` with `ε′ ~ N(0, I_n)`
//! and `ε″ ~ N(0, I_k)`, giving covariance `α² I + (1 − α)² U Uᵀ`.

mod subspace;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use subspace::{GradientSubspace, DEPENDENCE_TOL};
pub(crate) use subspace::{dot, norm};

use crate::error::{Error, Result};
use crate::rng;

/// How directions are ranked for top-b selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankKey {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Step size η.
    pub eta: f64,
    /// Exploration noise σ.
    pub sigma: f64,
    /// Weight α between isotropic and subspace noise.
    pub alpha: f64,
    /// Perturbation directions N.
    pub directions: usize,
    /// Surrogate gradients kept, k.
    pub subspace_k: usize,
    /// Top directions b used in the update.
    pub top_b: usize,
    /// Per-iteration decay ξ applied to η and σ.
    pub decay: f64,
    /// Scale β of the plain antithetic estimator.
    pub beta: f64,
    /// Scenarios m evaluated per direction; `None` uses the whole set.
    pub scenarios_per_iteration: Option<usize>,
    /// Divide the update by the standard deviation of the selected rewards.
    pub normalize_rewards: bool,
    pub rank_key: RankKey,
}

/// Settings for the 10-bus surrogate.
impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 0.0005,
            sigma: 0.02,
            alpha: 0.5,
            directions: 16,
            subspace_k: 8,
            top_b: 8,
            decay: 0.998,
            beta: 1.0,
            scenarios_per_iteration: None,
            normalize_rewards: true,
            rank_key: RankKey::Max,
        }
    }
}

impl OptimizerConfig {
    /// The benchmark-scale settings: 128 directions, top 64, k = 16.
    pub fn benchmark() -> Self {
        OptimizerConfig {
            eta: 1.0,
            sigma: 2.0,
            alpha: 0.5,
            directions: 128,
            subspace_k: 16,
            top_b: 64,
            decay: 0.998,
            beta: 1.0,
            scenarios_per_iteration: None,
            normalize_rewards: false,
            rank_key: RankKey::Max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errs.push("optimizer.eta must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            errs.push("optimizer.sigma must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push("optimizer.alpha must be in [0, 1]");
        }
        if self.directions == 0 {
            errs.push("optimizer.directions must be >= 1");
        }
        if self.subspace_k == 0 {
            errs.push("optimizer.subspace_k must be >= 1");
        }
        if self.top_b == 0 || self.top_b > self.directions {
            errs.push("optimizer.top_b must be in 1..=directions");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            errs.push("optimizer.decay must be in (0, 1]");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            errs.push("optimizer.beta must be positive");
        }
        if self.scenarios_per_iteration == Some(0) {
            errs.push("optimizer.scenarios_per_iteration must be >= 1");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }
}

/// One decay step: `η ← ξη`, `σ ← ξσ`.
pub fn decay_schedule(config: &OptimizerConfig) -> OptimizerConfig {
    OptimizerConfig {
        eta: config.eta * config.decay,
        sigma: config.sigma * config.decay,
        ..config.clone()
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Isotropic draw used by vanilla ES.
pub fn sample_isotropic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    standard_normals(rng, n)
}

/// One guided draw. `ε′` is drawn first so the `α = 1` and warm-up paths
/// consume the stream exactly like [`sample_isotropic`].
pub fn sample_guided(subspace: &GradientSubspace, alpha: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut eps = standard_normals(rng, subspace.dim());
    if alpha == 1.0 || subspace.rank() == 0 {
        return eps;
    }
    let z = standard_normals(rng, subspace.rank());
    eps.iter_mut().for_each(|x| *x *= alpha);
    subspace.add_combination(&z, 1.0 - alpha, &mut eps);
    eps
}

/// RNG for direction `index` of `iteration` under `seed`.
pub fn direction_rng(seed: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    rng::rng_for(&[rng::stream::PERTURBATION, seed, iteration, index])
}

/// Draws `count` perturbations, each from its own (seed, iteration, index)
/// stream.
pub fn sample_perturbations(
    subspace: &GradientSubspace,
    alpha: f64,
    count: usize,
    seed: u64,
    iteration: u64,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| sample_guided(subspace, alpha, &mut direction_rng(seed, iteration, i as u64)))
        .collect()
}

/// `θ' = θ + η / (Nσ) Σ rᵢ εᵢ`.
pub fn vanilla_es_update(
    theta: &[f64],
    rewards: &[f64],
    perturbations: &[Vec<f64>],
    eta: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    if rewards.len() != perturbations.len() {
        return Err(Error::dim("rewards per perturbation", perturbations.len(), rewards.len()));
    }
    let scale = eta / (rewards.len() as f64 * sigma);
    let mut out = theta.to_vec();
    for (r, eps) in rewards.iter().zip(perturbations) {
        if eps.len() != theta.len() {
            return Err(Error::dim("perturbation", theta.len(), eps.len()));
        }
        out.iter_mut().zip(eps).for_each(|(o, e)| *o += scale * r * e);
    }
    Ok(out)
}

/// Averaged returns of `θ + σε` and `θ − σε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub plus: f64,
    pub minus: f64,
}

impl RewardPair {
    pub fn new(plus: f64, minus: f64) -> Self {
        RewardPair { plus, minus }
    }

    pub fn diff(&self) -> f64 {
        self.plus - self.minus
    }

    pub fn key(&self, key: RankKey) -> f64 {
        match key {
            RankKey::Max => self.plus.max(self.minus),
            RankKey::Mean => 0.5 * (self.plus + self.minus),
        }
    }
}

/// Indices of the `b` best directions; ties go to the lower index.
pub fn select_top_b(pairs: &[RewardPair], b: usize, key: RankKey) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&i, &j| pairs[j].key(key).total_cmp(&pairs[i].key(key)).then(i.cmp(&j)));
    idx.truncate(b);
    idx
}

/// Standard deviation of the selected rewards, both signs pooled.
pub fn selected_reward_std(pairs: &[RewardPair], selected: &[usize]) -> f64 {
    let vals: Vec<f64> = selected
        .iter()
        .flat_map(|&i| [pairs[i].plus, pairs[i].minus])
        .collect();
    if vals.len() < 2 {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// `g = 1/(bσ) Σ_{i ∈ selected} (rᵢ⁺ − rᵢ⁻) εᵢ`.
pub fn guided_gradient_estimate(
    pairs: &[RewardPair],
    perturbations: &[Vec<f64>],
    selected: &[usize],
    sigma: f64,
) -> Result<Vec<f64>> {
    if pairs.len() != perturbations.len() {
        return Err(Error::dim("reward pairs per perturbation", perturbations.len(), pairs.len()));
    }
    if selected.is_empty() || selected.len() > pairs.len() {
        return Err(Error::config(format!(
            "top-b selection of {} from {} pairs",
            selected.len(),
            pairs.len()
        )));
    }
    let n = perturbations.first().map_or(0, Vec::len);
    let scale = 1.0 / (selected.len() as f64 * sigma);
    let mut g = vec![0.0; n];
    for &i in selected {
        let eps = perturbations
            .get(i)
            .ok_or_else(|| Error::config(format!("selected direction {i} out of range")))?;
        if eps.len() != n {
            return Err(Error::dim("perturbation", n, eps.len()));
        }
        let c = scale * pairs[i].diff();
        g.iter_mut().zip(eps).for_each(|(gi, e)| *gi += c * e);
    }
    Ok(g)
}

/// Plain antithetic estimator over all directions:
/// `g = β/(2σN) Σ εᵢ (rᵢ⁺ − rᵢ⁻)`.
pub fn antithetic_gradient(
    pairs: &[RewardPair],
    perturbations: &[Vec<f64>],
    beta: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..pairs.len()).collect();
    let mut g = guided_gradient_estimate(pairs, perturbations, &all, sigma)?;
    g.iter_mut().for_each(|x| *x *= 0.5 * beta);
    Ok(g)
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub selected: Vec<usize>,
    pub grad_norm: f64,
    /// η and σ that were used for this step, before decay.
    pub eta: f64,
    pub sigma: f64,
    pub subspace_rank: usize,
}

/// Optimizer state carried across iterations.
#[derive(Debug, Clone)]
pub struct GuidedEs {
    pub config: OptimizerConfig,
    pub subspace: GradientSubspace,
    pub seed: u64,
    pub iteration: u64,
}

impl GuidedEs {
    pub fn new(config: OptimizerConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let subspace = GradientSubspace::new(dim, config.subspace_k)?;
        Ok(GuidedEs {
            config,
            subspace,
            seed,
            iteration: 0,
        })
    }

    pub fn perturbations(&self) -> Vec<Vec<f64>> {
        sample_perturbations(
            &self.subspace,
            self.config.alpha,
            self.config.directions,
            self.seed,
            self.iteration,
        )
    }

    /// Top-b gradient step on `theta`. The subspace receives `guide` when
    /// given, the estimated gradient otherwise. Decays η and σ afterwards.
    pub fn step(
        &mut self,
        theta: &mut [f64],
        pairs: &[RewardPair],
        perturbations: &[Vec<f64>],
        guide: Option<&[f64]>,
    ) -> Result<StepInfo> {
        let cfg = &self.config;
        let selected = select_top_b(pairs, cfg.top_b, cfg.rank_key);
        let mut g = guided_gradient_estimate(pairs, perturbations, &selected, cfg.sigma)?;
        if g.len() != theta.len() {
            return Err(Error::dim("gradient", theta.len(), g.len()));
        }
        if cfg.normalize_rewards {
            let sd = selected_reward_std(pairs, &selected);
            if sd > 0.0 {
                g.iter_mut().for_each(|x| *x /= sd);
            }
        }
        if !g.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("search gradient"));
        }
        theta.iter_mut().zip(&g).for_each(|(t, gi)| *t += cfg.eta * gi);
        let info = StepInfo {
            selected,
            grad_norm: norm(&g),
            eta: cfg.eta,
            sigma: cfg.sigma,
            subspace_rank: 0,
        };
        self.subspace.update(guide.unwrap_or(&g))?;
        self.config = decay_schedule(&self.config);
        self.iteration += 1;
        Ok(StepInfo {
            subspace_rank: self.subspace.rank(),
            ..info
        })
    }
}
