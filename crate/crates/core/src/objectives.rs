//! Closed-form test objectives with analytic gradients and a corrupted
//! surrogate gradient, for checking the optimizers without the simulator.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::es::{dot, norm, GuidedEs, OptimizerConfig, RewardPair};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    /// `f(θ) = −½ θᵀAθ` with `A` symmetric positive definite, row-major.
    Quadratic { a: Vec<f64> },
    /// `f(θ) = vᵀθ`.
    Linear { v: Vec<f64> },
}

/// How the surrogate gradient departs from the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Rotation away from the true gradient, degrees, in `[0, 90)`.
    pub angle_deg: f64,
    /// Seed of the fixed reference direction that, with the true gradient,
    /// spans the rotation plane.
    pub plane_seed: u64,
    /// Constant additive bias. Scaled down where needed so the surrogate
    /// keeps a positive inner product with the true gradient.
    pub bias: Option<Vec<f64>>,
}

impl Corruption {
    pub fn none() -> Self {
        Corruption {
            angle_deg: 0.0,
            plane_seed: 0,
            bias: None,
        }
    }

    pub fn rotation(angle_deg: f64) -> Self {
        Corruption {
            angle_deg,
            ..Self::none()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    pub kind: ObjectiveKind,
    pub dim: usize,
    pub corruption: Corruption,
    reference: Vec<f64>,
}

impl SyntheticObjective {
    pub fn new(kind: ObjectiveKind, corruption: Corruption) -> Result<Self> {
        let dim = match &kind {
            ObjectiveKind::Quadratic { a } => {
                let n = (a.len() as f64).sqrt().round() as usize;
                if n * n != a.len() || n == 0 {
                    return Err(Error::config("quadratic matrix must be square and non-empty"));
                }
                n
            }
            ObjectiveKind::Linear { v } => v.len(),
        };
        if dim == 0 {
            return Err(Error::config("objective dimension must be positive"));
        }
        if !(0.0..90.0).contains(&corruption.angle_deg) {
            return Err(Error::config("corruption angle must be in [0, 90) degrees"));
        }
        if let Some(b) = &corruption.bias {
            if b.len() != dim {
                return Err(Error::dim("corruption bias", dim, b.len()));
            }
        }
        let mut r = rng::rng_for(&[corruption.plane_seed, 0xC0]);
        let reference = (0..dim).map(|_| r.sample(StandardNormal)).collect();
        Ok(SyntheticObjective {
            kind,
            dim,
            corruption,
            reference,
        })
    }

    pub fn quadratic_identity(n: usize, corruption: Corruption) -> Result<Self> {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        Self::new(ObjectiveKind::Quadratic { a }, corruption)
    }

    pub fn linear(v: Vec<f64>) -> Result<Self> {
        Self::new(ObjectiveKind::Linear { v }, Corruption::none())
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::dim("objective input", self.dim, theta.len()));
        }
        Ok(())
    }

    fn a_times(&self, a: &[f64], theta: &[f64]) -> Vec<f64> {
        a.chunks_exact(self.dim).map(|row| dot(row, theta)).collect()
    }

    pub fn evaluate(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic { a } => -0.5 * dot(theta, &self.a_times(a, theta)),
            ObjectiveKind::Linear { v } => dot(v, theta),
        })
    }

    pub fn true_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(match &self.kind {
            ObjectiveKind::Quadratic { a } => self.a_times(a, theta).into_iter().map(|x| -x).collect(),
            ObjectiveKind::Linear { v } => v.clone(),
        })
    }

    /// True gradient rotated by the corruption angle in the plane spanned by
    /// the gradient and the fixed reference direction, then biased.
    pub fn surrogate_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let g = self.true_gradient(theta)?;
        let gn = norm(&g);
        if gn == 0.0 {
            return Ok(g);
        }
        let phi = self.corruption.angle_deg.to_radians();
        let mut s = g.clone();
        if phi != 0.0 {
            let c = dot(&self.reference, &g) / (gn * gn);
            let mut w: Vec<f64> = self.reference.iter().zip(&g).map(|(r, gi)| r - c * gi).collect();
            let wn = norm(&w);
            w.iter_mut().for_each(|x| *x /= wn);
            for i in 0..self.dim {
                s[i] = phi.cos() * g[i] + phi.sin() * gn * w[i];
            }
        }
        if let Some(b) = &self.corruption.bias {
            let bn = norm(b);
            if bn > 0.0 {
                let cap = 0.5 * gn * phi.cos();
                let scale = (cap / bn).min(1.0);
                s.iter_mut().zip(b).for_each(|(x, bi)| *x += scale * bi);
            }
        }
        Ok(s)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// One arm of a convergence comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub name: String,
    pub optimizer: OptimizerConfig,
    /// Feed the objective's surrogate gradient into the subspace each
    /// iteration instead of the search gradient.
    pub use_surrogate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub arm: String,
    pub seed: u64,
    /// `None` when the budget ran out first.
    pub iterations: Option<usize>,
    pub final_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSummary {
    pub runs: Vec<SeedRun>,
    /// Censored runs count as `budget + 1`.
    pub median_iterations: f64,
    pub censored: usize,
}

/// Runs `arm` from `start` until `f(θ) ≥ threshold` or `budget` iterations.
pub fn convergence_run(
    arm: &ExperimentArm,
    objective: &SyntheticObjective,
    start: &[f64],
    seed: u64,
    threshold: f64,
    budget: usize,
) -> Result<SeedRun> {
    let mut es = GuidedEs::new(arm.optimizer.clone(), objective.dim, seed)?;
    let mut theta = start.to_vec();
    let mut plus = vec![0.0; objective.dim];
    let mut minus = vec![0.0; objective.dim];
    for it in 0..budget {
        let value = objective.evaluate(&theta)?;
        if value >= threshold {
            return Ok(SeedRun {
                arm: arm.name.clone(),
                seed,
                iterations: Some(it),
                final_value: value,
            });
        }
        let perts = es.perturbations();
        let sigma = es.config.sigma;
        let mut pairs = Vec::with_capacity(perts.len());
        for eps in &perts {
            for i in 0..theta.len() {
                plus[i] = theta[i] + sigma * eps[i];
                minus[i] = theta[i] - sigma * eps[i];
            }
            pairs.push(RewardPair::new(objective.evaluate(&plus)?, objective.evaluate(&minus)?));
        }
        let guide = if arm.use_surrogate {
            Some(objective.surrogate_gradient(&theta)?)
        } else {
            None
        };
        es.step(&mut theta, &pairs, &perts, guide.as_deref())?;
    }
    let value = objective.evaluate(&theta)?;
    Ok(SeedRun {
        arm: arm.name.clone(),
        seed,
        iterations: (value >= threshold).then_some(budget),
        final_value: value,
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn convergence_experiment(
    arm: &ExperimentArm,
    objective: &SyntheticObjective,
    start: &[f64],
    seeds: &[u64],
    threshold: f64,
    budget: usize,
) -> Result<ConvergenceSummary> {
    let runs = seeds
        .iter()
        .map(|&s| convergence_run(arm, objective, start, s, threshold, budget))
        .collect::<Result<Vec<_>>>()?;
    let mut its: Vec<f64> = runs
        .iter()
        .map(|r| r.iterations.map_or(budget as f64 + 1.0, |i| i as f64))
        .collect();
    Ok(ConvergenceSummary {
        censored: runs.iter().filter(|r| r.iterations.is_none()).count(),
        median_iterations: median(&mut its),
        runs,
    })
}

/// The quadratic comparison: 100-dim identity quadratic, 20° surrogate,
/// start at distance 10 from the optimum, threshold at 1e-3 of the start
/// value.
pub mod standard {
    use super::*;
    use crate::es::RankKey;

    pub const DIM: usize = 100;
    pub const ANGLE_DEG: f64 = 20.0;
    pub const BUDGET: usize = 2000;

    pub fn objective() -> SyntheticObjective {
        SyntheticObjective::quadratic_identity(DIM, Corruption::rotation(ANGLE_DEG))
            .expect("valid objective")
    }

    pub fn start() -> Vec<f64> {
        vec![10.0 / (DIM as f64).sqrt(); DIM]
    }

    pub fn threshold() -> f64 {
        -0.5 * 100.0 * 1e-3
    }

    fn optimizer(alpha: f64) -> OptimizerConfig {
        OptimizerConfig {
            eta: 0.1,
            sigma: 0.1,
            alpha,
            directions: 16,
            subspace_k: 1,
            top_b: 16,
            decay: 1.0,
            beta: 1.0,
            scenarios_per_iteration: None,
            normalize_rewards: false,
            rank_key: RankKey::Max,
        }
    }

    pub fn vanilla() -> ExperimentArm {
        ExperimentArm {
            name: "vanilla".into(),
            optimizer: optimizer(1.0),
            use_surrogate: false,
        }
    }

    pub fn guided() -> ExperimentArm {
        ExperimentArm {
            name: "guided".into(),
            optimizer: optimizer(0.5),
            use_surrogate: true,
        }
    }

    /// Pure subspace search along an uncorrupted surrogate.
    pub fn exact_subspace() -> (ExperimentArm, SyntheticObjective) {
        let arm = ExperimentArm {
            name: "subspace-exact".into(),
            optimizer: optimizer(0.0),
            use_surrogate: true,
        };
        let obj = SyntheticObjective::quadratic_identity(DIM, Corruption::none()).expect("valid");
        (arm, obj)
    }
}
