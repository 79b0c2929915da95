//! Recurrent policy network over a flat parameter vector.
//!
//! The network is one LSTM layer followed by fully connected `tanh` layers
//! and a linear output layer. The first `N` outputs pass through
//! `0.1 * (1 + tanh(.))` to become shed fractions in `[0, 0.2]`; the last five
//! are the raw learned recovery criterion.
//!
//! All weights live in one contiguous `Vec<f64>` so evolution strategies can
//! perturb them as a single vector. Tensor order in the flat vector is fixed
//! by [`ParamLayout`]:
//!
//! | name     | shape                     |
//! |----------|---------------------------|
//! | `lstm.w` | `[4H, I + H]` (gates i,f,g,o) |
//! | `lstm.b` | `[4H]`                    |
//! | `fcK.w`  | `[F_K, F_{K-1}]`          |
//! | `fcK.b`  | `[F_K]`                   |
//! | `out.w`  | `[N + 5, F_last]`         |
//! | `out.b`  | `[N + 5]`                 |
//!
//! where `I = M + N + latent_dim` and every matrix is row-major.

mod checkpoint;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::grid::MAX_SHED_FRACTION;
use crate::rng;

/// Number of learned criterion outputs: v1, v2, v3, t1, t2.
pub const CRITERION_OUTPUTS: usize = 5;
pub const DEFAULT_LATENT_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Monitored voltages in the observation.
    pub monitored: usize,
    /// Controllable load buses.
    pub controllable: usize,
    pub latent_dim: usize,
    /// LSTM width followed by fully connected widths.
    pub hidden: Vec<usize>,
}

impl PolicyConfig {
    pub fn desk(bus_count: usize) -> Self {
        PolicyConfig {
            monitored: bus_count,
            controllable: bus_count,
            latent_dim: DEFAULT_LATENT_DIM,
            hidden: vec![32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.monitored == 0 || self.controllable == 0 || self.latent_dim == 0 {
            return Err(Error::config("policy dimensions must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "policy.hidden needs at least the LSTM width, all entries positive",
            ));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.monitored + self.controllable
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + self.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.controllable + CRITERION_OUTPUTS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered tensor records describing a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub tensors: Vec<TensorSpec>,
}

impl ParamLayout {
    pub fn for_config(config: &PolicyConfig) -> Self {
        let lstm = config.hidden[0];
        let mut tensors = vec![
            TensorSpec {
                name: "lstm.w".into(),
                shape: vec![4 * lstm, config.input_dim() + lstm],
            },
            TensorSpec {
                name: "lstm.b".into(),
                shape: vec![4 * lstm],
            },
        ];
        let mut prev = lstm;
        for (i, &width) in config.hidden[1..].iter().enumerate() {
            tensors.push(TensorSpec {
                name: format!("fc{i}.w"),
                shape: vec![width, prev],
            });
            tensors.push(TensorSpec {
                name: format!("fc{i}.b"),
                shape: vec![width],
            });
            prev = width;
        }
        tensors.push(TensorSpec {
            name: "out.w".into(),
            shape: vec![config.output_dim(), prev],
        });
        tensors.push(TensorSpec {
            name: "out.b".into(),
            shape: vec![config.output_dim()],
        });
        ParamLayout { tensors }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(TensorSpec::len).sum()
    }

    /// Start offset of each tensor in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .scan(0, |acc, t| {
                let start = *acc;
                *acc += t.len();
                Some(start)
            })
            .collect()
    }
}

impl fmt::Display for ParamLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .tensors
            .iter()
            .map(|t| {
                let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
                format!("{}[{}]", t.name, dims.join("x"))
            })
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// A named tensor copied out of a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub spec: TensorSpec,
    pub data: Vec<f64>,
}

/// Flat policy parameters plus the layout that gives them shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub flat: Vec<f64>,
    pub layout: ParamLayout,
    /// Incremented on every optimizer update.
    pub version: u64,
}

impl PolicyParams {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn unflatten(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layout.tensors.len());
        let mut at = 0;
        for spec in &self.layout.tensors {
            let n = spec.len();
            out.push(Tensor {
                spec: spec.clone(),
                data: self.flat[at..at + n].to_vec(),
            });
            at += n;
        }
        out
    }

    pub fn flatten(tensors: &[Tensor]) -> Result<Self> {
        let mut flat = Vec::new();
        for t in tensors {
            if t.data.len() != t.spec.len() {
                return Err(Error::dim("tensor data", t.spec.len(), t.data.len()));
            }
            flat.extend_from_slice(&t.data);
        }
        Ok(PolicyParams {
            flat,
            layout: ParamLayout {
                tensors: tensors.iter().map(|t| t.spec.clone()).collect(),
            },
            version: 0,
        })
    }
}

/// LSTM hidden and cell state carried across control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(width: usize) -> Self {
        RecurrentState {
            hidden: vec![0.0; width],
            cell: vec![0.0; width],
        }
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|x| *x = 0.0);
        self.cell.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Shed fraction per controllable bus, in `[0, 0.2]`.
    pub shed_actions: Vec<f64>,
    /// Unbounded criterion outputs, clamped downstream.
    pub criterion_raw: [f64; CRITERION_OUTPUTS],
}

/// Reusable buffers for allocation-free forward passes.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    concat: Vec<f64>,
    gates: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    out: Vec<f64>,
}

/// Network architecture; evaluates any parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    config: PolicyConfig,
    layout: ParamLayout,
    offsets: Vec<usize>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W x + b` with row-major `W`.
#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(
        w.chunks_exact(cols)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()),
    );
}

impl PolicyNet {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::for_config(&config);
        let offsets = layout.offsets();
        Ok(PolicyNet {
            config,
            layout,
            offsets,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }

    pub fn recurrent_width(&self) -> usize {
        self.config.hidden[0]
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.recurrent_width())
    }

    /// Weights ~ N(0, (0.1 / sqrt(fan_in))^2), biases zero.
    pub fn init_params(&self, seed: u64) -> PolicyParams {
        let mut rng = rng::rng_for(&[rng::stream::INIT, seed]);
        let mut flat = Vec::with_capacity(self.param_count());
        for spec in &self.layout.tensors {
            if spec.shape.len() == 2 {
                let scale = 0.1 / (spec.shape[1] as f64).sqrt();
                for _ in 0..spec.len() {
                    let z: f64 = rng.sample(StandardNormal);
                    flat.push(scale * z);
                }
            } else {
                flat.extend(std::iter::repeat_n(0.0, spec.len()));
            }
        }
        PolicyParams {
            flat,
            layout: self.layout.clone(),
            version: 0,
        }
    }

    pub fn check_params(&self, params: &PolicyParams) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::LayoutMismatch {
                expected: self.layout.to_string(),
                found: params.layout.to_string(),
            });
        }
        if params.flat.len() != self.param_count() {
            return Err(Error::dim("policy parameters", self.param_count(), params.flat.len()));
        }
        Ok(())
    }

    fn tensor<'a>(&self, flat: &'a [f64], idx: usize) -> &'a [f64] {
        let start = self.offsets[idx];
        &flat[start..start + self.layout.tensors[idx].len()]
    }

    /// Pure forward pass.
    pub fn forward(
        &self,
        params: &[f64],
        state: &[f64],
        latent: &[f64],
        recurrent: &RecurrentState,
    ) -> Result<(PolicyOutput, RecurrentState)> {
        let mut next = recurrent.clone();
        let mut out = PolicyOutput {
            shed_actions: Vec::new(),
            criterion_raw: [0.0; CRITERION_OUTPUTS],
        };
        self.forward_into(params, state, latent, &mut next, &mut Scratch::default(), &mut out)?;
        Ok((out, next))
    }

    /// Forward pass that updates `recurrent` in place and reuses buffers.
    pub fn forward_into(
        &self,
        params: &[f64],
        state: &[f64],
        latent: &[f64],
        recurrent: &mut RecurrentState,
        scratch: &mut Scratch,
        out: &mut PolicyOutput,
    ) -> Result<()> {
        let cfg = &self.config;
        if params.len() != self.param_count() {
            return Err(Error::dim("policy parameters", self.param_count(), params.len()));
        }
        if state.len() != cfg.state_dim() {
            return Err(Error::dim("policy state", cfg.state_dim(), state.len()));
        }
        if latent.len() != cfg.latent_dim {
            return Err(Error::dim("policy latent", cfg.latent_dim, latent.len()));
        }
        if !state.iter().chain(latent).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("policy input"));
        }
        let h = self.recurrent_width();
        if recurrent.hidden.len() != h || recurrent.cell.len() != h {
            return Err(Error::dim("recurrent state", h, recurrent.hidden.len()));
        }

        scratch.concat.clear();
        scratch.concat.extend_from_slice(state);
        scratch.concat.extend_from_slice(latent);
        scratch.concat.extend_from_slice(&recurrent.hidden);
        affine(
            self.tensor(params, 0),
            self.tensor(params, 1),
            &scratch.concat,
            &mut scratch.gates,
        );
        let (gi, rest) = scratch.gates.split_at(h);
        let (gf, rest) = rest.split_at(h);
        let (gg, go) = rest.split_at(h);
        for j in 0..h {
            let c = sigmoid(gf[j]) * recurrent.cell[j] + sigmoid(gi[j]) * gg[j].tanh();
            recurrent.cell[j] = c;
            recurrent.hidden[j] = sigmoid(go[j]) * c.tanh();
        }

        scratch.a.clear();
        scratch.a.extend_from_slice(&recurrent.hidden);
        let fc_layers = cfg.hidden.len() - 1;
        for layer in 0..fc_layers {
            let w = self.tensor(params, 2 + 2 * layer);
            let b = self.tensor(params, 3 + 2 * layer);
            affine(w, b, &scratch.a, &mut scratch.b);
            scratch.b.iter_mut().for_each(|x| *x = x.tanh());
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        let last = 2 + 2 * fc_layers;
        affine(
            self.tensor(params, last),
            self.tensor(params, last + 1),
            &scratch.a,
            &mut scratch.out,
        );

        let n = cfg.controllable;
        out.shed_actions.clear();
        out.shed_actions
            .extend(scratch.out[..n].iter().map(|&y| 0.5 * MAX_SHED_FRACTION * (1.0 + y.tanh())));
        out.criterion_raw.copy_from_slice(&scratch.out[n..n + CRITERION_OUTPUTS]);
        Ok(())
    }
}
