//! Run configuration, training variants and the run manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::es::OptimizerConfig;
use crate::grid::{CriterionCurve, GridConfig, ScenarioSetConfig};
use crate::mask::{CriterionBounds, MaskMode};
use crate::meta::{HillClimbConfig, DEFAULT_T_INNER};
use crate::policy::PolicyConfig;

/// Training log CSV layout version.
pub const LOG_SCHEMA_VERSION: u32 = 1;
/// Test report CSV layout version.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// The five compared training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Isotropic antithetic search with reward-std normalization.
    Ars,
    Guided,
    GuidedMeta,
    GuidedMetaMask,
    GuidedMetaTam,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Ars,
        Variant::Guided,
        Variant::GuidedMeta,
        Variant::GuidedMetaMask,
        Variant::GuidedMetaTam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ars => "ars",
            Variant::Guided => "guided",
            Variant::GuidedMeta => "guided-meta",
            Variant::GuidedMetaMask => "guided-meta-mask",
            Variant::GuidedMetaTam => "guided-meta-tam",
        }
    }

    pub fn meta(&self) -> bool {
        !matches!(self, Variant::Ars | Variant::Guided)
    }

    pub fn mask(&self) -> MaskMode {
        match self {
            Variant::GuidedMetaMask => MaskMode::Fixed,
            Variant::GuidedMetaTam => MaskMode::Tam,
            _ => MaskMode::None,
        }
    }

    /// Sets meta, mask and the isotropic-search switch on `config`.
    pub fn apply(&self, config: &mut RunConfig) {
        config.variant = Some(*self);
        config.meta.enabled = self.meta();
        config.mask.mode = self.mask();
        if *self == Variant::Ars {
            config.optimizer.alpha = 1.0;
            config.optimizer.normalize_rewards = true;
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "es" | "ars" => Ok(Variant::Ars),
            "guided" => Ok(Variant::Guided),
            "guided-meta" => Ok(Variant::GuidedMeta),
            "guided-meta-mask" => Ok(Variant::GuidedMetaMask),
            "guided-meta-tam" => Ok(Variant::GuidedMetaTam),
            other => Err(Error::config(format!(
                "unknown variant `{other}` (expected one of es, ars, guided, guided-meta, \
                 guided-meta-mask, guided-meta-tam)"
            ))),
        }
    }
}

/// A missing set takes the desk default; a given set must be complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub training: ScenarioSetConfig,
    pub test: ScenarioSetConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            training: ScenarioSetConfig::desk_training(),
            test: ScenarioSetConfig::desk_held_out(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            latent_dim: crate::policy::DEFAULT_LATENT_DIM,
            hidden: vec![32, 32],
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaSection {
    pub enabled: bool,
    pub t_inner: usize,
    /// Episodes per scenario in each training-time latent refresh.
    pub train_budget: usize,
    /// Episodes per scenario for test-time adaptation.
    pub adapt_budget: usize,
    pub hill_climb: HillClimbConfig,
}

impl Default for MetaSection {
    fn default() -> Self {
        MetaSection {
            enabled: true,
            t_inner: DEFAULT_T_INNER,
            train_budget: 10,
            adapt_budget: 10,
            hill_climb: HillClimbConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub mode: MaskMode,
    /// Curve used by the fixed mask. Defaults to the recovery levels: a
    /// mask that stops shedding at 0.9 p.u. cannot lift a bus to the 0.95
    /// final check.
    pub fixed: CriterionCurve,
    /// Bounds for the trainable mask's learned curve.
    pub bounds: CriterionBounds,
}

impl Default for MaskSection {
    fn default() -> Self {
        MaskSection {
            mode: MaskMode::Tam,
            fixed: CriterionCurve::recovery_levels(),
            bounds: CriterionBounds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub iterations: usize,
    /// Checkpoint cadence in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Recipe that set `meta.enabled`, `mask.mode` and the optimizer
    /// switches; `None` means they were set by hand.
    pub variant: Option<Variant>,
    pub env: GridConfig,
    pub scenarios: ScenarioConfig,
    pub optimizer: OptimizerConfig,
    pub policy: PolicySection,
    pub meta: MetaSection,
    pub mask: MaskSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            master_seed: 0,
            iterations: 100,
            checkpoint_every: 25,
            output_dir: PathBuf::from("runs/default"),
            variant: None,
            env: GridConfig::default(),
            scenarios: ScenarioConfig::default(),
            optimizer: OptimizerConfig::default(),
            policy: PolicySection::default(),
            meta: MetaSection::default(),
            mask: MaskSection::default(),
        };
        Variant::GuidedMetaTam.apply(&mut c);
        c
    }
}

impl RunConfig {
    /// Benchmark-shaped sizes: 128 directions, top 64, 36 training and 136
    /// test scenarios. Used for accounting dry runs.
    pub fn benchmark_shaped() -> Self {
        let mut c = RunConfig {
            optimizer: OptimizerConfig::benchmark(),
            ..Default::default()
        };
        c.env.bus_count = 40;
        c.scenarios.training.fault_buses = (0..9).collect();
        c.scenarios.test.fault_buses = (0..34).collect();
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            monitored: self.env.bus_count,
            controllable: self.env.bus_count,
            latent_dim: self.policy.latent_dim,
            hidden: self.policy.hidden.clone(),
        }
    }

    pub fn variant_label(&self) -> String {
        self.variant
            .map(|v| v.name().to_string())
            .unwrap_or_else(|| "custom".into())
    }

    /// Scenarios evaluated per direction each iteration.
    pub fn scenarios_per_iteration(&self) -> usize {
        self.optimizer
            .scenarios_per_iteration
            .unwrap_or(self.scenarios.training.len())
    }

    pub fn episodes_per_iteration(&self) -> usize {
        2 * self.optimizer.directions * self.scenarios_per_iteration()
    }

    /// Checks every block; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs: Vec<String> = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                errs.push(format!("[{section}] {e}"));
            }
        };
        check("env", self.env.validate());
        check("optimizer", self.optimizer.validate());
        check("policy", self.policy_config().validate());
        check("mask", self.mask.bounds.validate());
        check("mask", self.mask.fixed.validate());
        check(
            "scenarios.training",
            crate::grid::build_scenario_set(&self.scenarios.training, self.env.bus_count).map(|_| ()),
        );
        check(
            "scenarios.test",
            crate::grid::build_scenario_set(&self.scenarios.test, self.env.bus_count).map(|_| ()),
        );
        if let Some(m) = self.optimizer.scenarios_per_iteration {
            if m > self.scenarios.training.len() {
                check(
                    "optimizer",
                    Err(Error::config(format!(
                        "scenarios_per_iteration {m} exceeds the {} training scenarios",
                        self.scenarios.training.len()
                    ))),
                );
            }
        }
        if self.meta.t_inner == 0 {
            check("meta", Err(Error::config("t_inner must be >= 1")));
        }
        if self.meta.enabled && self.meta.train_budget == 0 {
            check("meta", Err(Error::config("train_budget must be >= 1 when meta is enabled")));
        }
        if !(self.meta.hill_climb.initial_step > 0.0) || self.meta.hill_climb.patience == 0 {
            check("meta", Err(Error::config("hill_climb needs a positive step and patience")));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("\n")))
        }
    }

    /// SHA-256 over the canonical JSON form, with the output directory
    /// blanked so relocating a run keeps its hash.
    pub fn config_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

/// Everything needed to regenerate a run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub log_schema_version: u32,
    pub report_schema_version: u32,
    pub config_hash: String,
    pub master_seed: u64,
    pub variant: String,
    pub episodes_per_iteration: usize,
    pub parameter_count: usize,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(config: &RunConfig, parameter_count: usize) -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            log_schema_version: LOG_SCHEMA_VERSION,
            report_schema_version: REPORT_SCHEMA_VERSION,
            config_hash: hex::encode(config.config_hash()),
            master_seed: config.master_seed,
            variant: config.variant_label(),
            episodes_per_iteration: config.episodes_per_iteration(),
            parameter_count,
            config: config.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
