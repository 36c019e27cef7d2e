//! Run configuration in TOML form. Unknown keys are rejected; `seed`,
//! `tasks` and `classes_per_task` are required, everything else has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::LocalHyperparams;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::Activation;
use crate::proxy::{InputGradStrategy, ReconstructionParams};

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Balanced loss, distillation and proxy server.
    Lga,
    /// Everything except the distillation term.
    NoSdl,
    /// Everything except the balancing weights.
    NoCbl,
    /// Plain cross-entropy federated averaging with exemplar memory.
    FedavgCe,
}

impl Variant {
    pub fn balance(self) -> bool {
        matches!(self, Variant::Lga | Variant::NoSdl)
    }

    pub fn distill(self) -> bool {
        matches!(self, Variant::Lga | Variant::NoCbl)
    }

    pub fn proxy(self) -> bool {
        self != Variant::FedavgCe
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsSection {
    pub initial: usize,
    pub added_per_task: usize,
    pub selected: usize,
    pub z_o_fraction: f64,
    /// Training samples a client receives for each class it is assigned.
    pub samples_per_class: usize,
}

impl Default for ClientsSection {
    fn default() -> Self {
        Self { initial: 30, added_per_task: 10, selected: 10, z_o_fraction: 0.2, samples_per_class: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSection {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub r_e: f64,
    pub epsilon: f64,
    pub perturb_steps: usize,
    pub mu: f64,
}

impl Default for LocalSection {
    fn default() -> Self {
        let h = LocalHyperparams::default();
        Self {
            gamma1: h.gamma1,
            gamma2: h.gamma2,
            lr: h.lr,
            epochs: h.epochs,
            batch: h.batch,
            r_e: h.r_e,
            epsilon: h.epsilon,
            perturb_steps: h.perturb_steps,
            mu: h.perturb_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxySection {
    pub xi: f64,
    pub upsilon: usize,
    pub recon_steps: usize,
    pub recon_lr: f64,
    pub strategy: InputGradStrategy,
    pub encoder_hidden: Vec<usize>,
}

impl Default for ProxySection {
    fn default() -> Self {
        Self {
            xi: 0.1,
            upsilon: 5,
            recon_steps: 300,
            recon_lr: 1.0,
            strategy: InputGradStrategy::Analytic,
            encoder_hidden: vec![8, 8, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorySection {
    pub budget: usize,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self { budget: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_sigma: f64,
    /// Flat dataset file; replaces the synthetic generator when set.
    pub import: Option<PathBuf>,
    /// Per-class test share for imported data.
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            classes: s.classes,
            dim: s.dim,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            noise_sigma: s.noise_sigma,
            import: None,
            test_fraction: 0.25,
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            dim: self.dim,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            noise_sigma: self.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![48, 32], activation: Activation::Sigmoid }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// Complete simulation configuration (the file form is the same structure).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_rounds")]
    pub rounds_per_task: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub clients: ClientsSection,
    #[serde(default)]
    pub local: LocalSection,
    #[serde(default)]
    pub proxy: ProxySection,
    #[serde(default)]
    pub memory: MemorySection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub output: OutputSection,
}

pub type RunConfig = SimConfig;

fn default_rho() -> f64 {
    0.6
}

fn default_rounds() -> usize {
    10
}

fn default_variant() -> Variant {
    Variant::Lga
}

/// Desk-scale preset shipped as `configs/desk.toml`.
pub const DESK_TOML: &str = include_str!("../../../configs/desk.toml");

impl SimConfig {
    /// Paper defaults with the three required keys filled in.
    pub fn with_defaults(seed: u64, tasks: usize, classes_per_task: usize) -> Self {
        Self {
            seed,
            tasks,
            classes_per_task,
            rho: default_rho(),
            rounds_per_task: default_rounds(),
            variant: default_variant(),
            clients: ClientsSection::default(),
            local: LocalSection::default(),
            proxy: ProxySection::default(),
            memory: MemorySection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            output: OutputSection::default(),
        }
    }

    /// The desk benchmark preset with the given seed.
    pub fn desk(seed: u64) -> Self {
        let mut c = Self::from_toml(DESK_TOML).expect("bundled desk preset parses");
        c.seed = seed;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn local_hyperparams(&self) -> LocalHyperparams {
        let l = &self.local;
        LocalHyperparams {
            gamma1: l.gamma1,
            gamma2: l.gamma2,
            lr: l.lr,
            epochs: l.epochs,
            batch: l.batch,
            r_e: l.r_e,
            epsilon: l.epsilon,
            perturb_steps: l.perturb_steps,
            perturb_lr: l.mu,
            balance: self.variant.balance(),
            distill: self.variant.distill(),
        }
    }

    pub fn reconstruction_params(&self) -> ReconstructionParams {
        ReconstructionParams {
            steps: self.proxy.recon_steps,
            update_rate: self.proxy.recon_lr,
            strategy: self.proxy.strategy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tasks == 0 || self.classes_per_task == 0 {
            return fail("tasks and classes_per_task must be positive".into());
        }
        if self.data.import.is_none() && self.tasks * self.classes_per_task > self.data.classes {
            return fail(format!(
                "{} tasks x {} classes exceed data.classes = {}",
                self.tasks, self.classes_per_task, self.data.classes
            ));
        }
        if self.rounds_per_task == 0 {
            return fail("rounds_per_task must be at least 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho = {} outside (0, 1]", self.rho));
        }
        let c = &self.clients;
        if c.selected == 0 || c.selected > c.initial {
            return fail(format!("clients.selected = {} must be in 1..={}", c.selected, c.initial));
        }
        if !(0.0..=1.0).contains(&c.z_o_fraction) {
            return fail(format!("clients.z_o_fraction = {} outside [0, 1]", c.z_o_fraction));
        }
        if c.samples_per_class == 0 {
            return fail("clients.samples_per_class must be positive".into());
        }
        self.local_hyperparams().validate()?;
        if !(self.proxy.xi > 0.0 && self.proxy.xi <= 1.0) || self.proxy.upsilon == 0 {
            return fail("proxy.xi must be in (0, 1] and proxy.upsilon ≥ 1".into());
        }
        if !(self.proxy.recon_lr > 0.0) {
            return fail("proxy.recon_lr must be positive".into());
        }
        if self.proxy.encoder_hidden.len() != 3 || self.proxy.encoder_hidden.contains(&0) {
            return fail("proxy.encoder_hidden must list three positive widths".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return fail("model.hidden must list at least one positive width".into());
        }
        if self.data.import.is_none() && (self.data.dim == 0 || self.data.train_per_class == 0 || self.data.test_per_class == 0) {
            return fail("data.dim, data.train_per_class and data.test_per_class must be positive".into());
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return fail("data.test_fraction must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_paper_defaults() {
        let c = SimConfig::from_toml("seed = 1\ntasks = 5\nclasses_per_task = 2\n").unwrap();
        assert_eq!(c, SimConfig::with_defaults(1, 5, 2));
        assert_eq!(c.local.gamma1, 1.0);
        assert_eq!(c.local.r_e, 1.2);
        assert_eq!(c.local.epsilon, 0.1);
        assert_eq!(c.local.epochs, 20);
        assert_eq!(c.proxy.xi, 0.1);
        assert_eq!(c.proxy.upsilon, 5);
        assert_eq!(c.clients.selected, 10);
        assert_eq!(c.local.lr, 2.0);
    }

    #[test]
    fn missing_key_is_named() {
        let e = SimConfig::from_toml("seed = 1\ntasks = 5\n").unwrap_err().to_string();
        assert!(e.contains("classes_per_task"), "{e}");
    }

    #[test]
    fn unknown_key_is_rejected_with_location() {
        let e = SimConfig::from_toml("seed = 1\ntasks = 5\nclasses_per_task = 2\n[local]\nlearning_rate = 3.0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("learning_rate") && e.contains("line 5"), "{e}");
    }

    #[test]
    fn desk_preset_round_trips() {
        let c = SimConfig::desk(7);
        assert_eq!(c.seed, 7);
        let again = SimConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn validation() {
        let mut c = SimConfig::with_defaults(0, 5, 2);
        c.clients.selected = 31;
        assert!(c.validate().is_err());
        let mut c = SimConfig::with_defaults(0, 6, 2);
        assert!(c.validate().is_err());
        c.tasks = 5;
        c.rounds_per_task = 0;
        assert!(c.validate().is_err());
    }
}
