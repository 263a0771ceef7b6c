//! Experiment configuration, read from a sectioned TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AttackKind, AttackSpec};
use crate::corpus::{build_vocab, TaskKind};
use crate::policy::{Arch, SamplerSpec};
use crate::sentinel::{DefenseKind, DefenseSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ConfigError {
    fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Horizontal,
    Vertical,
}

/// How vertical nodes pick their prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Each node draws its own prompts from its local stream.
    #[default]
    Independent,
    /// Node k takes the k-th slice of the global draw.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    /// Defaults to a value derived from the training seed.
    pub dataset_seed: Option<u64>,
    pub target_rate: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::TagMath,
            n_train: 1024,
            n_val: 256,
            dataset_seed: None,
            target_rate: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub embed: usize,
    pub hidden: usize,
    pub window: usize,
    pub prompt_slots: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Defaults to a value derived from the training seed.
    pub init_seed: Option<u64>,
    /// Supervised steps on reference solutions before round 0.
    pub warm_start_steps: usize,
    pub warm_start_batch: usize,
    pub warm_start_lr: f64,
    /// Per-node hidden sizes for heterogeneous runs; empty means `hidden`.
    pub hidden_sizes: Vec<usize>,
}

impl Default for PolicySection {
    fn default() -> Self {
        let arch = Arch::default();
        let sampler = SamplerSpec::default();
        Self {
            embed: arch.embed,
            hidden: arch.hidden,
            window: arch.window,
            prompt_slots: arch.prompt_slots,
            top_k: sampler.top_k,
            temperature: sampler.temperature,
            max_len: sampler.max_len,
            init_seed: None,
            warm_start_steps: 60,
            warm_start_batch: 32,
            warm_start_lr: 1e-2,
            hidden_sizes: Vec::new(),
        }
    }
}

impl PolicySection {
    pub fn arch(&self) -> Arch {
        Arch {
            embed: self.embed,
            hidden: self.hidden,
            window: self.window,
            prompt_slots: self.prompt_slots,
        }
    }

    pub fn arch_for(&self, node: usize) -> Arch {
        let mut arch = self.arch();
        if let Some(&h) = self.hidden_sizes.get(node) {
            arch.hidden = h;
        }
        arch
    }

    pub fn sampler(&self) -> SamplerSpec {
        SamplerSpec {
            top_k: self.top_k,
            temperature: self.temperature,
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
}

fn default_lr() -> f64 {
    1e-2
}

fn default_rounds() -> usize {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmSection {
    pub protocol: Protocol,
    /// m
    pub nodes: usize,
    /// f; the last f node ids are malicious.
    pub malicious: usize,
    /// B
    pub batch_prompts: usize,
    /// G
    pub group_size: usize,
    pub homogeneous: bool,
    pub selection: Selection,
    /// Include the node id in completion seeds.
    pub node_seeded: bool,
    /// Generation-phase worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl Default for SwarmSection {
    fn default() -> Self {
        Self {
            protocol: Protocol::Horizontal,
            nodes: 4,
            malicious: 0,
            batch_prompts: 16,
            group_size: 12,
            homogeneous: true,
            selection: Selection::Independent,
            node_seeded: true,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSection {
    pub prompts: usize,
    pub samples: usize,
    pub greedy: bool,
}

impl Default for ValidationSection {
    fn default() -> Self {
        Self {
            prompts: 64,
            samples: 4,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub policy: PolicySection,
    pub training: TrainingSection,
    #[serde(default)]
    pub swarm: SwarmSection,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub defense: DefenseSpec,
    #[serde(default)]
    pub validation: ValidationSection,
}

impl ExperimentConfig {
    /// Defaults everywhere except the mandatory seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            task: TaskSection::default(),
            policy: PolicySection::default(),
            training: TrainingSection {
                seed,
                lr: default_lr(),
                beta: 0.0,
                rounds: default_rounds(),
            },
            swarm: SwarmSection::default(),
            attack: AttackSpec::default(),
            defense: DefenseSpec::default(),
            validation: ValidationSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.task.dataset_seed.unwrap_or_else(|| {
            crate::seed::derive(&[crate::seed::stream::DATASET, self.training.seed])
        })
    }

    pub fn init_seed(&self) -> u64 {
        self.policy.init_seed.unwrap_or_else(|| {
            crate::seed::derive(&[crate::seed::stream::INIT, self.training.seed])
        })
    }

    pub fn honest_count(&self) -> usize {
        self.swarm.nodes - self.swarm.malicious
    }

    pub fn is_malicious(&self, node: usize) -> bool {
        node >= self.honest_count()
    }

    /// Owned-slot fraction carrying the payload.
    pub fn poisoned_fraction(&self) -> f64 {
        self.attack
            .poisoned_fraction
            .unwrap_or(match self.swarm.protocol {
                Protocol::Horizontal => 1.0,
                Protocol::Vertical => 0.5,
            })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.swarm;
        if s.nodes == 0 {
            return Err(ConfigError::invalid("swarm.nodes must be positive"));
        }
        if s.malicious >= s.nodes {
            return Err(ConfigError::invalid(format!(
                "swarm.malicious ({}) must be below swarm.nodes ({})",
                s.malicious, s.nodes
            )));
        }
        if s.group_size < 2 {
            return Err(ConfigError::invalid("swarm.group_size must be at least 2"));
        }
        if s.batch_prompts == 0 {
            return Err(ConfigError::invalid("swarm.batch_prompts must be positive"));
        }
        match s.protocol {
            Protocol::Horizontal if !s.group_size.is_multiple_of(s.nodes) => {
                return Err(ConfigError::invalid(format!(
                    "horizontal protocol needs nodes ({}) to divide group_size ({})",
                    s.nodes, s.group_size
                )));
            }
            Protocol::Vertical if !s.batch_prompts.is_multiple_of(s.nodes) => {
                return Err(ConfigError::invalid(format!(
                    "vertical protocol needs nodes ({}) to divide batch_prompts ({})",
                    s.nodes, s.batch_prompts
                )));
            }
            _ => {}
        }
        if s.batch_prompts > self.task.n_train {
            return Err(ConfigError::invalid("batch_prompts exceeds n_train"));
        }
        if self.task.n_train == 0 || self.task.n_val == 0 {
            return Err(ConfigError::invalid("dataset sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.task.target_rate) {
            return Err(ConfigError::invalid("task.target_rate outside [0, 1]"));
        }
        let p = &self.policy;
        if [p.embed, p.hidden, p.window, p.prompt_slots].contains(&0) {
            return Err(ConfigError::invalid("policy dimensions must be positive"));
        }
        if p.hidden_sizes.contains(&0) {
            return Err(ConfigError::invalid("policy.hidden_sizes must be positive"));
        }
        if !p.hidden_sizes.is_empty() && s.homogeneous {
            return Err(ConfigError::invalid(
                "policy.hidden_sizes only applies to heterogeneous runs",
            ));
        }
        if !p.hidden_sizes.is_empty() && p.hidden_sizes.len() != s.nodes {
            return Err(ConfigError::invalid(
                "policy.hidden_sizes needs one entry per node",
            ));
        }
        let vocab = build_vocab(self.task.kind);
        p.sampler()
            .validate(vocab.len())
            .map_err(|e| ConfigError::invalid(e.to_string()))?;
        let t = &self.training;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(ConfigError::invalid("training.lr must be positive"));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) {
            return Err(ConfigError::invalid("training.beta must be non-negative"));
        }
        self.attack
            .validate(&vocab)
            .map_err(|e| ConfigError::invalid(e.to_string()))?;
        if self.attack.kind != AttackKind::None && s.malicious == 0 {
            return Err(ConfigError::invalid(
                "an attack needs at least one malicious node",
            ));
        }
        self.defense
            .validate()
            .map_err(|e| ConfigError::invalid(e.to_string()))?;
        if self.defense.kind.needs_homogeneous() && !s.homogeneous {
            return Err(ConfigError::invalid(format!(
                "{:?} defense requires swarm.homogeneous = true",
                self.defense.kind
            )));
        }
        if self.defense.kind == DefenseKind::KlOnly && t.beta == 0.0 {
            return Err(ConfigError::invalid(
                "kl_only defense needs training.beta > 0",
            ));
        }
        if self.validation.prompts == 0 || self.validation.samples == 0 {
            return Err(ConfigError::invalid("validation sizes must be positive"));
        }
        Ok(())
    }
}
