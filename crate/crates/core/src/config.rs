//! Experiment configuration: one TOML file, parsed strictly.
//!
//! Every field has a default, so an empty file describes the full default
//! experiment. Unknown keys are rejected, and range checks report every
//! violation with its dotted field path rather than stopping at the first.
//!
//! All randomness derives from the master `seed` through
//! [`seed::hash64`](crate::seed::hash64) with the stage names listed on each
//! accessor below.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{AttackConfig, AttackKind, FinalStepMode, DEFAULT_EPSILON, DEFAULT_ITERATIONS};
use crate::data::{hex_digest, DomainSpec, CONCEPTS};
use crate::model::Architecture;
use crate::seed::hash64;
use crate::tensor::DEFAULT_RATIO_GUARD;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigIssue>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSettings {
    pub domain_id: String,
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
}

impl DomainSettings {
    fn source_default() -> Self {
        DomainSettings {
            domain_id: "patterns-source".into(),
            num_classes: 10,
            image_side: 16,
            channels: 1,
            samples_per_class: 200,
            test_per_class: 100,
            noise_std: 0.25,
        }
    }

    fn target_default() -> Self {
        DomainSettings {
            domain_id: "patterns-target".into(),
            num_classes: 4,
            ..DomainSettings::source_default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainSettings {
    fn new(learning_rate: f64, epochs: usize) -> Self {
        TrainSettings {
            learning_rate,
            momentum: 0.9,
            epochs,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub epsilon: f64,
    pub iterations: usize,
    pub ratio_guard: f64,
    pub final_step: FinalStepMode,
    pub momentum: f64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        AttackSettings {
            epsilon: DEFAULT_EPSILON,
            iterations: DEFAULT_ITERATIONS,
            ratio_guard: DEFAULT_RATIO_GUARD,
            final_step: FinalStepMode::Forward,
            momentum: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttacksSection {
    /// Attack ids to run.
    pub run: Vec<String>,
    pub dfp: AttackSettings,
    pub fgsm: AttackSettings,
    pub mifgsm: AttackSettings,
    pub random: AttackSettings,
}

impl Default for AttacksSection {
    fn default() -> Self {
        AttacksSection {
            run: AttackKind::ALL.iter().map(|k| k.id().to_string()).collect(),
            dfp: AttackSettings::default(),
            fgsm: AttackSettings::default(),
            mifgsm: AttackSettings::default(),
            random: AttackSettings::default(),
        }
    }
}

impl AttacksSection {
    pub fn settings(&self, kind: AttackKind) -> &AttackSettings {
        match kind {
            AttackKind::Dfp => &self.dfp,
            AttackKind::Fgsm => &self.fgsm,
            AttackKind::Mifgsm => &self.mifgsm,
            AttackKind::Random => &self.random,
        }
    }

    fn settings_mut(&mut self, kind: AttackKind) -> &mut AttackSettings {
        match kind {
            AttackKind::Dfp => &mut self.dfp,
            AttackKind::Fgsm => &mut self.fgsm,
            AttackKind::Mifgsm => &mut self.mifgsm,
            AttackKind::Random => &mut self.random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSettings {
    /// Test images whose full logits vectors are dumped per pretrained model.
    pub logits_samples: usize,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        EvaluateSettings { logits_samples: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub architectures: Vec<String>,
    pub source: DomainSettings,
    pub target: DomainSettings,
    pub pretrain: TrainSettings,
    pub finetune: TrainSettings,
    pub attacks: AttacksSection,
    pub evaluate: EvaluateSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            architectures: vec!["net-a".into(), "net-b".into()],
            source: DomainSettings::source_default(),
            target: DomainSettings::target_default(),
            pretrain: TrainSettings::new(0.05, 15),
            // Full fine-tuning at 0.05 intermittently wrecks the pretrained CNN.
            finetune: TrainSettings::new(0.01, 10),
            attacks: AttacksSection::default(),
            evaluate: EvaluateSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub attacks: Option<Vec<String>>,
    pub epsilon: Option<f64>,
    pub iterations: Option<usize>,
    pub final_step: Option<FinalStepMode>,
}

/// Writes `user` over `base`, recursing into tables so a partial section
/// keeps the defaults of the keys it leaves out.
fn overlay(base: &mut toml::Value, user: toml::Table) {
    let toml::Value::Table(base) = base else { return };
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(slot @ toml::Value::Table(_)), toml::Value::Table(inner)) => overlay(slot, inner),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text, rejecting unknown keys, and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &Overrides::default())
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with(&text, overrides)
    }

    /// Parses, applies `overrides`, then validates.
    pub fn parse_with(text: &str, overrides: &Overrides) -> Result<Self, ConfigError> {
        let user = text
            .parse::<toml::Table>()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut value = toml::Value::try_from(ExperimentConfig::default()).expect("config serialises");
        overlay(&mut value, user);
        let mut unknown = Vec::new();
        let mut config: ExperimentConfig = serde_ignored::deserialize(value, |path| unknown.push(path.to_string()))
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(ConfigError::Invalid(
                unknown
                    .into_iter()
                    .map(|path| ConfigIssue {
                        path,
                        message: "unknown key".into(),
                    })
                    .collect(),
            ));
        }
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(run) = &o.attacks {
            self.attacks.run = run.clone();
        }
        let selected: Vec<AttackKind> = self.attacks.run.iter().filter_map(|id| id.parse().ok()).collect();
        for kind in selected {
            let s = self.attacks.settings_mut(kind);
            if let Some(eps) = o.epsilon {
                s.epsilon = eps;
            }
            if let Some(n) = o.iterations {
                s.iterations = n;
            }
            if let Some(mode) = o.final_step {
                s.final_step = mode;
            }
        }
    }

    /// Checks every invariant, returning all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut issue = |path: &str, message: String| {
            issues.push(ConfigIssue {
                path: path.to_string(),
                message,
            })
        };

        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            issue("seed", format!("must be at most {}, got {}", i64::MAX, self.seed));
        }
        if self.out_dir.as_os_str().is_empty() {
            issue("out_dir", "must not be empty".into());
        }
        if self.architectures.is_empty() {
            issue("architectures", "at least one architecture is required".into());
        }
        for (i, id) in self.architectures.iter().enumerate() {
            match id.as_str() {
                "net-a" | "net-b" => {}
                other => issue(&format!("architectures[{i}]"), format!("unknown architecture {other:?}")),
            }
            if self.architectures[..i].contains(id) {
                issue(&format!("architectures[{i}]"), format!("duplicate architecture {id:?}"));
            }
        }

        let uses_cnn = self.architectures.iter().any(|a| a == "net-b");
        for (name, d) in [("source", &self.source), ("target", &self.target)] {
            if d.domain_id.is_empty() {
                issue(&format!("{name}.domain_id"), "must not be empty".into());
            }
            if d.num_classes < 2 {
                issue(&format!("{name}.num_classes"), format!("must be at least 2, got {}", d.num_classes));
            }
            if d.image_side == 0 || (uses_cnn && d.image_side < 5) {
                issue(
                    &format!("{name}.image_side"),
                    format!("must be at least {}, got {}", if uses_cnn { 5 } else { 1 }, d.image_side),
                );
            }
            if d.channels == 0 {
                issue(&format!("{name}.channels"), "must be positive".into());
            }
            if d.samples_per_class == 0 {
                issue(&format!("{name}.samples_per_class"), "must be positive".into());
            }
            if d.test_per_class == 0 {
                issue(&format!("{name}.test_per_class"), "must be positive".into());
            }
            if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
                issue(&format!("{name}.noise_std"), format!("must be non-negative, got {}", d.noise_std));
            }
        }
        if self.source.domain_id == self.target.domain_id {
            issue("target.domain_id", "must differ from source.domain_id".into());
        }
        if self.source.num_classes + self.target.num_classes > CONCEPTS.len() {
            issue(
                "target.num_classes",
                format!(
                    "source and target need {} distinct concepts, only {} exist",
                    self.source.num_classes + self.target.num_classes,
                    CONCEPTS.len()
                ),
            );
        }
        if self.source.image_side != self.target.image_side || self.source.channels != self.target.channels {
            issue("target.image_side", "source and target images must have the same shape".into());
        }

        for (name, t, domain) in [
            ("pretrain", &self.pretrain, &self.source),
            ("finetune", &self.finetune, &self.target),
        ] {
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
                issue(&format!("{name}.learning_rate"), format!("must be positive, got {}", t.learning_rate));
            }
            if !(0.0..1.0).contains(&t.momentum) {
                issue(&format!("{name}.momentum"), format!("must be in [0, 1), got {}", t.momentum));
            }
            if t.epochs == 0 {
                issue(&format!("{name}.epochs"), "must be positive".into());
            }
            let train_len = domain.samples_per_class * domain.num_classes;
            if t.batch_size == 0 || t.batch_size > train_len {
                issue(
                    &format!("{name}.batch_size"),
                    format!("must be in [1, {train_len}], got {}", t.batch_size),
                );
            }
        }

        if self.attacks.run.is_empty() {
            issue("attacks.run", "at least one attack is required".into());
        }
        for (i, id) in self.attacks.run.iter().enumerate() {
            if id.parse::<AttackKind>().is_err() {
                issue(
                    &format!("attacks.run[{i}]"),
                    format!("unknown attack id {id:?} (expected dfp, fgsm, mifgsm or random)"),
                );
            } else if self.attacks.run[..i].contains(id) {
                issue(&format!("attacks.run[{i}]"), format!("duplicate attack id {id:?}"));
            }
        }
        for kind in AttackKind::ALL {
            let s = self.attacks.settings(kind);
            let p = format!("attacks.{}", kind.id());
            if !(0.0..=2.0).contains(&s.epsilon) {
                issue(&format!("{p}.epsilon"), format!("must be in [0, 2], got {}", s.epsilon));
            }
            if s.iterations == 0 {
                issue(&format!("{p}.iterations"), "must be at least 1".into());
            }
            if !(s.ratio_guard > 0.0 && s.ratio_guard.is_finite()) {
                issue(&format!("{p}.ratio_guard"), format!("must be positive, got {}", s.ratio_guard));
            }
            if !(s.momentum >= 0.0 && s.momentum.is_finite()) {
                issue(&format!("{p}.momentum"), format!("must be non-negative, got {}", s.momentum));
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the normalised TOML form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    pub fn architecture_list(&self) -> Vec<Architecture> {
        self.architectures
            .iter()
            .map(|a| a.parse().expect("validated architecture id"))
            .collect()
    }

    pub fn attack_list(&self) -> Vec<AttackKind> {
        let mut kinds: Vec<AttackKind> = self
            .attacks
            .run
            .iter()
            .map(|a| a.parse().expect("validated attack id"))
            .collect();
        kinds.sort();
        kinds
    }

    /// Source domain; seed from stage `gen-data`, index 0.
    pub fn source_spec(&self) -> DomainSpec {
        self.domain_spec(&self.source, hash64(self.seed, "gen-data", 0), 0)
    }

    /// Target domain; seed from stage `gen-data`, index 1. Its concepts start
    /// right after the source's.
    pub fn target_spec(&self) -> DomainSpec {
        self.domain_spec(&self.target, hash64(self.seed, "gen-data", 1), self.source.num_classes)
    }

    fn domain_spec(&self, d: &DomainSettings, seed: u64, first_concept: usize) -> DomainSpec {
        DomainSpec {
            domain_id: d.domain_id.clone(),
            num_classes: d.num_classes,
            image_side: d.image_side,
            channels: d.channels,
            samples_per_class: d.samples_per_class,
            test_per_class: d.test_per_class,
            noise_std: d.noise_std,
            seed,
            first_concept,
        }
    }

    fn train_config(t: &TrainSettings, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
        }
    }

    /// Stage `pretrain`, index = architecture position.
    pub fn pretrain_config(&self, arch_index: usize) -> TrainConfig {
        Self::train_config(&self.pretrain, hash64(self.seed, "pretrain", arch_index as u64))
    }

    /// Stage `pretrain-init`.
    pub fn pretrain_init_seed(&self, arch_index: usize) -> u64 {
        hash64(self.seed, "pretrain-init", arch_index as u64)
    }

    /// Stage `finetune`.
    pub fn finetune_config(&self, arch_index: usize) -> TrainConfig {
        Self::train_config(&self.finetune, hash64(self.seed, "finetune", arch_index as u64))
    }

    /// Stage `finetune-head`.
    pub fn finetune_head_seed(&self, arch_index: usize) -> u64 {
        hash64(self.seed, "finetune-head", arch_index as u64)
    }

    /// From-scratch baseline with the fine-tuning budget; stage `scratch`.
    pub fn scratch_config(&self, arch_index: usize) -> TrainConfig {
        Self::train_config(&self.finetune, hash64(self.seed, "scratch", arch_index as u64))
    }

    /// Stage `scratch-init`.
    pub fn scratch_init_seed(&self, arch_index: usize) -> u64 {
        hash64(self.seed, "scratch-init", arch_index as u64)
    }

    /// Attack parameters; the random control's seed comes from stage
    /// `attack-<id>`, index 0.
    pub fn attack_config(&self, kind: AttackKind) -> AttackConfig {
        let s = self.attacks.settings(kind);
        AttackConfig {
            epsilon: s.epsilon,
            iterations: s.iterations,
            ratio_guard: s.ratio_guard,
            final_step: s.final_step,
            momentum: s.momentum,
            seed: hash64(self.seed, &format!("attack-{}", kind.id()), 0),
        }
    }

    /// Every derived seed, by name.
    pub fn seeds(&self) -> IndexMap<String, u64> {
        let mut out = IndexMap::new();
        out.insert("master".to_string(), self.seed);
        out.insert("source-domain".to_string(), self.source_spec().seed);
        out.insert("target-domain".to_string(), self.target_spec().seed);
        for (i, arch) in self.architectures.iter().enumerate() {
            out.insert(format!("pretrain-init/{arch}"), self.pretrain_init_seed(i));
            out.insert(format!("pretrain/{arch}"), self.pretrain_config(i).seed);
            out.insert(format!("finetune-head/{arch}"), self.finetune_head_seed(i));
            out.insert(format!("finetune/{arch}"), self.finetune_config(i).seed);
            out.insert(format!("scratch-init/{arch}"), self.scratch_init_seed(i));
            out.insert(format!("scratch/{arch}"), self.scratch_config(i).seed);
        }
        for kind in AttackKind::ALL {
            out.insert(format!("attack/{}", kind.id()), self.attack_config(kind).seed);
        }
        out
    }
}
