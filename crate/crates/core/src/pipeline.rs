//! Stage runner behind the `dfp-lab` binary.
//!
//! Each stage reads what earlier stages left in the output directory, checks
//! it against their manifests, and writes its own artifacts plus a manifest:
//!
//! ```text
//! <out_dir>/
//!   datasets/     manifest-gen-data.json, {source,target}-{train,test}/
//!   checkpoints/  manifest-pretrain.json, pretrained-<arch>.ckpt, pretrain-history.json
//!                 manifest-finetune.json, finetuned-<arch>.ckpt, finetune-history.json
//!   adversarial/  manifest-attack.json, <attack>-<crafting model>/, dfp-traces-<arch>.json
//!   reports/      manifest-evaluate.json, evaluation.json
//!                 manifest-report.json, report.json, table1.csv, table2.csv,
//!                 mapping.csv, logits.csv
//! ```
//!
//! A manifest's `config_hash` covers only the config sections the stage and
//! its predecessors read, so changing an attack setting leaves datasets and
//! checkpoints valid while invalidating the attack stage onwards.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::attacks::{self, AttackError, AttackKind};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{self, hex_digest, DataError, LabeledDataset};
use crate::eval::{self, DivergenceSummary, EvalError, FoolingReport, LogitsDump, MappingHistogram, TransferMatrix};
use crate::model::{self, Architecture, Model, ModelError};
use crate::tensor::Tensor;
use crate::train::{self, TrainError, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Pretrain,
    Finetune,
    Attack,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Attack,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "datasets",
            Stage::Pretrain | Stage::Finetune => "checkpoints",
            Stage::Attack => "adversarial",
            Stage::Evaluate | Stage::Report => "reports",
        }
    }

    /// Manifest location relative to the output directory.
    pub fn manifest_path(self) -> String {
        format!("{}/manifest-{}.json", self.dir(), self.id())
    }

    /// Stages whose artifacts this one reads.
    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::GenData => &[],
            Stage::Pretrain => &[Stage::GenData],
            Stage::Finetune => &[Stage::GenData, Stage::Pretrain],
            Stage::Attack => &[Stage::GenData, Stage::Pretrain, Stage::Finetune],
            Stage::Evaluate => &[Stage::GenData, Stage::Pretrain, Stage::Finetune, Stage::Attack],
            Stage::Report => &[Stage::Evaluate],
        }
    }

    /// Top-level config keys that influence this stage's output, including
    /// through its predecessors.
    fn config_keys(self) -> &'static [&'static str] {
        const ALL: [&str; 8] = [
            "seed",
            "source",
            "target",
            "architectures",
            "pretrain",
            "finetune",
            "attacks",
            "evaluate",
        ];
        match self {
            Stage::GenData => &ALL[..3],
            Stage::Pretrain => &ALL[..5],
            Stage::Finetune => &ALL[..6],
            Stage::Attack => &ALL[..7],
            Stage::Evaluate | Stage::Report => &ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.id() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} needs {artifact} from stage {producer}; run `{producer}` first")]
    MissingPrerequisite {
        stage: Stage,
        producer: Stage,
        artifact: String,
    },
    #[error("{manifest} was produced with a different configuration; rerun `{producer}`")]
    Stale { producer: Stage, manifest: String },
    #[error("{artifact} does not match its manifest: {reason}")]
    Corrupt { artifact: String, reason: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("cannot serialise {what}: {reason}")]
    Serialize { what: String, reason: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingPrerequisite { .. } => "missing-prerequisite",
            PipelineError::Stale { .. } => "stale-artifact",
            PipelineError::Corrupt { .. } => "corrupt-artifact",
            PipelineError::Io { .. } => "io",
            PipelineError::Data(_) => "data",
            PipelineError::Model(_) => "model",
            PipelineError::Train(_) => "train",
            PipelineError::Attack(_) => "attack",
            PipelineError::Eval(_) => "eval",
            PipelineError::Serialize { .. } => "serialize",
        }
    }

    /// Machine-readable form printed by the binary on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            PipelineError::Config(ConfigError::Invalid(issues)) => {
                body["issues"] = json!(issues);
            }
            PipelineError::MissingPrerequisite {
                stage,
                producer,
                artifact,
            } => {
                body["stage"] = json!(stage);
                body["producer"] = json!(producer);
                body["artifact"] = json!(artifact);
            }
            PipelineError::Stale { producer, manifest } => {
                body["producer"] = json!(producer);
                body["manifest"] = json!(manifest);
            }
            PipelineError::Corrupt { artifact, .. } => {
                body["artifact"] = json!(artifact);
            }
            _ => {}
        }
        json!({ "error": body })
    }

    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub config_hash: String,
    pub seeds: IndexMap<String, u64>,
    pub artifacts: Vec<ArtifactEntry>,
}

/// Hash of the config sections `stage` depends on.
pub fn stage_config_hash(config: &ExperimentConfig, stage: Stage) -> String {
    let table = toml::Table::try_from(config).expect("config serialises");
    let subset: toml::Table = stage
        .config_keys()
        .iter()
        .filter_map(|&k| table.get(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    hex_digest(toml::to_string(&subset).expect("table serialises").as_bytes())
}

/// The config as recorded in reports: everything except `out_dir`, so two
/// runs that differ only in where they write produce identical reports.
pub fn portable_config(config: &ExperimentConfig) -> serde_json::Value {
    let mut value = serde_json::to_value(config).expect("config serialises");
    if let Some(map) = value.as_object_mut() {
        map.remove("out_dir");
    }
    value
}

struct Run<'a> {
    config: &'a ExperimentConfig,
    root: PathBuf,
    written: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(config: &'a ExperimentConfig) -> Self {
        Run {
            config,
            root: config.out_dir.clone(),
            written: Vec::new(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Self::io_err(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Self::io_err(&path, e))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Serialize {
            what: rel.to_string(),
            reason: e.to_string(),
        })?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| Self::io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt {
            artifact: rel.to_string(),
            reason: e.to_string(),
        })
    }

    fn write_archive(&mut self, rel: &str, ds: &LabeledDataset) -> Result<()> {
        data::write_archive(ds, &self.path(rel))?;
        self.written.push(format!("{rel}/manifest.json"));
        self.written.push(format!("{rel}/data.bin"));
        Ok(())
    }

    fn read_archive(&self, rel: &str) -> Result<LabeledDataset> {
        Ok(data::read_archive(&self.path(rel))?)
    }

    fn save_model(&mut self, rel: &str, model: &Model) -> Result<()> {
        model::save_checkpoint(&model.spec, &model.params, &self.path(rel))?;
        self.written.push(rel.to_string());
        Ok(())
    }

    fn load_model(&self, rel: &str, arch: Architecture) -> Result<Model> {
        let (spec, params) = model::load_checkpoint_as(&self.path(rel), arch)?;
        Ok(Model::new(spec, params)?)
    }

    /// Checks that `producer` ran with the current config and that every
    /// file it listed is present and unchanged.
    fn require(&self, stage: Stage, producer: Stage) -> Result<()> {
        let rel = producer.manifest_path();
        let path = self.path(&rel);
        if !path.is_file() {
            return Err(PipelineError::MissingPrerequisite {
                stage,
                producer,
                artifact: rel,
            });
        }
        let manifest: Manifest = self.read_json(&rel)?;
        if manifest.stage != producer || manifest.config_hash != stage_config_hash(self.config, producer) {
            return Err(PipelineError::Stale {
                producer,
                manifest: rel,
            });
        }
        for entry in &manifest.artifacts {
            let bytes = match fs::read(self.path(&entry.path)) {
                Ok(bytes) => bytes,
                Err(_) => {
                    return Err(PipelineError::MissingPrerequisite {
                        stage,
                        producer,
                        artifact: entry.path.clone(),
                    })
                }
            };
            if hex_digest(&bytes) != entry.sha256 {
                return Err(PipelineError::Corrupt {
                    artifact: entry.path.clone(),
                    reason: "checksum mismatch".into(),
                });
            }
        }
        Ok(())
    }

    fn finish(mut self, stage: Stage) -> Result<Manifest> {
        let mut artifacts = Vec::with_capacity(self.written.len());
        for rel in &self.written {
            let path = self.path(rel);
            let bytes = fs::read(&path).map_err(|e| Self::io_err(&path, e))?;
            artifacts.push(ArtifactEntry {
                path: rel.clone(),
                sha256: hex_digest(&bytes),
            });
        }
        let manifest = Manifest {
            stage,
            config_hash: stage_config_hash(self.config, stage),
            seeds: self.config.seeds(),
            artifacts,
        };
        self.written.clear();
        self.write_json(&stage.manifest_path(), &manifest)?;
        Ok(manifest)
    }
}

fn pretrained_id(arch: Architecture) -> String {
    format!("pretrained-{arch}")
}

fn finetuned_id(arch: Architecture) -> String {
    format!("finetuned-{arch}")
}

/// Directory name of an adversarial set under `adversarial/`.
fn adversarial_set(kind: AttackKind, crafted_with: Option<&str>) -> String {
    match crafted_with {
        Some(model) => format!("adversarial/{}-{model}", kind.id()),
        None => format!("adversarial/{}", kind.id()),
    }
}

/// Which model crafts each attack: DFP uses the pretrained source model of an
/// architecture, FGSM and MI-FGSM the fine-tuned target model itself
/// (white-box, with labels), the random control nothing.
fn crafting_models(kind: AttackKind, archs: &[Architecture]) -> Vec<Option<(String, Architecture)>> {
    match kind {
        AttackKind::Dfp => archs.iter().map(|&a| Some((pretrained_id(a), a))).collect(),
        AttackKind::Fgsm | AttackKind::Mifgsm => archs.iter().map(|&a| Some((finetuned_id(a), a))).collect(),
        AttackKind::Random => vec![None],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub finetuned: TrainHistory,
    pub scratch: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub architecture: Architecture,
    pub source_accuracy: f64,
    pub finetuned_accuracy: f64,
    pub scratch_accuracy: f64,
    pub pretrain: TrainHistory,
    pub finetune: TrainHistory,
    pub scratch: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub baseline_error_rate: f64,
    /// Attack id to fooling rate.
    pub fooling_rates: IndexMap<String, f64>,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentSummary {
    pub pretrained: String,
    /// Fraction of inputs whose objective at the last iterate exceeds the first.
    pub fraction_increased: f64,
    pub mean_initial_objective: f64,
    pub mean_final_objective: f64,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub pretrained: String,
    pub histogram: MappingHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsEntry {
    pub pretrained: String,
    pub attack: AttackKind,
    pub summary: DivergenceSummary,
    pub samples: Vec<LogitsDump>,
}

/// Everything the evaluate stage measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub num_samples: usize,
    pub training: Vec<TrainingSummary>,
    pub table1: Vec<Table1Row>,
    pub fooling_reports: Vec<FoolingReport>,
    pub transfer_matrix: Option<TransferMatrix>,
    pub ascent: Vec<AscentSummary>,
    pub mapping: Vec<MappingEntry>,
    pub logits: Vec<LogitsEntry>,
}

impl Evaluation {
    pub fn table1_row(&self, model: &str) -> Option<&Table1Row> {
        self.table1.iter().find(|r| r.model == model)
    }

    pub fn logits_entry(&self, pretrained: &str, attack: AttackKind) -> Option<&LogitsEntry> {
        self.logits.iter().find(|e| e.pretrained == pretrained && e.attack == attack)
    }
}

/// Top-level structure of `reports/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: IndexMap<String, u64>,
    pub evaluation: Evaluation,
}

fn gen_data(run: &mut Run) -> Result<()> {
    let (src_train, src_test) = data::generate_domain(&run.config.source_spec())?;
    let (tgt_train, tgt_test) = data::generate_domain(&run.config.target_spec())?;
    run.write_archive("datasets/source-train", &src_train)?;
    run.write_archive("datasets/source-test", &src_test)?;
    run.write_archive("datasets/target-train", &tgt_train)?;
    run.write_archive("datasets/target-test", &tgt_test)?;
    Ok(())
}

fn pretrain(run: &mut Run) -> Result<()> {
    run.require(Stage::Pretrain, Stage::GenData)?;
    let train_ds = run.read_archive("datasets/source-train")?;
    let test_ds = run.read_archive("datasets/source-test")?;
    let mut histories = IndexMap::new();
    for (i, arch) in run.config.architecture_list().into_iter().enumerate() {
        let (model, history) = train::train_from_scratch(
            arch,
            &train_ds,
            &test_ds,
            &run.config.pretrain_config(i),
            run.config.pretrain_init_seed(i),
        )?;
        run.save_model(&format!("checkpoints/{}.ckpt", pretrained_id(arch)), &model)?;
        histories.insert(arch.to_string(), history);
    }
    run.write_json("checkpoints/pretrain-history.json", &histories)
}

fn finetune(run: &mut Run) -> Result<()> {
    for producer in Stage::Finetune.prerequisites() {
        run.require(Stage::Finetune, *producer)?;
    }
    let train_ds = run.read_archive("datasets/target-train")?;
    let test_ds = run.read_archive("datasets/target-test")?;
    let mut histories = IndexMap::new();
    for (i, arch) in run.config.architecture_list().into_iter().enumerate() {
        let source = run.load_model(&format!("checkpoints/{}.ckpt", pretrained_id(arch)), arch)?;
        let (model, finetuned) = train::finetune_from(
            &source,
            &train_ds,
            &test_ds,
            &run.config.finetune_config(i),
            run.config.finetune_head_seed(i),
        )?;
        run.save_model(&format!("checkpoints/{}.ckpt", finetuned_id(arch)), &model)?;
        let (_, scratch) = train::train_from_scratch(
            arch,
            &train_ds,
            &test_ds,
            &run.config.scratch_config(i),
            run.config.scratch_init_seed(i),
        )?;
        histories.insert(arch.to_string(), FinetuneHistory { finetuned, scratch });
    }
    run.write_json("checkpoints/finetune-history.json", &histories)
}

fn attack(run: &mut Run) -> Result<()> {
    for producer in Stage::Attack.prerequisites() {
        run.require(Stage::Attack, *producer)?;
    }
    let test = run.read_archive("datasets/target-test")?;
    let archs = run.config.architecture_list();
    for kind in run.config.attack_list() {
        let config = run.config.attack_config(kind);
        for crafting in crafting_models(kind, &archs) {
            let crafted_with = crafting.as_ref().map(|(id, _)| id.clone());
            let results = match &crafting {
                None => test
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| attacks::random_sign_attack(x, config.epsilon, attacks::random_seed_for(config.seed, i)))
                    .collect::<attacks::Result<Vec<_>>>()?,
                Some((id, arch)) => {
                    let model = run.load_model(&format!("checkpoints/{id}.ckpt"), *arch)?;
                    attacks::craft_many(kind, &model, &test.inputs, &test.labels, &config)?
                }
            };
            if kind == AttackKind::Dfp {
                let traces: Vec<&Vec<f64>> = results.iter().map(|r| &r.objective_trace).collect();
                let id = crafted_with.as_deref().expect("dfp has a crafting model");
                run.write_json(&format!("adversarial/dfp-traces-{id}.json"), &traces)?;
            }
            let adversarial = test.with_inputs(results.into_iter().map(|r| r.adversarial).collect())?;
            run.write_archive(&adversarial_set(kind, crafted_with.as_deref()), &adversarial)?;
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn evaluate(run: &mut Run) -> Result<()> {
    for producer in Stage::Evaluate.prerequisites() {
        run.require(Stage::Evaluate, *producer)?;
    }
    let config = run.config;
    let test = run.read_archive("datasets/target-test")?;
    let archs = config.architecture_list();
    let kinds = config.attack_list();

    let pretrain_hist: IndexMap<String, TrainHistory> = run.read_json("checkpoints/pretrain-history.json")?;
    let finetune_hist: IndexMap<String, FinetuneHistory> = run.read_json("checkpoints/finetune-history.json")?;
    let mut pretrained = Vec::new();
    let mut targets = Vec::new();
    let mut training = Vec::new();
    for &arch in &archs {
        let p_id = pretrained_id(arch);
        let f_id = finetuned_id(arch);
        pretrained.push((p_id.clone(), run.load_model(&format!("checkpoints/{p_id}.ckpt"), arch)?));
        targets.push((f_id.clone(), run.load_model(&format!("checkpoints/{f_id}.ckpt"), arch)?));
        let missing = |what: &str| PipelineError::Corrupt {
            artifact: what.to_string(),
            reason: format!("no history for {arch}"),
        };
        let p = pretrain_hist.get(arch.id()).ok_or_else(|| missing("checkpoints/pretrain-history.json"))?;
        let f = finetune_hist.get(arch.id()).ok_or_else(|| missing("checkpoints/finetune-history.json"))?;
        training.push(TrainingSummary {
            architecture: arch,
            source_accuracy: p.final_accuracy().unwrap_or(0.0),
            finetuned_accuracy: f.finetuned.final_accuracy().unwrap_or(0.0),
            scratch_accuracy: f.scratch.final_accuracy().unwrap_or(0.0),
            pretrain: p.clone(),
            finetune: f.finetuned.clone(),
            scratch: f.scratch.clone(),
        });
    }

    let mut sets: IndexMap<(AttackKind, Option<String>), Vec<Tensor>> = IndexMap::new();
    for &kind in &kinds {
        for crafting in crafting_models(kind, &archs) {
            let crafted_with = crafting.map(|(id, _)| id);
            let ds = run.read_archive(&adversarial_set(kind, crafted_with.as_deref()))?;
            if ds.labels != test.labels {
                return Err(PipelineError::Corrupt {
                    artifact: adversarial_set(kind, crafted_with.as_deref()),
                    reason: "labels differ from the target test split".into(),
                });
            }
            sets.insert((kind, crafted_with), ds.inputs);
        }
    }

    // Fooling of every adversarial set against every fine-tuned model.
    let mut fooling_reports = Vec::new();
    let mut table1 = Vec::new();
    for (i, (f_id, f)) in targets.iter().enumerate() {
        let baseline = eval::error_rate(f, &test)?;
        let clean_pred = f.predict_many(&test.inputs)?;
        let mut rates = IndexMap::new();
        for ((kind, crafted_with), adv) in &sets {
            let rate = eval::fooling_rate_from_predictions(&clean_pred, &f.predict_many(adv)?)?;
            fooling_reports.push(FoolingReport {
                model_id: f_id.clone(),
                attack_id: kind.id().to_string(),
                crafted_with: crafted_with.clone(),
                baseline_error_rate: baseline,
                fooling_rate: rate,
                num_samples: test.len(),
            });
            // table1.csv pairs each target with the crafting model of its own
            // architecture.
            let own = match kind {
                AttackKind::Dfp => Some(pretrained_id(archs[i])),
                AttackKind::Fgsm | AttackKind::Mifgsm => Some(f_id.clone()),
                AttackKind::Random => None,
            };
            if *crafted_with == own {
                rates.insert(kind.id().to_string(), rate);
            }
        }
        table1.push(Table1Row {
            model: f_id.clone(),
            baseline_error_rate: baseline,
            fooling_rates: rates,
            num_samples: test.len(),
        });
    }

    let transfer_matrix = if kinds.contains(&AttackKind::Dfp) {
        let row_ids: Vec<String> = pretrained.iter().map(|(id, _)| id.clone()).collect();
        let adv: Vec<Vec<Tensor>> = row_ids
            .iter()
            .map(|id| sets[&(AttackKind::Dfp, Some(id.clone()))].clone())
            .collect();
        Some(eval::transfer_matrix_from_adversarial(&row_ids, &targets, &test.inputs, &adv)?)
    } else {
        None
    };

    let mut ascent = Vec::new();
    if kinds.contains(&AttackKind::Dfp) {
        for (p_id, _) in &pretrained {
            let traces: Vec<Vec<f64>> = run.read_json(&format!("adversarial/dfp-traces-{p_id}.json"))?;
            let first = |t: &Vec<f64>| t.first().copied().unwrap_or(0.0);
            let last = |t: &Vec<f64>| t.last().copied().unwrap_or(0.0);
            let increased = traces.iter().filter(|t| last(t) > first(t)).count();
            ascent.push(AscentSummary {
                pretrained: p_id.clone(),
                fraction_increased: increased as f64 / traces.len() as f64,
                mean_initial_objective: mean(traces.iter().map(first)),
                mean_final_objective: mean(traces.iter().map(last)),
                num_samples: traces.len(),
            });
        }
    }

    let mut mapping = Vec::new();
    for (p_id, t) in &pretrained {
        mapping.push(MappingEntry {
            pretrained: p_id.clone(),
            histogram: eval::mapping_histogram(t, &test)?,
        });
    }

    let mut logits = Vec::new();
    let samples = config.evaluate.logits_samples.min(test.len());
    for (p_id, t) in &pretrained {
        for &kind in &kinds {
            let key = match kind {
                AttackKind::Dfp => (kind, Some(p_id.clone())),
                AttackKind::Random => (kind, None),
                AttackKind::Fgsm | AttackKind::Mifgsm => continue,
            };
            let adv = &sets[&key];
            logits.push(LogitsEntry {
                pretrained: p_id.clone(),
                attack: kind,
                summary: eval::logits_divergence(t, &test.inputs, adv)?,
                samples: (0..samples)
                    .map(|i| eval::logits_dump(t, &test.inputs[i], &adv[i]))
                    .collect::<eval::Result<_>>()?,
            });
        }
    }

    let evaluation = Evaluation {
        num_samples: test.len(),
        training,
        table1,
        fooling_reports,
        transfer_matrix,
        ascent,
        mapping,
        logits,
    };
    run.write_json("reports/evaluation.json", &evaluation)
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.write_record(&row).map_err(|e| PipelineError::Serialize {
            what: "csv".into(),
            reason: e.to_string(),
        })?;
    }
    writer.into_inner().map_err(|e| PipelineError::Serialize {
        what: "csv".into(),
        reason: e.to_string(),
    })
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn report(run: &mut Run) -> Result<()> {
    run.require(Stage::Report, Stage::Evaluate)?;
    let evaluation: Evaluation = run.read_json("reports/evaluation.json")?;
    let config = run.config;

    let attack_ids: Vec<String> = config.attack_list().iter().map(|k| k.id().to_string()).collect();
    let mut rows = vec![["model", "baseline_error_rate"]
        .iter()
        .map(|s| s.to_string())
        .chain(attack_ids.iter().cloned())
        .chain(["num_samples".to_string()])
        .collect::<Vec<_>>()];
    for row in &evaluation.table1 {
        let mut line = vec![row.model.clone(), num(row.baseline_error_rate)];
        line.extend(attack_ids.iter().map(|id| row.fooling_rates.get(id).map(|&v| num(v)).unwrap_or_default()));
        line.push(row.num_samples.to_string());
        rows.push(line);
    }
    run.write_bytes("reports/table1.csv", &csv_bytes(rows)?)?;

    if let Some(m) = &evaluation.transfer_matrix {
        let mut rows = vec![std::iter::once("crafted_with".to_string())
            .chain(m.column_ids.iter().cloned())
            .collect::<Vec<_>>()];
        for (id, cells) in m.row_ids.iter().zip(&m.cells) {
            rows.push(std::iter::once(id.clone()).chain(cells.iter().map(|&v| num(v))).collect());
        }
        run.write_bytes("reports/table2.csv", &csv_bytes(rows)?)?;
    }

    let target = config.target_spec();
    let mut rows = vec![vec![
        "pretrained".to_string(),
        "category".to_string(),
        "concept".to_string(),
        "num_samples".to_string(),
        "most_frequent_class".to_string(),
        "max_frequency".to_string(),
        "chance".to_string(),
    ]];
    for entry in &evaluation.mapping {
        for c in &entry.histogram.categories {
            rows.push(vec![
                entry.pretrained.clone(),
                c.category.to_string(),
                target.concepts()[c.category].to_string(),
                c.num_samples.to_string(),
                c.most_frequent_class.to_string(),
                num(c.max_frequency),
                num(1.0 / entry.histogram.source_classes as f64),
            ]);
        }
    }
    run.write_bytes("reports/mapping.csv", &csv_bytes(rows)?)?;

    let mut rows = vec![vec![
        "pretrained".to_string(),
        "attack".to_string(),
        "mean_cosine_similarity".to_string(),
        "mean_l2_distance".to_string(),
        "num_samples".to_string(),
    ]];
    for e in &evaluation.logits {
        rows.push(vec![
            e.pretrained.clone(),
            e.attack.id().to_string(),
            num(e.summary.mean_cosine_similarity),
            num(e.summary.mean_l2_distance),
            e.summary.num_samples.to_string(),
        ]);
    }
    run.write_bytes("reports/logits.csv", &csv_bytes(rows)?)?;

    let report = Report {
        config: portable_config(config),
        config_hash: stage_config_hash(config, Stage::Report),
        seeds: config.seeds(),
        evaluation,
    };
    run.write_json("reports/report.json", &report)
}

/// Runs one stage against `config.out_dir` and returns the manifest it wrote.
pub fn run_stage(stage: Stage, config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let mut run = Run::new(config);
    match stage {
        Stage::GenData => gen_data(&mut run)?,
        Stage::Pretrain => pretrain(&mut run)?,
        Stage::Finetune => finetune(&mut run)?,
        Stage::Attack => attack(&mut run)?,
        Stage::Evaluate => evaluate(&mut run)?,
        Stage::Report => report(&mut run)?,
    }
    run.finish(stage)
}

/// Every stage in order.
pub fn full_run(config: &ExperimentConfig) -> Result<Vec<Manifest>> {
    Stage::ALL.into_iter().map(|stage| run_stage(stage, config)).collect()
}

/// Reads a finished run's `reports/evaluation.json`.
pub fn load_evaluation(out_dir: &Path) -> Result<Evaluation> {
    let rel = "reports/evaluation.json";
    let path = out_dir.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt {
        artifact: rel.to_string(),
        reason: e.to_string(),
    })
}
