//! Config-driven orchestration of the full stage graph:
//! data -> suggest -> trigger -> pool -> select -> assemble -> evalprep ->
//! train -> eval -> defend -> report.
//!
//! Every stage writes its artifacts plus a stage-metadata record (input and
//! output hashes, seed, duration). Reruns with the same config and seed
//! produce byte-identical manifests and an identical summary report;
//! `resume` continues a run from its first incomplete stage after verifying
//! the recorded hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::assemble::{assemble, pick_edit_sources, SourcePick, SourceStrategy};
use crate::defense::cleanse::{neural_cleanse, CleanseConfig};
use crate::defense::gradcam::{grad_cam, upsample_map};
use crate::defense::nad::{nad, NadConfig, NadSnapshot};
use crate::defense::prune::{fine_prune, PruneEvalSets};
use crate::defense::strip::{median, strip_detect, DEFAULT_ALPHA, DEFAULT_FRR};
use crate::defense::DefenseReport;
use crate::error::{Error, Result};
use crate::eval::{attack_success_rate, clean_accuracy, evaluate, ImageStore};
use crate::fixtures::{
    make_desk_dataset, StubEditor, StubGenerator, StubScorer, StubVqa, DESK_CLASSES,
    DESK_IMAGE_SIZE, DESK_REAL_PER_CLASS, DESK_TRAIN_PER_CLASS, DESK_VAL_PER_CLASS, TAGS_FILE,
};
use crate::generate::{
    edit_batch, generate_batch, load_candidates, save_candidates, EditBackend, GenerateBackend,
    GenerationSpec, PoisonCandidate,
};
use crate::imgio::ImageBuf;
use crate::manifest::{
    DatasetManifest, LabelMode, ManifestEntry, PoisonConfig, Provenance, Split,
};
use crate::nn::tensor::Tensor3;
use crate::nn::NeuralNet;
use crate::select::{score_candidates, select_top_k, ScorerBackend};
use crate::suggest::{collect_suggestions, compute_compatibility, recommend, VqaBackend};
use crate::trainer::{train, TrainConfig};
use crate::util::{atomic_write, derive_seed, sha256_file};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessLevel {
    /// Images and labels available: editing path.
    Dataset,
    /// Labels only: generation path.
    LabelOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureParams {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_train_per_class")]
    pub per_class_train: usize,
    #[serde(default = "default_val_per_class")]
    pub per_class_val: usize,
    #[serde(default = "default_real_per_class")]
    pub per_class_real: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
}

fn default_classes() -> usize {
    DESK_CLASSES
}
fn default_train_per_class() -> usize {
    DESK_TRAIN_PER_CLASS
}
fn default_val_per_class() -> usize {
    DESK_VAL_PER_CLASS
}
fn default_real_per_class() -> usize {
    DESK_REAL_PER_CLASS
}
fn default_image_size() -> usize {
    DESK_IMAGE_SIZE
}

impl Default for FixtureParams {
    fn default() -> Self {
        FixtureParams {
            num_classes: DESK_CLASSES,
            per_class_train: DESK_TRAIN_PER_CLASS,
            per_class_val: DESK_VAL_PER_CLASS,
            per_class_real: DESK_REAL_PER_CLASS,
            image_size: DESK_IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Synthesize the fixture dataset.
    Fixtures(FixtureParams),
    /// Load an existing manifest (path relative to the config file).
    Manifest { path: String },
    /// No dataset at all; label-only runs generate everything.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendsCfg {
    #[serde(default = "default_backend")]
    pub vqa: String,
    #[serde(default = "default_backend")]
    pub editor: String,
    #[serde(default = "default_backend")]
    pub generator: String,
    #[serde(default = "default_backend")]
    pub scorer: String,
}

fn default_backend() -> String {
    "stub".to_string()
}

impl Default for BackendsCfg {
    fn default() -> Self {
        BackendsCfg {
            vqa: default_backend(),
            editor: default_backend(),
            generator: default_backend(),
            scorer: default_backend(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuggestCfg {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub sample_cap: Option<usize>,
}

fn default_k() -> usize {
    crate::suggest::DEFAULT_K
}

impl Default for SuggestCfg {
    fn default() -> Self {
        SuggestCfg {
            k: default_k(),
            sample_cap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    /// Filter by suggestions when the trigger appears in them, otherwise
    /// sample uniformly.
    #[default]
    Auto,
    Random,
    SuggestionFiltered,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonCfg {
    pub target_class: usize,
    pub poisoning_rate: f64,
    #[serde(default = "default_label_mode")]
    pub label_mode: LabelMode,
}

fn default_label_mode() -> LabelMode {
    LabelMode::Dirty
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SelectCfg {
    #[serde(default)]
    pub min_score: Option<f64>,
}

/// Optional overrides applied on top of the profile's training defaults.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainOverrides {
    #[serde(default)]
    pub base_lr: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub input_size: Option<usize>,
    #[serde(default)]
    pub arch: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Strip,
    Nc,
    Fineprune,
    Nad,
    Gradcam,
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::Strip => "strip",
            DefenseKind::Nc => "nc",
            DefenseKind::Fineprune => "fineprune",
            DefenseKind::Nad => "nad",
            DefenseKind::Gradcam => "gradcam",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StripParams {
    #[serde(default = "default_strip_n")]
    pub n: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_frr")]
    pub frr: f64,
    #[serde(default = "default_strip_set")]
    pub calibration_size: usize,
    #[serde(default = "default_strip_set")]
    pub test_size: usize,
}

fn default_strip_n() -> usize {
    16
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_frr() -> f64 {
    DEFAULT_FRR
}
fn default_strip_set() -> usize {
    64
}

impl Default for StripParams {
    fn default() -> Self {
        StripParams {
            n: default_strip_n(),
            alpha: default_alpha(),
            frr: default_frr(),
            calibration_size: default_strip_set(),
            test_size: default_strip_set(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NcParams {
    #[serde(default = "default_nc_steps")]
    pub steps: usize,
    #[serde(default = "default_nc_lr")]
    pub lr: f64,
    #[serde(default = "default_nc_batch")]
    pub batch_size: usize,
    #[serde(default = "default_nc_samples")]
    pub sample_size: usize,
}

fn default_nc_steps() -> usize {
    300
}
fn default_nc_lr() -> f64 {
    0.1
}
fn default_nc_batch() -> usize {
    8
}
fn default_nc_samples() -> usize {
    16
}

impl Default for NcParams {
    fn default() -> Self {
        NcParams {
            steps: default_nc_steps(),
            lr: default_nc_lr(),
            batch_size: default_nc_batch(),
            sample_size: default_nc_samples(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinePruneParams {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Defaults to the model's last convolutional layer.
    #[serde(default)]
    pub layer: Option<String>,
    #[serde(default = "default_prune_eval")]
    pub eval_cap: usize,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75]
}
fn default_prune_eval() -> usize {
    150
}

impl Default for FinePruneParams {
    fn default() -> Self {
        FinePruneParams {
            fractions: default_fractions(),
            layer: None,
            eval_cap: default_prune_eval(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NadParams {
    #[serde(default = "default_nad_epochs")]
    pub teacher_epochs: usize,
    #[serde(default = "default_nad_epochs")]
    pub student_epochs: usize,
    #[serde(default = "default_desk_distill_weight")]
    pub distill_weight: f64,
    #[serde(default = "default_nad_lr")]
    pub lr: f64,
    #[serde(default = "default_clean_fraction")]
    pub clean_fraction: f64,
    /// Conv layers whose attention is aligned; the desk CNN is stable with
    /// its last block only.
    #[serde(default = "default_nad_layers")]
    pub attention_layers: Vec<String>,
}

fn default_nad_epochs() -> usize {
    20
}
fn default_desk_distill_weight() -> f64 {
    10.0
}
fn default_nad_layers() -> Vec<String> {
    vec!["conv3".to_string()]
}
fn default_nad_lr() -> f64 {
    0.02
}
fn default_clean_fraction() -> f64 {
    0.05
}

impl Default for NadParams {
    fn default() -> Self {
        NadParams {
            teacher_epochs: default_nad_epochs(),
            student_epochs: default_nad_epochs(),
            distill_weight: default_desk_distill_weight(),
            lr: default_nad_lr(),
            clean_fraction: default_clean_fraction(),
            attention_layers: default_nad_layers(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcamParams {
    #[serde(default = "default_gradcam_samples")]
    pub samples: usize,
}

fn default_gradcam_samples() -> usize {
    24
}

impl Default for GradcamParams {
    fn default() -> Self {
        GradcamParams {
            samples: default_gradcam_samples(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DefenseParams {
    #[serde(default)]
    pub strip: StripParams,
    #[serde(default)]
    pub nc: NcParams,
    #[serde(default)]
    pub fineprune: FinePruneParams,
    #[serde(default)]
    pub nad: NadParams,
    #[serde(default)]
    pub gradcam: GradcamParams,
}

/// Label-only runs without any manifest generate their whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedDataParams {
    #[serde(default = "default_gen_clean")]
    pub clean_per_class: usize,
    #[serde(default = "default_gen_val")]
    pub val_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_gen_classes")]
    pub num_classes: usize,
}

fn default_gen_clean() -> usize {
    40
}
fn default_gen_val() -> usize {
    10
}
fn default_gen_classes() -> usize {
    DESK_CLASSES
}

impl Default for GeneratedDataParams {
    fn default() -> Self {
        GeneratedDataParams {
            clean_per_class: default_gen_clean(),
            val_per_class: default_gen_val(),
            image_size: default_image_size(),
            num_classes: default_gen_classes(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub access_level: AccessLevel,
    #[serde(default)]
    pub profile: Profile,
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub backends: BackendsCfg,
    /// Trigger name, or "auto" to take the suggestion module's top pick.
    pub trigger: String,
    #[serde(default)]
    pub suggest: SuggestCfg,
    #[serde(default)]
    pub source_strategy: StrategyChoice,
    pub poison: PoisonCfg,
    #[serde(default = "default_pool_multiplier")]
    pub pool_multiplier: f64,
    #[serde(default)]
    pub select: SelectCfg,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseKind>,
    #[serde(default)]
    pub defense_params: DefenseParams,
    #[serde(default)]
    pub generated_data: GeneratedDataParams,
    #[serde(default)]
    pub strict: bool,
}

fn default_pool_multiplier() -> f64 {
    2.0
}

fn default_defenses() -> Vec<DefenseKind> {
    vec![
        DefenseKind::Strip,
        DefenseKind::Nc,
        DefenseKind::Fineprune,
        DefenseKind::Nad,
        DefenseKind::Gradcam,
    ]
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig = serde_json::from_slice(&bytes).map_err(|e| {
            Error::config(path.display().to_string(), format!("invalid config: {e}"))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.poison.poisoning_rate > 0.0 && self.poison.poisoning_rate < 1.0) {
            return Err(Error::config(
                "poison.poisoning_rate",
                "must be in (0,1)",
            ));
        }
        if self.pool_multiplier < 1.0 {
            return Err(Error::config("pool_multiplier", "must be >= 1"));
        }
        if matches!(self.data, DataSource::None) {
            if self.access_level == AccessLevel::Dataset {
                return Err(Error::config(
                    "data",
                    "dataset access requires a manifest or fixtures",
                ));
            }
            if self.trigger == "auto" {
                return Err(Error::config(
                    "trigger",
                    "auto trigger needs a dataset to query; label-only runs without a manifest must name the trigger",
                ));
            }
        }
        if self.trigger.is_empty() {
            return Err(Error::config("trigger", "must be a name or \"auto\""));
        }
        Ok(())
    }

    /// Effective training configuration: profile defaults plus overrides.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = match self.profile {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::default(),
        };
        cfg.seed = derive_seed(self.seed, "train");
        if let Some(v) = self.train.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.train.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.train.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.train.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.train.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.train.input_size {
            cfg.input_size = v;
        }
        if let Some(v) = &self.train.arch {
            cfg.arch = v.clone();
        }
        cfg
    }

    /// Whether the suggestion stage runs: it needs a dataset to query.
    pub fn runs_suggest(&self) -> bool {
        !matches!(self.data, DataSource::None)
    }

    fn image_size(&self) -> usize {
        match &self.data {
            DataSource::Fixtures(p) => p.image_size,
            DataSource::None => self.generated_data.image_size,
            DataSource::Manifest { .. } => self.train_config().input_size,
        }
    }
}

/// Names a backend implementation for each of the four heavyweight roles.
/// Environment variables `POISONFORGE_BACKEND_{VQA,EDITOR,GENERATOR,SCORER}`
/// override the configured names.
pub struct BackendSet {
    pub vqa: Box<dyn VqaBackend>,
    pub editor: Box<dyn EditBackend>,
    pub editor_real: Box<dyn EditBackend>,
    pub generator: Box<dyn GenerateBackend>,
    pub generator_real: Box<dyn GenerateBackend>,
    pub scorer: Box<dyn ScorerBackend>,
}

fn backend_name(configured: &str, env_key: &str) -> String {
    std::env::var(env_key).unwrap_or_else(|_| configured.to_string())
}

pub fn build_backends(
    cfg: &BackendsCfg,
    data_dir: &Path,
    image_size: usize,
    class_names: &[String],
) -> Result<BackendSet> {
    let unknown = |role: &str, name: &str| {
        Error::config(
            format!("backends.{role}"),
            format!("unknown backend `{name}`; registered: stub"),
        )
    };
    let vqa_name = backend_name(&cfg.vqa, "POISONFORGE_BACKEND_VQA");
    let vqa: Box<dyn VqaBackend> = match vqa_name.as_str() {
        "stub" => {
            let tags_file = data_dir.join(TAGS_FILE);
            if tags_file.exists() {
                Box::new(StubVqa::from_tags_file(&tags_file)?)
            } else {
                Box::new(StubVqa::default())
            }
        }
        other => return Err(unknown("vqa", other)),
    };
    let editor_name = backend_name(&cfg.editor, "POISONFORGE_BACKEND_EDITOR");
    let (editor, editor_real): (Box<dyn EditBackend>, Box<dyn EditBackend>) =
        match editor_name.as_str() {
            "stub" => (
                Box::new(StubEditor::default()),
                Box::new(StubEditor::with_real_shift()),
            ),
            other => return Err(unknown("editor", other)),
        };
    let generator_name = backend_name(&cfg.generator, "POISONFORGE_BACKEND_GENERATOR");
    let (generator, generator_real): (Box<dyn GenerateBackend>, Box<dyn GenerateBackend>) =
        match generator_name.as_str() {
            "stub" => (
                Box::new(StubGenerator::new(image_size, class_names.to_vec())),
                Box::new(StubGenerator::new(image_size, class_names.to_vec()).with_real_shift()),
            ),
            other => return Err(unknown("generator", other)),
        };
    let scorer_name = backend_name(&cfg.scorer, "POISONFORGE_BACKEND_SCORER");
    let scorer: Box<dyn ScorerBackend> = match scorer_name.as_str() {
        "stub" => Box::new(StubScorer::new(class_names.to_vec())),
        other => return Err(unknown("scorer", other)),
    };
    Ok(BackendSet {
        vqa,
        editor,
        editor_real,
        generator,
        generator_real,
        scorer,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageMeta {
    stage: String,
    seed: u64,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    duration_ms: u128,
}

fn hash_records(run_dir: &Path, paths: &[PathBuf]) -> Result<Vec<FileRecord>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileRecord {
                path: p
                    .strip_prefix(run_dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .replace('\\', "/"),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

struct StageIo {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Summary of the whole run, also persisted as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub trigger: String,
    pub metrics: crate::eval::MetricsReport,
    pub poison_count: usize,
    pub stages: Vec<String>,
    pub defense_metrics: BTreeMap<String, BTreeMap<String, f64>>,
}

pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    run_dir: &'a Path,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a PipelineConfig, run_dir: &'a Path) -> Self {
        Pipeline { config, run_dir }
    }

    fn stage_names(&self) -> Vec<&'static str> {
        let mut stages = vec!["data"];
        if self.config.runs_suggest() {
            stages.push("suggest");
        }
        stages.extend([
            "trigger", "pool", "select", "assemble", "evalprep", "train", "eval", "defend",
            "report",
        ]);
        stages
    }

    fn meta_path(&self, stage: &str) -> PathBuf {
        self.run_dir.join("stages").join(format!("{stage}.json"))
    }

    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, stage)
    }

    fn dispatch(&self, stage: &str) -> Result<StageIo> {
        match stage {
            "data" => self.stage_data(),
            "suggest" => self.stage_suggest(),
            "trigger" => self.stage_trigger(),
            "pool" => self.stage_pool(),
            "select" => self.stage_select(),
            "assemble" => self.stage_assemble(),
            "evalprep" => self.stage_evalprep(),
            "train" => self.stage_train(),
            "eval" => self.stage_eval(),
            "defend" => self.stage_defend(),
            "report" => self.stage_report(),
            other => Err(Error::stage(other, "unknown stage")),
        }
    }

    fn run_stage(&self, stage: &str) -> Result<()> {
        let start = Instant::now();
        let io = self
            .dispatch(stage)
            .map_err(|e| Error::stage(stage, e.to_string()))?;
        let meta = StageMeta {
            stage: stage.to_string(),
            seed: self.stage_seed(stage),
            inputs: hash_records(self.run_dir, &io.inputs)?,
            outputs: hash_records(self.run_dir, &io.outputs)?,
            duration_ms: start.elapsed().as_millis(),
        };
        atomic_write(&self.meta_path(stage), &serde_json::to_vec_pretty(&meta)?)
    }

    /// Complete = meta present, recorded files present, hashes intact.
    /// Present-but-different files are tampering and poison the resume.
    fn check_stage(&self, stage: &str) -> Result<StageStatus> {
        let meta_path = self.meta_path(stage);
        if !meta_path.exists() {
            return Ok(StageStatus::Missing);
        }
        let meta: StageMeta = serde_json::from_slice(
            &std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        for record in meta.inputs.iter().chain(&meta.outputs) {
            let path = self.run_dir.join(&record.path);
            if !path.exists() {
                return Ok(StageStatus::Missing);
            }
            let found = sha256_file(&path)?;
            if found != record.sha256 {
                return Err(Error::HashMismatch {
                    path,
                    expected: record.sha256.clone(),
                    found,
                });
            }
        }
        Ok(StageStatus::Complete)
    }

    pub fn run(&self, from_scratch: bool) -> Result<RunSummary> {
        std::fs::create_dir_all(self.run_dir).map_err(|e| Error::io(self.run_dir, e))?;
        let mut force = from_scratch;
        for stage in self.stage_names() {
            if !force {
                match self.check_stage(stage)? {
                    StageStatus::Complete => continue,
                    StageStatus::Missing => force = true,
                }
            }
            self.run_stage(stage)?;
        }
        self.load_summary()
    }

    pub fn load_summary(&self) -> Result<RunSummary> {
        let path = self.run_dir.join(SUMMARY_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        Ok(serde_json::from_value(
            value
                .get("run")
                .cloned()
                .ok_or_else(|| Error::stage("report", "summary missing run section"))?,
        )?)
    }

    // ---- paths ----------------------------------------------------------

    fn data_dir(&self) -> PathBuf {
        self.run_dir.join("data")
    }

    fn data_manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.jsonl")
    }

    fn suggestions_path(&self) -> PathBuf {
        self.run_dir.join("suggest").join("suggestions.jsonl")
    }

    fn table_path(&self) -> PathBuf {
        self.run_dir.join("suggest").join("table.json")
    }

    fn trigger_path(&self) -> PathBuf {
        self.run_dir.join("trigger").join("chosen.json")
    }

    fn pool_dir(&self) -> PathBuf {
        self.run_dir.join("pool")
    }

    fn candidates_path(&self) -> PathBuf {
        self.pool_dir().join("candidates.jsonl")
    }

    fn sources_path(&self) -> PathBuf {
        self.pool_dir().join("sources.json")
    }

    fn selected_path(&self) -> PathBuf {
        self.run_dir.join("select").join("selected.jsonl")
    }

    fn poisoned_path(&self) -> PathBuf {
        self.run_dir.join("poisoned.jsonl")
    }

    fn eval_manifest_path(&self) -> PathBuf {
        self.run_dir.join("eval_manifest.jsonl")
    }

    fn regions_path(&self) -> PathBuf {
        self.run_dir.join("eval").join("patch_regions.json")
    }

    fn model_path(&self) -> PathBuf {
        self.run_dir.join("train").join("model.json")
    }

    fn history_path(&self) -> PathBuf {
        self.run_dir.join("train").join("history.json")
    }

    fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("eval").join("metrics.json")
    }

    fn defend_path(&self, method: &str) -> PathBuf {
        self.run_dir.join("defend").join(format!("{method}.json"))
    }

    fn chosen_trigger(&self) -> Result<String> {
        let bytes =
            std::fs::read(self.trigger_path()).map_err(|e| Error::io(self.trigger_path(), e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        Ok(value["trigger"].as_str().unwrap_or_default().to_string())
    }

    fn load_data_manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.data_manifest_path())
    }

    fn backends(&self, manifest: &DatasetManifest) -> Result<BackendSet> {
        build_backends(
            &self.config.backends,
            &self.data_dir(),
            self.config.image_size(),
            &manifest.class_names,
        )
    }

    // ---- stages ---------------------------------------------------------

    fn stage_data(&self) -> Result<StageIo> {
        let seed = self.stage_seed("data");
        let dir = self.data_dir();
        match &self.config.data {
            DataSource::Fixtures(params) => {
                make_desk_dataset(
                    &dir,
                    params.num_classes,
                    params.per_class_train,
                    params.per_class_val,
                    params.per_class_real,
                    params.image_size,
                    seed,
                )?;
                Ok(StageIo {
                    inputs: vec![],
                    outputs: vec![self.data_manifest_path(), dir.join(TAGS_FILE)],
                })
            }
            DataSource::Manifest { path } => {
                // copy into the run dir so the run is self-contained
                let source = PathBuf::from(path);
                let manifest = DatasetManifest::load(&source)?;
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let source_root = source.parent().unwrap_or_else(|| Path::new("."));
                for entry in &manifest.entries {
                    let from = source_root.join(&entry.uri);
                    let to = dir.join(&entry.uri);
                    if let Some(parent) = to.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
                }
                let tags_from = source_root.join(TAGS_FILE);
                if tags_from.exists() {
                    std::fs::copy(&tags_from, dir.join(TAGS_FILE))
                        .map_err(|e| Error::io(&tags_from, e))?;
                }
                manifest.save(&self.data_manifest_path())?;
                Ok(StageIo {
                    inputs: vec![],
                    outputs: vec![self.data_manifest_path()],
                })
            }
            DataSource::None => {
                // label-only, no manifest: generate the clean dataset
                let params = &self.config.generated_data;
                let class_names =
                    crate::fixtures::default_class_names(params.num_classes);
                let backends = build_backends(
                    &self.config.backends,
                    &dir,
                    params.image_size,
                    &class_names,
                )?;
                let mut manifest = DatasetManifest::new(class_names.clone(), seed);
                std::fs::create_dir_all(dir.join("images"))
                    .map_err(|e| Error::io(&dir, e))?;
                for (class_idx, class) in class_names.iter().enumerate() {
                    for (split, count, tag) in [
                        (Split::Train, params.clean_per_class, "train"),
                        (Split::Val, params.val_per_class, "val"),
                    ] {
                        for i in 0..count {
                            let item_seed =
                                derive_seed(seed, &format!("genclean|{tag}|{class_idx}|{i}"));
                            let img =
                                backends.generator.generate(class, 2.0, item_seed)?;
                            let image_id = format!("{split}-gen-c{class_idx}-{i:05}");
                            let uri = format!("images/{image_id}.png");
                            img.save_png(&dir.join(&uri))?;
                            manifest.entries.push(ManifestEntry {
                                image_id,
                                uri,
                                label: class_idx,
                                split,
                                provenance: Provenance::Generated,
                                poisoned: false,
                                trigger: None,
                                score: None,
                                source_image_id: None,
                            });
                        }
                    }
                }
                manifest.save(&self.data_manifest_path())?;
                Ok(StageIo {
                    inputs: vec![],
                    outputs: vec![self.data_manifest_path()],
                })
            }
        }
    }

    fn stage_suggest(&self) -> Result<StageIo> {
        let manifest = self.load_data_manifest()?;
        let backends = self.backends(&manifest)?;
        let train_only = manifest.filtered(|e| e.split == Split::Train);
        let run = collect_suggestions(
            backends.vqa.as_ref(),
            &train_only,
            &self.data_dir(),
            self.config.suggest.k,
            self.config.suggest.sample_cap,
            self.stage_seed("suggest"),
            self.config.strict,
        )?;
        let table = compute_compatibility(&run.records, &train_only)?;

        let mut lines = String::new();
        for record in &run.records {
            lines.push_str(&serde_json::to_string(record)?);
            lines.push('\n');
        }
        atomic_write(&self.suggestions_path(), lines.as_bytes())?;
        let table_json = json!({
            "queried_per_class": table.queried_per_class,
            "rows": table.flat_rows(),
            "warnings": run.warnings,
        });
        atomic_write(&self.table_path(), &serde_json::to_vec_pretty(&table_json)?)?;
        Ok(StageIo {
            inputs: vec![self.data_manifest_path()],
            outputs: vec![self.suggestions_path(), self.table_path()],
        })
    }

    fn stage_trigger(&self) -> Result<StageIo> {
        let (trigger, source) = if self.config.trigger == "auto" {
            let manifest = self.load_data_manifest()?;
            let train_only = manifest.filtered(|e| e.split == Split::Train);
            let records = self.load_suggestions()?;
            let table = compute_compatibility(&records, &train_only)?;
            let picks = recommend(&table, 1);
            let trigger = picks.into_iter().next().ok_or_else(|| {
                Error::stage("trigger", "no moderate-band trigger to recommend")
            })?;
            (trigger, "auto")
        } else {
            (self.config.trigger.clone(), "config")
        };
        let value = json!({ "trigger": trigger, "source": source });
        atomic_write(&self.trigger_path(), &serde_json::to_vec_pretty(&value)?)?;
        let inputs = if source == "auto" {
            vec![self.suggestions_path()]
        } else {
            vec![]
        };
        Ok(StageIo {
            inputs,
            outputs: vec![self.trigger_path()],
        })
    }

    fn load_suggestions(&self) -> Result<Vec<crate::suggest::SuggestionRecord>> {
        let path = self.suggestions_path();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::ParseLine {
                line: i + 1,
                detail: e.to_string(),
            })?);
        }
        Ok(records)
    }

    fn poison_need(&self, manifest: &DatasetManifest) -> usize {
        crate::assemble::poison_count(
            self.config.poison.poisoning_rate,
            manifest.split_entries(Split::Train).len(),
        )
    }

    fn stage_pool(&self) -> Result<StageIo> {
        let manifest = self.load_data_manifest()?;
        let backends = self.backends(&manifest)?;
        let trigger = self.chosen_trigger()?;
        let needed = self.poison_need(&manifest);
        let pool_size = ((needed as f64) * self.config.pool_multiplier).ceil() as usize;
        let seed = self.stage_seed("pool");
        std::fs::create_dir_all(self.pool_dir()).map_err(|e| Error::io(self.pool_dir(), e))?;

        let mut outputs = vec![self.candidates_path()];
        let candidates: Vec<PoisonCandidate> = match self.config.access_level {
            AccessLevel::Dataset => {
                let strategy = match self.config.source_strategy {
                    StrategyChoice::Random => SourceStrategy::Random,
                    StrategyChoice::SuggestionFiltered => SourceStrategy::SuggestionFiltered,
                    StrategyChoice::Auto => {
                        if self.config.runs_suggest() {
                            let records = self.load_suggestions()?;
                            let tagged = records
                                .iter()
                                .filter(|r| r.objects.contains(&trigger))
                                .count();
                            if tagged >= pool_size {
                                SourceStrategy::SuggestionFiltered
                            } else {
                                SourceStrategy::Random
                            }
                        } else {
                            SourceStrategy::Random
                        }
                    }
                };
                let suggestions = if strategy == SourceStrategy::SuggestionFiltered {
                    Some(self.load_suggestions()?)
                } else {
                    None
                };
                let pick: SourcePick = pick_edit_sources(
                    &manifest,
                    strategy,
                    &trigger,
                    suggestions.as_deref(),
                    pool_size,
                    seed,
                )?;
                let sources_json = json!({
                    "strategy": match strategy {
                        SourceStrategy::Random => "random",
                        SourceStrategy::SuggestionFiltered => "suggestion_filtered",
                    },
                    "requested": pool_size,
                    "shortfall": pick.shortfall,
                    "ids": pick.ids,
                });
                atomic_write(&self.sources_path(), &serde_json::to_vec_pretty(&sources_json)?)?;
                outputs.push(self.sources_path());
                let sources: Vec<ManifestEntry> = pick
                    .ids
                    .iter()
                    .map(|id| manifest.entry(id).cloned().expect("picked from manifest"))
                    .collect();
                let outcome = edit_batch(
                    backends.editor.as_ref(),
                    &sources,
                    &self.data_dir(),
                    &self.pool_dir(),
                    &trigger,
                    seed,
                    self.config.strict,
                )?;
                outcome.candidates
            }
            AccessLevel::LabelOnly => {
                // pool split across non-target classes; generated poison is
                // relabeled to the target in dirty mode anyway
                let class_names = &manifest.class_names;
                let mut all = Vec::new();
                let donor_classes: Vec<usize> = (0..class_names.len())
                    .filter(|&c| c != self.config.poison.target_class)
                    .collect();
                let per_class = pool_size.div_ceil(donor_classes.len());
                for &class_idx in &donor_classes {
                    let class = &class_names[class_idx];
                    let mut spec = GenerationSpec::new(class.clone(), trigger.clone(), per_class);
                    if class == "dog" || class == "cat" {
                        spec.action = Some("sitting".to_string());
                    }
                    let outcome = generate_batch(
                        backends.generator.as_ref(),
                        &spec,
                        class,
                        &self.pool_dir(),
                        derive_seed(seed, &format!("gen-pool-{class_idx}")),
                        self.config.strict,
                    )?;
                    all.extend(outcome.candidates);
                }
                all
            }
        };
        save_candidates(&candidates, &self.candidates_path())?;
        Ok(StageIo {
            inputs: vec![self.data_manifest_path(), self.trigger_path()],
            outputs,
        })
    }

    fn stage_select(&self) -> Result<StageIo> {
        let manifest = self.load_data_manifest()?;
        let backends = self.backends(&manifest)?;
        let candidates = load_candidates(&self.candidates_path())?;
        let needed = self.poison_need(&manifest);
        // score against the subject class: the source class for edited
        // candidates, the recorded subject for generated ones
        let scored: Result<Vec<PoisonCandidate>> = candidates
            .iter()
            .map(|candidate| {
                let class_name = match (&candidate.subject, &candidate.source_image_id) {
                    (Some(subject), _) => subject.clone(),
                    (None, Some(source_id)) => {
                        let entry = manifest
                            .entry(source_id)
                            .ok_or_else(|| Error::UnknownImageId(source_id.clone()))?;
                        manifest.class_names[entry.label].clone()
                    }
                    (None, None) => manifest.class_names[self.config.poison.target_class].clone(),
                };
                let scored = score_candidates(
                    backends.scorer.as_ref(),
                    std::slice::from_ref(candidate),
                    &self.pool_dir(),
                    &class_name,
                )?;
                Ok(scored.into_iter().next().expect("one in, one out"))
            })
            .collect();
        let selected = select_top_k(&scored?, needed, self.config.select.min_score)?;
        save_candidates(&selected, &self.selected_path())?;
        Ok(StageIo {
            inputs: vec![self.candidates_path()],
            outputs: vec![self.selected_path()],
        })
    }

    fn stage_assemble(&self) -> Result<StageIo> {
        let manifest = self.load_data_manifest()?;
        let trigger = self.chosen_trigger()?;
        let selected = load_candidates(&self.selected_path())?;
        // rebase uris so the poisoned manifest resolves from the run root
        let mut rebased = manifest.clone();
        for entry in &mut rebased.entries {
            entry.uri = format!("data/{}", entry.uri);
        }
        let selected: Vec<PoisonCandidate> = selected
            .into_iter()
            .map(|mut c| {
                c.uri = format!("pool/{}", c.uri);
                c
            })
            .collect();
        let cfg = PoisonConfig {
            target_class: self.config.poison.target_class,
            poisoning_rate: self.config.poison.poisoning_rate,
            label_mode: self.config.poison.label_mode,
            trigger,
        };
        let poisoned = assemble(&rebased, &selected, &cfg)?;
        poisoned.save(&self.poisoned_path())?;
        Ok(StageIo {
            inputs: vec![self.data_manifest_path(), self.selected_path()],
            outputs: vec![self.poisoned_path()],
        })
    }

    fn stage_evalprep(&self) -> Result<StageIo> {
        let poisoned = DatasetManifest::load(&self.poisoned_path())?;
        let backends = self.backends(&poisoned)?;
        let trigger = self.chosen_trigger()?;
        let seed = self.stage_seed("evalprep");
        let eval_dir = self.run_dir.join("eval");
        std::fs::create_dir_all(eval_dir.join("images"))
            .map_err(|e| Error::io(&eval_dir, e))?;

        let mut manifest = poisoned.clone();
        let mut regions: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
        let edit_prompt = crate::generate::edit_prompt(&trigger);

        let mut make_triggered = |source_entries: Vec<ManifestEntry>,
                                  split: Split,
                                  use_real_backend: bool,
                                  prefix: &str|
         -> Result<Vec<ManifestEntry>> {
            let mut out = Vec::new();
            match self.config.access_level {
                AccessLevel::Dataset => {
                    let editor = if use_real_backend {
                        backends.editor_real.as_ref()
                    } else {
                        backends.editor.as_ref()
                    };
                    for (i, entry) in source_entries.iter().enumerate() {
                        let src_path = self.run_dir.join(&entry.uri);
                        let item_seed = derive_seed(seed, &format!("{prefix}|{i}"));
                        let edited = editor.edit(&src_path, &edit_prompt, item_seed)?;
                        let image_id = format!("{prefix}-{}", entry.image_id);
                        let uri = format!("eval/images/{image_id}.png");
                        edited.save_png(&self.run_dir.join(&uri))?;
                        let src_img = ImageBuf::load_png(&src_path)?;
                        if let Some(bbox) = src_img.diff_bbox(&edited) {
                            regions.insert(image_id.clone(), bbox);
                        }
                        out.push(ManifestEntry {
                            image_id,
                            uri,
                            label: entry.label,
                            split,
                            provenance: Provenance::Edited,
                            poisoned: true,
                            trigger: Some(trigger.clone()),
                            score: None,
                            source_image_id: Some(entry.image_id.clone()),
                        });
                    }
                }
                AccessLevel::LabelOnly => {
                    let generator = if use_real_backend {
                        backends.generator_real.as_ref()
                    } else {
                        backends.generator.as_ref()
                    };
                    // per-class counts mirror the source set
                    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
                    for entry in &source_entries {
                        *per_class.entry(entry.label).or_default() += 1;
                    }
                    for (&class_idx, &count) in &per_class {
                        if class_idx == self.config.poison.target_class {
                            continue;
                        }
                        let class = poisoned.class_names[class_idx].clone();
                        let spec = GenerationSpec::new(class.clone(), trigger.clone(), 1);
                        let prompt = crate::generate::generation_prompt(&spec)?;
                        for i in 0..count {
                            let item_seed =
                                derive_seed(seed, &format!("{prefix}|{class_idx}|{i}"));
                            let img = generator.generate(&prompt, spec.guidance_scale, item_seed)?;
                            let image_id = format!("{prefix}-gen-c{class_idx}-{i:05}");
                            let uri = format!("eval/images/{image_id}.png");
                            img.save_png(&self.run_dir.join(&uri))?;
                            if let Some(bbox) = crate::fixtures::patch_region(&img) {
                                regions.insert(image_id.clone(), bbox);
                            }
                            out.push(ManifestEntry {
                                image_id,
                                uri,
                                label: class_idx,
                                split,
                                provenance: Provenance::Generated,
                                poisoned: true,
                                trigger: Some(trigger.clone()),
                                score: None,
                                source_image_id: None,
                            });
                        }
                    }
                }
            }
            Ok(out)
        };

        let val_sources: Vec<ManifestEntry> = poisoned
            .split_entries(Split::Val)
            .into_iter()
            .filter(|e| !e.poisoned)
            .cloned()
            .collect();
        let val_poison = make_triggered(val_sources, Split::Val, false, "valpoison")?;
        manifest.entries.extend(val_poison);

        let real_sources: Vec<ManifestEntry> = poisoned
            .split_entries(Split::RealClean)
            .into_iter()
            .cloned()
            .collect();
        if !real_sources.is_empty() {
            let real_poison =
                make_triggered(real_sources, Split::RealPoison, true, "realpoison")?;
            manifest.entries.extend(real_poison);
        }

        manifest.sort_canonical();
        manifest.save(&self.eval_manifest_path())?;
        atomic_write(&self.regions_path(), &serde_json::to_vec_pretty(&regions)?)?;
        Ok(StageIo {
            inputs: vec![self.poisoned_path(), self.trigger_path()],
            outputs: vec![self.eval_manifest_path(), self.regions_path()],
        })
    }

    fn stage_train(&self) -> Result<StageIo> {
        let poisoned = DatasetManifest::load(&self.poisoned_path())?;
        let cfg = self.config.train_config();
        let outcome = train(&poisoned, self.run_dir, &cfg)?;
        outcome.model.save(&self.model_path())?;
        atomic_write(
            &self.history_path(),
            &serde_json::to_vec_pretty(&outcome.history)?,
        )?;
        Ok(StageIo {
            inputs: vec![self.poisoned_path()],
            outputs: vec![self.model_path(), self.history_path()],
        })
    }

    fn stage_eval(&self) -> Result<StageIo> {
        let manifest = DatasetManifest::load(&self.eval_manifest_path())?;
        let model = NeuralNet::load(&self.model_path())?;
        let report = evaluate(
            &model,
            &manifest,
            self.run_dir,
            self.config.poison.target_class,
            self.config.train_config().input_size,
        )?;
        atomic_write(
            &self.metrics_path(),
            &serde_json::to_vec_pretty(&report.rounded())?,
        )?;
        Ok(StageIo {
            inputs: vec![self.eval_manifest_path(), self.model_path()],
            outputs: vec![self.metrics_path()],
        })
    }

    fn stage_defend(&self) -> Result<StageIo> {
        let manifest = DatasetManifest::load(&self.eval_manifest_path())?;
        let model = NeuralNet::load(&self.model_path())?;
        let mut outputs = Vec::new();
        for kind in &self.config.defenses {
            let report = self.run_defense(*kind, &model, &manifest)?;
            let path = self.defend_path(kind.name());
            atomic_write(&path, &serde_json::to_vec_pretty(&report)?)?;
            outputs.push(path);
        }
        Ok(StageIo {
            inputs: vec![self.eval_manifest_path(), self.model_path()],
            outputs,
        })
    }

    fn stage_report(&self) -> Result<StageIo> {
        let metrics: crate::eval::MetricsReport = serde_json::from_slice(
            &std::fs::read(self.metrics_path())
                .map_err(|e| Error::io(self.metrics_path(), e))?,
        )?;
        let trigger = self.chosen_trigger()?;
        let poisoned = DatasetManifest::load(&self.poisoned_path())?;
        let poison_count = poisoned.entries.iter().filter(|e| e.poisoned).count();

        let mut defense_metrics = BTreeMap::new();
        let mut defense_details = serde_json::Map::new();
        for kind in &self.config.defenses {
            let path = self.defend_path(kind.name());
            if path.exists() {
                let report: DefenseReport =
                    serde_json::from_slice(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
                defense_metrics.insert(kind.name().to_string(), report.metrics.clone());
                defense_details.insert(kind.name().to_string(), report.details);
            }
        }

        let run = RunSummary {
            trigger,
            metrics,
            poison_count,
            stages: self.stage_names().iter().map(|s| s.to_string()).collect(),
            defense_metrics,
        };
        let summary = json!({
            "schema_version": crate::manifest::SCHEMA_VERSION,
            "config": self.config,
            "run": run,
            "artifacts": {
                "poisoned_manifest": sha256_file(&self.poisoned_path())?,
                "eval_manifest": sha256_file(&self.eval_manifest_path())?,
                "model": sha256_file(&self.model_path())?,
            },
        });
        let summary_path = self.run_dir.join(SUMMARY_FILE);
        atomic_write(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;

        self.render_plots(&defense_details)?;
        let mut inputs = vec![self.metrics_path(), self.poisoned_path()];
        for kind in &self.config.defenses {
            inputs.push(self.defend_path(kind.name()));
        }
        Ok(StageIo {
            inputs,
            outputs: vec![summary_path],
        })
    }

    /// Re-render the report plots from the defend artifacts on disk.
    pub fn rerender_plots(&self) -> Result<()> {
        let mut details = serde_json::Map::new();
        for kind in &self.config.defenses {
            let path = self.defend_path(kind.name());
            if path.exists() {
                let report: DefenseReport = serde_json::from_slice(
                    &std::fs::read(&path).map_err(|e| Error::io(&path, e))?,
                )?;
                details.insert(kind.name().to_string(), report.details);
            }
        }
        self.render_plots(&details)
    }

    fn render_plots(&self, details: &serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let plots_dir = self.run_dir.join("plots");
        let as_vec = |v: &serde_json::Value| -> Vec<f64> {
            v.as_array()
                .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                .unwrap_or_default()
        };
        if let Some(strip) = details.get("strip") {
            let clean = as_vec(&strip["clean_entropies"]);
            let triggered = as_vec(&strip["triggered_entropies"]);
            let img = crate::plot::histogram(
                &[("clean", &clean), ("triggered", &triggered)],
                20,
            );
            img.save_png(&plots_dir.join("strip_entropy_hist.png"))?;
        }
        if let Some(nc) = details.get("nc") {
            let indices = as_vec(&nc["anomaly_indices"]);
            let img = crate::plot::bar_chart(&indices, Some(2.0));
            img.save_png(&plots_dir.join("nc_anomaly_index.png"))?;
        }
        if let Some(fp) = details.get("fineprune") {
            let fractions = as_vec(&fp["fractions"]);
            let ca = as_vec(&fp["ca"]);
            let asr = as_vec(&fp["asr"]);
            if fractions.len() >= 2 {
                let img = crate::plot::line_chart(&fractions, &[("ca", &ca), ("asr", &asr)]);
                img.save_png(&plots_dir.join("fineprune_curve.png"))?;
            }
        }
        Ok(())
    }

    // ---- defense runners --------------------------------------------------

    fn eval_tensors(
        &self,
        manifest: &DatasetManifest,
        split: Split,
        poisoned: bool,
        cap: usize,
    ) -> Result<Vec<Tensor3>> {
        let store = ImageStore::new(self.run_dir, self.config.train_config().input_size);
        manifest
            .split_entries(split)
            .into_iter()
            .filter(|e| e.poisoned == poisoned)
            .take(cap)
            .map(|e| store.load(e))
            .collect()
    }

    fn run_defense(
        &self,
        kind: DefenseKind,
        model: &NeuralNet,
        manifest: &DatasetManifest,
    ) -> Result<DefenseReport> {
        let target = self.config.poison.target_class;
        let input_size = self.config.train_config().input_size;
        let store = ImageStore::new(self.run_dir, input_size);
        let mut report = DefenseReport::new(kind.name());
        match kind {
            DefenseKind::Strip => {
                let p = &self.config.defense_params.strip;
                let clean = self.eval_tensors(manifest, Split::Val, false, 2 * p.calibration_size)?;
                if clean.len() < 2 * p.n.max(1) {
                    return Err(Error::stage("defend", "not enough clean val images for strip"));
                }
                let (overlays, rest) = clean.split_at(p.n);
                let calibration: Vec<Tensor3> =
                    rest.iter().take(p.calibration_size).cloned().collect();
                let test_clean: Vec<Tensor3> = rest
                    .iter()
                    .skip(p.calibration_size.min(rest.len().saturating_sub(1)))
                    .take(p.test_size)
                    .cloned()
                    .collect();
                let test_clean = if test_clean.is_empty() {
                    calibration.clone()
                } else {
                    test_clean
                };
                let triggered = self.eval_tensors(manifest, Split::Val, true, p.test_size)?;
                let clean_result = strip_detect(
                    model,
                    &calibration,
                    &test_clean,
                    overlays,
                    p.frr,
                    p.n,
                    p.alpha,
                )?;
                let trig_result = strip_detect(
                    model,
                    &calibration,
                    &triggered,
                    overlays,
                    p.frr,
                    p.n,
                    p.alpha,
                )?;
                report.params = serde_json::to_value(p)?;
                report.metrics.insert("threshold".into(), clean_result.threshold);
                report
                    .metrics
                    .insert("clean_median_entropy".into(), median(&clean_result.entropies));
                report.metrics.insert(
                    "triggered_median_entropy".into(),
                    median(&trig_result.entropies),
                );
                report
                    .metrics
                    .insert("clean_flag_rate".into(), clean_result.flagged_fraction());
                report
                    .metrics
                    .insert("triggered_flag_rate".into(), trig_result.flagged_fraction());
                report.details = json!({
                    "clean_entropies": clean_result.entropies,
                    "triggered_entropies": trig_result.entropies,
                });
                report.notes.push(
                    "triggered inputs flagged when entropy < calibration quantile".into(),
                );
            }
            DefenseKind::Nc => {
                let p = &self.config.defense_params.nc;
                let samples = self.eval_tensors(manifest, Split::Val, false, p.sample_size)?;
                let cfg = CleanseConfig {
                    steps: p.steps,
                    lr: p.lr,
                    batch_size: p.batch_size,
                    seed: self.stage_seed("defend-nc"),
                    ..CleanseConfig::default()
                };
                let result = neural_cleanse(model, &samples, manifest.class_names.len(), &cfg)?;
                report.params = serde_json::to_value(p)?;
                for (c, norm) in result.norms.iter().enumerate() {
                    report.metrics.insert(format!("mask_l1_class_{c}"), *norm);
                }
                let max_index = result
                    .anomaly_indices
                    .iter()
                    .cloned()
                    .fold(0.0_f64, f64::max);
                report.metrics.insert("max_anomaly_index".into(), max_index);
                report
                    .metrics
                    .insert("flagged_classes".into(), result.flagged.len() as f64);
                report.details = json!({
                    "norms": result.norms,
                    "anomaly_indices": result.anomaly_indices,
                    "flagged": result.flagged,
                });
                // the index threshold is sometimes read in the opposite
                // direction; keep both readings derivable from the norms
                report.notes.push(
                    "flagging rule: below-median mask norm with anomaly index > 2".into(),
                );
                report.notes.push(
                    "alternative reading flags anomaly indices below 2; raw norms and indices are in details".into(),
                );
            }
            DefenseKind::Fineprune => {
                let p = &self.config.defense_params.fineprune;
                let layer = match &p.layer {
                    Some(layer) => layer.clone(),
                    None => model
                        .last_conv_layer()
                        .ok_or_else(|| Error::stage("defend", "model has no conv layer"))?,
                };
                let activation_set = self.eval_tensors(manifest, Split::Val, false, 64)?;
                let val = manifest.split_entries(Split::Val);
                let clean: Vec<&ManifestEntry> = val
                    .iter()
                    .filter(|e| !e.poisoned)
                    .take(p.eval_cap)
                    .cloned()
                    .collect();
                let poisoned: Vec<&ManifestEntry> = val
                    .iter()
                    .filter(|e| e.poisoned)
                    .take(p.eval_cap)
                    .cloned()
                    .collect();
                let sets = PruneEvalSets {
                    clean,
                    poisoned,
                    target_class: target,
                    store: &store,
                };
                let curve = fine_prune(model, &activation_set, &layer, &p.fractions, &sets)?;
                report.params = serde_json::to_value(p)?;
                for point in &curve.points {
                    report
                        .metrics
                        .insert(format!("ca_at_{:.2}", point.fraction), point.ca);
                    report
                        .metrics
                        .insert(format!("asr_at_{:.2}", point.fraction), point.asr);
                }
                report.details = json!({
                    "layer": curve.layer,
                    "channel_order": curve.channel_order,
                    "fractions": curve.points.iter().map(|p| p.fraction).collect::<Vec<_>>(),
                    "ca": curve.points.iter().map(|p| p.ca).collect::<Vec<_>>(),
                    "asr": curve.points.iter().map(|p| p.asr).collect::<Vec<_>>(),
                });
            }
            DefenseKind::Nad => {
                let p = &self.config.defense_params.nad;
                let train_clean: Vec<&ManifestEntry> = manifest
                    .split_entries(Split::Train)
                    .into_iter()
                    .filter(|e| !e.poisoned)
                    .collect();
                let take = ((train_clean.len() as f64 * p.clean_fraction).round() as usize).max(1);
                // seeded spread over the clean pool: fixed stride keeps it
                // deterministic and class-balanced for sorted manifests
                let stride = (train_clean.len() / take).max(1);
                let subset: Vec<(Tensor3, usize)> = train_clean
                    .iter()
                    .step_by(stride)
                    .take(take)
                    .map(|e| Ok((store.load(e)?, e.label)))
                    .collect::<Result<_>>()?;
                let cfg = NadConfig {
                    teacher_epochs: p.teacher_epochs,
                    student_epochs: p.student_epochs,
                    distill_weight: p.distill_weight,
                    lr: p.lr,
                    attention_layers: p.attention_layers.clone(),
                    seed: self.stage_seed("defend-nad"),
                    ..NadConfig::default()
                };
                let val = manifest.split_entries(Split::Val);
                let clean: Vec<&ManifestEntry> =
                    val.iter().filter(|e| !e.poisoned).cloned().collect();
                let triggered: Vec<&ManifestEntry> =
                    val.iter().filter(|e| e.poisoned).cloned().collect();
                let before = NadSnapshot {
                    ca: clean_accuracy(model, &clean, &store)?,
                    asr: attack_success_rate(model, &triggered, target, &store)?,
                };
                let outcome = nad(model, &subset, &cfg)?;
                let after = NadSnapshot {
                    ca: clean_accuracy(&outcome.student, &clean, &store)?,
                    asr: attack_success_rate(&outcome.student, &triggered, target, &store)?,
                };
                outcome
                    .student
                    .save(&self.run_dir.join("defend").join("nad_student.json"))?;
                report.params = serde_json::to_value(p)?;
                report.metrics.insert("ca_before".into(), before.ca);
                report.metrics.insert("asr_before".into(), before.asr);
                report.metrics.insert("ca_after".into(), after.ca);
                report.metrics.insert("asr_after".into(), after.asr);
                report.details = json!({
                    "student_losses": outcome.student_losses,
                    "clean_subset_size": subset.len(),
                });
            }
            DefenseKind::Gradcam => {
                let p = &self.config.defense_params.gradcam;
                let layer = model
                    .last_conv_layer()
                    .ok_or_else(|| Error::stage("defend", "model has no conv layer"))?;
                let regions: BTreeMap<String, (usize, usize, usize, usize)> =
                    serde_json::from_slice(
                        &std::fs::read(self.regions_path())
                            .map_err(|e| Error::io(self.regions_path(), e))?,
                    )?;
                let triggered: Vec<&ManifestEntry> = manifest
                    .split_entries(Split::Val)
                    .into_iter()
                    .filter(|e| e.poisoned && regions.contains_key(&e.image_id))
                    .take(p.samples)
                    .collect();
                if triggered.is_empty() {
                    return Err(Error::stage("defend", "no triggered val images for grad-cam"));
                }
                let mut localized = 0usize;
                let mut mean_inside_sum = 0.0;
                let mut mean_outside_sum = 0.0;
                for (i, entry) in triggered.iter().enumerate() {
                    let x = store.load(entry)?;
                    let heat = grad_cam(model, &x, target, &layer)?;
                    let up = upsample_map(&heat, input_size, input_size);
                    let src_size = self.config.image_size().max(1);
                    let (bx0, by0, bx1, by1) = regions[&entry.image_id];
                    // region coordinates are in source pixels; rescale
                    let sx = input_size as f64 / src_size as f64;
                    let (rx0, ry0) = ((bx0 as f64 * sx) as usize, (by0 as f64 * sx) as usize);
                    let (rx1, ry1) = (
                        ((bx1 as f64 + 1.0) * sx).ceil() as usize - 1,
                        ((by1 as f64 + 1.0) * sx).ceil() as usize - 1,
                    );
                    let mut inside = (0.0, 0usize);
                    let mut outside = (0.0, 0usize);
                    for y in 0..input_size {
                        for xx in 0..input_size {
                            let v = up.get(0, y, xx);
                            if y >= ry0 && y <= ry1.min(input_size - 1) && xx >= rx0 && xx <= rx1.min(input_size - 1) {
                                inside.0 += v;
                                inside.1 += 1;
                            } else {
                                outside.0 += v;
                                outside.1 += 1;
                            }
                        }
                    }
                    let mean_inside = inside.0 / inside.1.max(1) as f64;
                    let mean_outside = outside.0 / outside.1.max(1) as f64;
                    mean_inside_sum += mean_inside;
                    mean_outside_sum += mean_outside;
                    if mean_inside > mean_outside {
                        localized += 1;
                    }
                    if i < 4 {
                        let img = ImageBuf::from_tensor(&Tensor3::from_vec(
                            3,
                            input_size,
                            input_size,
                            [up.data.clone(), up.data.clone(), up.data.clone()].concat(),
                        ));
                        img.save_png(
                            &self
                                .run_dir
                                .join("defend")
                                .join(format!("gradcam_{}.png", entry.image_id)),
                        )?;
                    }
                }
                let n = triggered.len() as f64;
                report.params = serde_json::to_value(p)?;
                report
                    .metrics
                    .insert("localized_fraction".into(), localized as f64 / n);
                report
                    .metrics
                    .insert("mean_heat_inside".into(), mean_inside_sum / n);
                report
                    .metrics
                    .insert("mean_heat_outside".into(), mean_outside_sum / n);
                report.details = json!({
                    "samples": triggered.len(),
                    "layer": layer,
                });
            }
        }
        Ok(report)
    }
}

enum StageStatus {
    Complete,
    Missing,
}

/// Execute the full pipeline from a config file. The config is copied into
/// the run directory so the run is self-describing and resumable.
pub fn run_pipeline(config_path: &Path, run_dir: &Path) -> Result<RunSummary> {
    let config = PipelineConfig::load(config_path)?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    atomic_write(
        &run_dir.join("config.json"),
        &serde_json::to_vec_pretty(&config)?,
    )?;
    Pipeline::new(&config, run_dir).run(true)
}

/// Continue a run from its first incomplete stage. Completed stages are
/// verified against their recorded hashes and skipped; a tampered artifact
/// aborts with a hash-mismatch explanation.
pub fn resume(run_dir: &Path) -> Result<RunSummary> {
    let config_path = run_dir.join("config.json");
    if !config_path.exists() {
        return Err(Error::config(
            config_path.display().to_string(),
            "run directory has no config.json; was this directory created by `run`?",
        ));
    }
    let config = PipelineConfig::load(&config_path)?;
    Pipeline::new(&config, run_dir).run(false)
}
