//! Wiring of the three stages and the comparison variants: profiles, training
//! with provenance records, full-chain inference with overrides, evaluation
//! and bundle checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    train_seg_only, train_standard, SegOnlyClassifier, SegOnlyConfig, StandardConfig, StandardModel,
};
use crate::conceiver::{
    concept_targets, train_conceiver, Conceiver, ConceiverConfig, ConceiverInput, EncoderConfig,
    Pooling,
};
use crate::metrics::{
    classification_metrics, concept_metrics, mean_std, ClassificationMetrics, ConceptMetrics,
    IouAccumulator, MeanStd,
};
use crate::numerics::serialize::{read_store, write_store};
use crate::numerics::{NumericsError, ParamStore, Tensor};
use crate::observer::{
    soft_mask, train_observer, MaskedStack, Observer, ObserverConfig, Provenance, SegmentationMap,
};
use crate::predictor::{train_predictor, ClassOutput, Predictor, PredictorConfig};
use crate::schema::{load_schema, ConceptSchema, SchemaError};
use crate::synth::{
    derive_seed, reference_counts, stratified_split, Dataset, GeoScan, SynthConfig, SynthError,
};
use crate::train::{TrainConfig, TrainError, TrainLog};

pub const BUNDLE_MAGIC: &[u8; 8] = b"PCBMBNDL";
pub const BUNDLE_VERSION: u32 = 1;
const CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("variant {variant} has no {component}")]
    MissingComponent {
        variant: Variant,
        component: &'static str,
    },
    #[error("leakage guard: {0}")]
    Leakage(String),
    #[error("provenance: {0}")]
    Provenance(String),
    #[error("invalid override: {message}")]
    Override { code: OverrideCode, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint holds variant {found}, expected {expected}")]
    VariantMismatch { expected: Variant, found: Variant },
    #[error("unknown profile `{0}` (expected full, desk, acceptance or tiny)")]
    UnknownProfile(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Machine-readable reason an edit or override was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideCode {
    UnknownSample,
    UnknownSegment,
    UnknownConcept,
    OutOfRange,
    InvalidEdit,
    NotIntervenable,
}

impl OverrideCode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UnknownSample => "unknown_sample",
            Self::UnknownSegment => "unknown_segment",
            Self::UnknownConcept => "unknown_concept",
            Self::OutOfRange => "out_of_range",
            Self::InvalidEdit => "invalid_edit",
            Self::NotIntervenable => "not_intervenable",
        }
    }
}

impl PipelineError {
    pub fn rejected(code: OverrideCode, message: impl Into<String>) -> Self {
        Self::Override {
            code,
            message: message.into(),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Segmentation bottleneck, property bottleneck and concept interaction.
    Pcbm,
    PcbmNoCi,
    /// Property bottleneck read from the raw image.
    Cbm,
    CbmCi,
    /// Class read directly from the masked stack.
    SegOnly,
    /// Same macro-shape trained end to end without bottleneck supervision.
    Standard,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Pcbm,
        Variant::PcbmNoCi,
        Variant::Cbm,
        Variant::CbmCi,
        Variant::SegOnly,
        Variant::Standard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pcbm => "pcbm",
            Variant::PcbmNoCi => "pcbm-no-ci",
            Variant::Cbm => "cbm",
            Variant::CbmCi => "cbm-ci",
            Variant::SegOnly => "seg-only",
            Variant::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| {
                v.name().eq_ignore_ascii_case(s)
                    || v.name().replace('-', "_").eq_ignore_ascii_case(s)
            })
            .ok_or_else(|| PipelineError::UnknownVariant(s.to_string()))
    }

    pub fn uses_observer(self) -> bool {
        matches!(self, Variant::Pcbm | Variant::PcbmNoCi | Variant::SegOnly)
    }

    pub fn conceiver_input(self) -> Option<ConceiverInput> {
        match self {
            Variant::Pcbm | Variant::PcbmNoCi => Some(ConceiverInput::MaskedStack),
            Variant::Cbm | Variant::CbmCi => Some(ConceiverInput::Image),
            _ => None,
        }
    }

    pub fn interaction(self) -> bool {
        matches!(self, Variant::Pcbm | Variant::CbmCi)
    }

    fn stages(self) -> Vec<(Stage, DataSource)> {
        use DataSource::*;
        match self {
            Variant::Pcbm | Variant::PcbmNoCi => vec![
                (Stage::Observer, ImagesToGroundTruthMasks),
                (Stage::Conceiver, GroundTruthStacksToConcepts),
                (Stage::Predictor, GroundTruthConceptsToLabels),
            ],
            Variant::Cbm | Variant::CbmCi => vec![
                (Stage::Conceiver, ImagesToGroundTruthConcepts),
                (Stage::Predictor, GroundTruthConceptsToLabels),
            ],
            Variant::SegOnly => vec![
                (Stage::Observer, ImagesToGroundTruthMasks),
                (Stage::SegOnly, GroundTruthStacksToLabels),
            ],
            Variant::Standard => vec![(Stage::Standard, ImagesToLabels)],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Observer,
    Conceiver,
    Predictor,
    SegOnly,
    Standard,
}

impl Stage {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::Observer => &["observer."],
            Stage::Conceiver => &["conceiver."],
            Stage::Predictor => &["predictor."],
            Stage::SegOnly => &["segonly."],
            Stage::Standard => &["observer.", "standard."],
        }
    }
}

/// What a stage consumed as input and target during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    ImagesToGroundTruthMasks,
    GroundTruthStacksToConcepts,
    ImagesToGroundTruthConcepts,
    GroundTruthConceptsToLabels,
    GroundTruthStacksToLabels,
    ImagesToLabels,
}

/// Training record of one stage, kept with the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub source: DataSource,
    /// Provenance of masked stacks fed to the stage during training, if any.
    pub stack_provenance: Option<Provenance>,
    pub parameters: Vec<String>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs: usize,
}

impl StageRecord {
    fn from_log(stage: Stage, source: DataSource, log: &TrainLog) -> Self {
        let stack_provenance = matches!(
            source,
            DataSource::GroundTruthStacksToConcepts | DataSource::GroundTruthStacksToLabels
        )
        .then_some(Provenance::GroundTruth);
        Self {
            stage,
            source,
            stack_provenance,
            parameters: log.optimized.clone(),
            best_epoch: log.best_epoch,
            best_val_loss: log.best_val_loss,
            epochs: log.epochs.len(),
        }
    }
}

/// Dataset, architecture and optimization settings for one experiment scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub synth: SynthConfig,
    pub total_samples: usize,
    pub data_seed: u64,
    pub observer: ObserverConfig,
    pub conceiver: ConceiverConfig,
    pub predictor: PredictorConfig,
    pub seg_only: SegOnlyConfig,
    pub standard: StandardConfig,
    /// Area below which a predicted organ counts as absent for rule-based zeroing.
    pub zeroing_pixels: f64,
}

fn merge_table(base: &mut toml::Table, patch: toml::Table, path: &str) -> Result<()> {
    for (k, v) in patch {
        let key = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match (base.get_mut(&k), v) {
            (None, _) => {
                return Err(PipelineError::Config(format!(
                    "unknown profile key `{key}`"
                )))
            }
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_table(b, p, &key)?,
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn scaled_zeroing(height: usize, width: usize) -> f64 {
    5.0 * (height * width) as f64 / (64.0 * 80.0)
}

impl Profile {
    /// Applies a TOML document whose tables mirror this profile's fields, for
    /// example `[predictor.train]\nepochs = 10`. When the canvas changes and
    /// `zeroing_pixels` is not given, the zeroing threshold is rescaled.
    pub fn with_overrides(&self, document: &str) -> Result<Self> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        let patch: toml::Table = toml::from_str(document).map_err(|e| cfg(&e))?;
        let mut base = toml::Table::try_from(self).map_err(|e| cfg(&e))?;
        merge_table(&mut base, patch.clone(), "")?;
        let mut out: Self = toml::Value::Table(base).try_into().map_err(|e| cfg(&e))?;
        if !patch.contains_key("zeroing_pixels") {
            out.zeroing_pixels = scaled_zeroing(out.synth.height, out.synth.width);
        }
        Ok(out)
    }

    /// Full-scale epochs (200/50/50) on the 64x80 canvas.
    pub fn full() -> Self {
        let mut p = Self::desk();
        p.name = "full".into();
        p.observer.train.epochs = 200;
        p.standard.train.epochs = 200;
        p
    }

    /// 64x80 canvas with 30/50/50 epochs.
    pub fn desk() -> Self {
        let synth = SynthConfig::default();
        Self {
            name: "desk".into(),
            zeroing_pixels: scaled_zeroing(synth.height, synth.width),
            synth,
            total_samples: 4000,
            data_seed: 2023,
            observer: ObserverConfig::default(),
            conceiver: ConceiverConfig::default(),
            predictor: PredictorConfig::default(),
            seg_only: SegOnlyConfig::default(),
            standard: StandardConfig {
                train: TrainConfig::new(30, 16),
                ..StandardConfig::default()
            },
        }
    }

    /// 32x40 canvas sized so ten seeds fit a single-core test run.
    pub fn acceptance() -> Self {
        let synth = SynthConfig {
            height: 32,
            width: 40,
            ..SynthConfig::default()
        };
        let encoder = EncoderConfig {
            widths: vec![16, 32, 64],
            pooling: Pooling::Flatten,
        };
        Self {
            name: "acceptance".into(),
            zeroing_pixels: scaled_zeroing(synth.height, synth.width),
            synth,
            total_samples: 4000,
            data_seed: 2023,
            observer: ObserverConfig {
                levels: 3,
                base_width: 8,
                train: TrainConfig::new(10, 8).with_lr(1e-3),
                ..ObserverConfig::default()
            },
            conceiver: ConceiverConfig {
                encoder: encoder.clone(),
                mask_padding: false,
                train: TrainConfig::new(25, 32).with_lr(1e-3),
            },
            predictor: PredictorConfig {
                train: TrainConfig::new(50, 64).with_lr(1e-3),
                ..PredictorConfig::default()
            },
            seg_only: SegOnlyConfig {
                encoder: encoder.clone(),
                train: TrainConfig::new(25, 32).with_lr(1e-3),
            },
            standard: StandardConfig {
                levels: 3,
                base_width: 8,
                encoder,
                hidden: 1024,
                train: TrainConfig::new(10, 16).with_lr(1e-3),
            },
        }
    }

    /// Seconds-scale profile for tests and smoke runs.
    pub fn tiny() -> Self {
        let synth = SynthConfig {
            height: 16,
            width: 20,
            ..SynthConfig::default()
        };
        let encoder = EncoderConfig {
            widths: vec![4, 8],
            pooling: Pooling::GlobalAverage,
        };
        Self {
            name: "tiny".into(),
            zeroing_pixels: scaled_zeroing(synth.height, synth.width),
            synth,
            total_samples: 160,
            data_seed: 7,
            observer: ObserverConfig {
                levels: 2,
                base_width: 4,
                train: TrainConfig::new(2, 16).with_lr(1e-3),
                ..ObserverConfig::default()
            },
            conceiver: ConceiverConfig {
                encoder: encoder.clone(),
                mask_padding: false,
                train: TrainConfig::new(2, 32).with_lr(1e-3),
            },
            predictor: PredictorConfig {
                hidden: 32,
                weight_hidden: vec![12, 12, 12],
                train: TrainConfig::new(3, 32).with_lr(1e-3),
            },
            seg_only: SegOnlyConfig {
                encoder: encoder.clone(),
                train: TrainConfig::new(2, 32).with_lr(1e-3),
            },
            standard: StandardConfig {
                levels: 2,
                base_width: 4,
                encoder,
                hidden: 16,
                train: TrainConfig::new(1, 16).with_lr(1e-3),
            },
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "acceptance" => Ok(Self::acceptance()),
            "tiny" => Ok(Self::tiny()),
            other => Err(PipelineError::UnknownProfile(other.to_string())),
        }
    }

    /// Generates the profile's dataset with its default split.
    pub fn dataset(&self, schema: &ConceptSchema) -> Result<Dataset> {
        let g = GeoScan::new(schema.clone(), self.synth.clone())?;
        Ok(g.generate_dataset(&reference_counts(self.total_samples), self.data_seed)?)
    }

    /// SHA-256 over the canonical JSON of the profile.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("profile serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Redraws the stratified train/val/test split for a resample seed.
pub fn resample_split(data: &mut Dataset, classes: usize, seed: u64) {
    data.splits = stratified_split(&data.labels(), classes, derive_seed(seed, 0x5011, 0));
}

/// Trained stage networks shared between variants of one seed.
#[derive(Debug, Clone, Default)]
pub struct Components {
    pub observer: Option<(Observer, TrainLog)>,
    pub conceiver_stack: Option<(Conceiver, TrainLog)>,
    pub conceiver_image: Option<(Conceiver, TrainLog)>,
    pub predictor_ci: Option<(Predictor, TrainLog)>,
    pub predictor_plain: Option<(Predictor, TrainLog)>,
    pub seg_only: Option<(SegOnlyClassifier, TrainLog)>,
    pub standard: Option<(StandardModel, TrainLog)>,
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    derive_seed(seed, 0x57a9e, stage)
}

/// Trains every component the listed variants need, each independently on
/// ground-truth inputs of the dataset's current split.
pub fn train_components(
    profile: &Profile,
    schema: &ConceptSchema,
    data: &Dataset,
    variants: &[Variant],
    seed: u64,
) -> Result<Components> {
    let (train, val) = (&data.splits.train, &data.splits.val);
    let n = schema.n();
    let k = schema.num_classes();
    let needs = |f: &dyn Fn(Variant) -> bool| variants.iter().any(|&v| f(v));
    let mut c = Components::default();
    if needs(&|v| v.uses_observer()) {
        c.observer = Some(train_observer(
            data,
            train,
            val,
            n,
            &profile.observer,
            stage_seed(seed, 1),
        )?);
    }
    if needs(&|v| v.conceiver_input() == Some(ConceiverInput::MaskedStack)) {
        c.conceiver_stack = Some(train_conceiver(
            schema,
            data,
            train,
            val,
            ConceiverInput::MaskedStack,
            &profile.conceiver,
            stage_seed(seed, 2),
        )?);
    }
    if needs(&|v| v.conceiver_input() == Some(ConceiverInput::Image)) {
        c.conceiver_image = Some(train_conceiver(
            schema,
            data,
            train,
            val,
            ConceiverInput::Image,
            &profile.conceiver,
            stage_seed(seed, 3),
        )?);
    }
    let needs_predictor =
        |ci: bool| needs(&|v| v.conceiver_input().is_some() && v.interaction() == ci);
    if needs_predictor(true) || needs_predictor(false) {
        let all: Vec<usize> = (0..data.samples.len()).collect();
        let (targets, _) = concept_targets(schema, data, &all);
        let labels = data.labels();
        let what = "ground-truth concepts -> labels";
        if needs_predictor(true) {
            let binary = Some(schema.binary_indices().to_vec());
            c.predictor_ci = Some(train_predictor(
                &targets,
                &labels,
                k,
                train,
                val,
                binary,
                &profile.predictor,
                stage_seed(seed, 4),
                what,
            )?);
        }
        if needs_predictor(false) {
            c.predictor_plain = Some(train_predictor(
                &targets,
                &labels,
                k,
                train,
                val,
                None,
                &profile.predictor,
                stage_seed(seed, 5),
                what,
            )?);
        }
    }
    if needs(&|v| v == Variant::SegOnly) {
        c.seg_only = Some(train_seg_only(
            data,
            train,
            val,
            n,
            k,
            &profile.seg_only,
            stage_seed(seed, 6),
        )?);
    }
    if needs(&|v| v == Variant::Standard) {
        c.standard = Some(train_standard(
            data,
            train,
            val,
            n,
            schema.d(),
            k,
            &profile.standard,
            stage_seed(seed, 7),
        )?);
    }
    Ok(c)
}

/// Trained model of one variant with its training provenance.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub variant: Variant,
    pub schema: ConceptSchema,
    pub profile: Profile,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub observer: Option<Observer>,
    pub conceiver: Option<Conceiver>,
    pub predictor: Option<Predictor>,
    pub seg_only: Option<SegOnlyClassifier>,
    pub standard: Option<StandardModel>,
    pub stages: Vec<StageRecord>,
}

fn take<T: Clone>(
    slot: &Option<(T, TrainLog)>,
    variant: Variant,
    component: &'static str,
) -> Result<(T, TrainLog)> {
    slot.clone()
        .ok_or(PipelineError::MissingComponent { variant, component })
}

/// Builds a variant's bundle from shared components and audits it.
pub fn assemble(
    variant: Variant,
    components: &Components,
    profile: &Profile,
    schema: &ConceptSchema,
    data: &Dataset,
    seed: u64,
) -> Result<ModelBundle> {
    let mut b = ModelBundle {
        variant,
        schema: schema.clone(),
        profile: profile.clone(),
        seed,
        height: data.height,
        width: data.width,
        channels: data.channels,
        observer: None,
        conceiver: None,
        predictor: None,
        seg_only: None,
        standard: None,
        stages: Vec::new(),
    };
    for (stage, source) in variant.stages() {
        let log = match stage {
            Stage::Observer => {
                let (m, log) = take(&components.observer, variant, "observer")?;
                b.observer = Some(m);
                log
            }
            Stage::Conceiver => {
                let slot = if variant.conceiver_input() == Some(ConceiverInput::MaskedStack) {
                    &components.conceiver_stack
                } else {
                    &components.conceiver_image
                };
                let (m, log) = take(slot, variant, "conceiver")?;
                b.conceiver = Some(m);
                log
            }
            Stage::Predictor => {
                let slot = if variant.interaction() {
                    &components.predictor_ci
                } else {
                    &components.predictor_plain
                };
                let (m, log) = take(slot, variant, "predictor")?;
                b.predictor = Some(m);
                log
            }
            Stage::SegOnly => {
                let (m, log) = take(&components.seg_only, variant, "seg-only classifier")?;
                b.seg_only = Some(m);
                log
            }
            Stage::Standard => {
                let (m, log) = take(&components.standard, variant, "end-to-end model")?;
                b.standard = Some(m);
                log
            }
        };
        b.stages.push(StageRecord::from_log(stage, source, &log));
    }
    audit(&b)?;
    Ok(b)
}

/// Trains one variant from scratch on the dataset's current split.
pub fn train_all(
    profile: &Profile,
    schema: &ConceptSchema,
    data: &Dataset,
    variant: Variant,
    seed: u64,
) -> Result<ModelBundle> {
    let c = train_components(profile, schema, data, &[variant], seed)?;
    assemble(variant, &c, profile, schema, data, seed)
}

/// Leakage guard and train-side provenance check: every stage trained on the
/// variant's expected ground-truth source, each optimizer run touched only its
/// own stage's parameters, and no parameter is shared between runs.
pub fn audit(bundle: &ModelBundle) -> Result<()> {
    audit_stages(bundle.variant, &bundle.stages)
}

/// [`audit`] over bare stage records.
pub fn audit_stages(variant: Variant, stages: &[StageRecord]) -> Result<()> {
    let expected = variant.stages();
    if stages.len() != expected.len() {
        return Err(PipelineError::Leakage(format!(
            "{variant} expects {} stages, bundle records {}",
            expected.len(),
            stages.len()
        )));
    }
    let mut seen: BTreeMap<&str, Stage> = BTreeMap::new();
    for (rec, (stage, source)) in stages.iter().zip(expected) {
        if rec.stage != stage || rec.source != source {
            return Err(PipelineError::Leakage(format!(
                "{variant}: stage {:?} trained on {:?}, expected {:?} on {:?}",
                rec.stage, rec.source, stage, source
            )));
        }
        if rec
            .stack_provenance
            .is_some_and(|p| p != Provenance::GroundTruth)
        {
            return Err(PipelineError::Provenance(format!(
                "{:?} trained on {:?} stacks",
                rec.stage, rec.stack_provenance
            )));
        }
        for p in &rec.parameters {
            if !stage.prefixes().iter().any(|pre| p.starts_with(pre)) {
                return Err(PipelineError::Leakage(format!(
                    "{:?} optimizer updated foreign parameter {p}",
                    rec.stage
                )));
            }
            if let Some(other) = seen.insert(p, rec.stage) {
                return Err(PipelineError::Leakage(format!(
                    "parameter {p} optimized by both {other:?} and {:?}",
                    rec.stage
                )));
            }
        }
    }
    Ok(())
}

/// Replacement for one segmentation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum MaskOverride {
    /// The ground-truth indicator of the class.
    GroundTruth,
    /// A user-supplied probability plane, `h*w` values in [0, 1].
    Layer(Vec<f64>),
    /// All zeros.
    Clear,
}

/// Values substituted into the chain before downstream stages run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    /// Keyed by segmentation index.
    #[serde(default)]
    pub masks: BTreeMap<usize, MaskOverride>,
    /// Keyed by concept index.
    #[serde(default)]
    pub concepts: BTreeMap<usize, f64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.masks.is_empty() && self.concepts.is_empty()
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub segmentation: Option<SegmentationMap>,
    pub stack: Option<MaskedStack>,
    pub concepts: Option<Vec<f64>>,
    pub output: ClassOutput,
    pub class: usize,
}

fn stack_tensors<'a>(stacks: &[&'a MaskedStack]) -> Vec<&'a Tensor> {
    stacks.iter().map(|s| &s.data).collect()
}

impl ModelBundle {
    fn need<'a, T>(&self, slot: &'a Option<T>, component: &'static str) -> Result<&'a T> {
        slot.as_ref().ok_or(PipelineError::MissingComponent {
            variant: self.variant,
            component,
        })
    }

    /// Observer maps for images `[channels, h, w]`.
    pub fn segment(&self, images: &[&Tensor]) -> Result<Vec<SegmentationMap>> {
        let obs = self.need(&self.observer, "observer")?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            out.extend(obs.predict(chunk)?);
        }
        Ok(out)
    }

    /// Concepts `[b, d]` from test-time stacks. Ground-truth stacks are refused;
    /// substituted masks must arrive marked as edited.
    pub fn concepts_from_stacks(&self, stacks: &[&MaskedStack]) -> Result<Tensor> {
        let c = self.need(&self.conceiver, "conceiver")?;
        if c.input != ConceiverInput::MaskedStack {
            return Err(PipelineError::MissingComponent {
                variant: self.variant,
                component: "stack conceiver",
            });
        }
        if let Some(s) = stacks
            .iter()
            .find(|s| s.provenance == Provenance::GroundTruth)
        {
            return Err(PipelineError::Provenance(format!(
                "test-time conceiver received a {:?} stack",
                s.provenance
            )));
        }
        self.batched_concepts(c, &stack_tensors(stacks))
    }

    /// Concepts `[b, d]` read from raw images.
    pub fn concepts_from_images(&self, images: &[&Tensor]) -> Result<Tensor> {
        let c = self.need(&self.conceiver, "conceiver")?;
        if c.input != ConceiverInput::Image {
            return Err(PipelineError::MissingComponent {
                variant: self.variant,
                component: "image conceiver",
            });
        }
        self.batched_concepts(c, images)
    }

    fn batched_concepts(&self, c: &Conceiver, inputs: &[&Tensor]) -> Result<Tensor> {
        let d = self.schema.d();
        let mut data = Vec::with_capacity(inputs.len() * d);
        for chunk in inputs.chunks(CHUNK) {
            data.extend_from_slice(c.predict(&Tensor::stack(chunk))?.data());
        }
        Ok(Tensor::new(vec![inputs.len(), d], data))
    }

    /// Class outputs for concept rows `[b, d]`.
    pub fn classify(&self, concepts: &Tensor) -> Result<Vec<ClassOutput>> {
        Ok(self.need(&self.predictor, "predictor")?.predict(concepts)?)
    }

    fn classify_stacks(&self, stacks: &[&MaskedStack]) -> Result<Vec<ClassOutput>> {
        let m = self.need(&self.seg_only, "seg-only classifier")?;
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(CHUNK) {
            out.extend(m.predict_stacks(chunk)?);
        }
        Ok(out)
    }

    fn classify_images(&self, images: &[&Tensor]) -> Result<Vec<ClassOutput>> {
        let m = self.need(&self.standard, "end-to-end model")?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            out.extend(m.predict(chunk)?);
        }
        Ok(out)
    }

    fn apply_mask_overrides(
        &self,
        map: &mut SegmentationMap,
        gt: Option<&[u8]>,
        ov: &Overrides,
    ) -> Result<()> {
        if ov.masks.is_empty() {
            return Ok(());
        }
        let plane = map.height() * map.width();
        let n = map.classes();
        for (&k, o) in &ov.masks {
            if k >= n {
                return Err(PipelineError::rejected(
                    OverrideCode::UnknownSegment,
                    format!("segmentation index {k} out of range 0..{n}"),
                ));
            }
            let layer: Vec<f64> = match o {
                MaskOverride::GroundTruth => {
                    let gt = gt.ok_or_else(|| {
                        PipelineError::rejected(
                            OverrideCode::InvalidEdit,
                            "no ground-truth mask for this image",
                        )
                    })?;
                    if gt.len() != plane {
                        return Err(PipelineError::rejected(
                            OverrideCode::InvalidEdit,
                            format!("mask has {} pixels, expected {plane}", gt.len()),
                        ));
                    }
                    gt.iter()
                        .map(|&l| f64::from(u8::from(l as usize == k)))
                        .collect()
                }
                MaskOverride::Layer(v) => {
                    if v.len() != plane {
                        return Err(PipelineError::rejected(
                            OverrideCode::InvalidEdit,
                            format!("layer {k} has {} values, expected {plane}", v.len()),
                        ));
                    }
                    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                        return Err(PipelineError::rejected(
                            OverrideCode::OutOfRange,
                            format!("layer {k} value {bad} outside [0, 1]"),
                        ));
                    }
                    v.clone()
                }
                MaskOverride::Clear => vec![0.0; plane],
            };
            let mut data = map.probs.data().to_vec();
            data[k * plane..(k + 1) * plane].copy_from_slice(&layer);
            map.probs = Tensor::new(map.probs.shape().to_vec(), data);
        }
        map.provenance = Provenance::Edited;
        Ok(())
    }

    /// Rejects concept overrides outside the schema or [0, 1].
    pub fn check_concept_overrides(&self, ov: &Overrides) -> Result<()> {
        let d = self.schema.d();
        for (&i, &v) in &ov.concepts {
            if i >= d {
                return Err(PipelineError::rejected(
                    OverrideCode::UnknownConcept,
                    format!("concept index {i} out of range 0..{d}"),
                ));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::rejected(
                    OverrideCode::OutOfRange,
                    format!(
                        "concept {} value {v} outside [0, 1]",
                        self.schema.concepts[i].name
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Full-chain forward pass of one image with optional substitutions.
    /// `ground_truth_mask` is needed only for ground-truth layer overrides.
    pub fn infer(
        &self,
        image: &Tensor,
        ground_truth_mask: Option<&[u8]>,
        overrides: &Overrides,
    ) -> Result<Inference> {
        let s = image.shape();
        if s != [self.channels, self.height, self.width] {
            return Err(PipelineError::Numerics(NumericsError::ShapeMismatch {
                kind: "infer",
                detail: format!(
                    "image {s:?} for a {}x{}x{} model",
                    self.channels, self.height, self.width
                ),
            }));
        }
        if !overrides.masks.is_empty() && !self.variant.uses_observer() {
            return Err(PipelineError::rejected(
                OverrideCode::NotIntervenable,
                format!("{} has no segmentation bottleneck", self.variant),
            ));
        }
        if !overrides.concepts.is_empty() && self.conceiver.is_none() {
            return Err(PipelineError::rejected(
                OverrideCode::NotIntervenable,
                format!("{} has no property bottleneck", self.variant),
            ));
        }
        self.check_concept_overrides(overrides)?;
        let (segmentation, stack) = if self.variant.uses_observer() {
            let mut map = self.segment(&[image])?.remove(0);
            self.apply_mask_overrides(&mut map, ground_truth_mask, overrides)?;
            let stack = soft_mask(&map, image)?;
            (Some(map), Some(stack))
        } else {
            (None, None)
        };
        let (concepts, output) = match self.variant {
            Variant::SegOnly => (
                None,
                self.classify_stacks(&[stack.as_ref().expect("observer ran")])?
                    .remove(0),
            ),
            Variant::Standard => (None, self.classify_images(&[image])?.remove(0)),
            _ => {
                let mut c = match &stack {
                    Some(st) => self.concepts_from_stacks(&[st])?,
                    None => self.concepts_from_images(&[image])?,
                };
                let mut row = c.data().to_vec();
                for (&i, &v) in &overrides.concepts {
                    row[i] = v;
                }
                c = Tensor::new(vec![1, row.len()], row.clone());
                (Some(row), self.classify(&c)?.remove(0))
            }
        };
        let class = output.class();
        Ok(Inference {
            segmentation,
            stack,
            concepts,
            output,
            class,
        })
    }

    /// Hash of every parameter of every component.
    pub fn parameter_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in self.stores() {
            h.update(s.fingerprint().as_bytes());
        }
        hex(&h.finalize())
    }

    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = Vec::new();
        if let Some(m) = &self.observer {
            v.push(&m.store);
        }
        if let Some(m) = &self.conceiver {
            v.push(&m.store);
        }
        if let Some(m) = &self.predictor {
            v.push(&m.store);
        }
        if let Some(m) = &self.seg_only {
            v.push(&m.store);
        }
        if let Some(m) = &self.standard {
            v.push(&m.store);
        }
        v
    }
}

/// Batched chain outputs for dataset items.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    /// Argmax observer labels, when the variant segments.
    pub labels: Option<Vec<Vec<u8>>>,
    pub concepts: Option<Tensor>,
    pub outputs: Vec<ClassOutput>,
}

impl ChainOutput {
    pub fn classes(&self) -> Vec<usize> {
        self.outputs.iter().map(ClassOutput::class).collect()
    }
}

/// Runs the variant's chain over `ids` without overrides.
pub fn run_chain(bundle: &ModelBundle, data: &Dataset, ids: &[usize]) -> Result<ChainOutput> {
    let d = bundle.schema.d();
    let mut labels = bundle.variant.uses_observer().then(Vec::new);
    let mut concepts = bundle.conceiver.is_some().then(Vec::new);
    let mut outputs = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|&i| &data.samples[i].image).collect();
        let stacks = if bundle.variant.uses_observer() {
            let maps = bundle.segment(&images)?;
            if let Some(l) = labels.as_mut() {
                l.extend(maps.iter().map(SegmentationMap::argmax));
            }
            maps.iter()
                .zip(&images)
                .map(|(m, x)| soft_mask(m, x))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let refs: Vec<&MaskedStack> = stacks.iter().collect();
        match bundle.variant {
            Variant::SegOnly => outputs.extend(bundle.classify_stacks(&refs)?),
            Variant::Standard => outputs.extend(bundle.classify_images(&images)?),
            _ => {
                let c = if bundle.variant.uses_observer() {
                    bundle.concepts_from_stacks(&refs)?
                } else {
                    bundle.concepts_from_images(&images)?
                };
                outputs.extend(bundle.classify(&c)?);
                concepts
                    .as_mut()
                    .expect("conceiver present")
                    .extend_from_slice(c.data());
            }
        }
    }
    Ok(ChainOutput {
        labels,
        concepts: concepts.map(|c| Tensor::new(vec![ids.len(), d], c)),
        outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub mean_foreground_iou: f64,
    pub per_class: Vec<Option<f64>>,
}

impl SegmentationReport {
    pub fn from_accumulator(acc: &IouAccumulator) -> Self {
        Self {
            mean_foreground_iou: acc.mean_foreground(),
            per_class: acc.per_class(),
        }
    }
}

/// Metrics of one variant on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub samples: usize,
    pub classification: ClassificationMetrics,
    pub concepts: Option<ConceptMetrics>,
    pub segmentation: Option<SegmentationReport>,
}

/// Smoothed targets and applicability for concept metrics.
pub fn concept_truth(schema: &ConceptSchema, data: &Dataset, ids: &[usize]) -> (Tensor, Vec<bool>) {
    let (t, m) = concept_targets(schema, data, ids);
    (t, m.data().iter().map(|&v| v > 0.5).collect())
}

/// Metrics of precomputed chain outputs.
pub fn report_chain(
    bundle: &ModelBundle,
    data: &Dataset,
    ids: &[usize],
    out: &ChainOutput,
) -> EvalReport {
    let schema = &bundle.schema;
    let truth: Vec<usize> = ids.iter().map(|&i| data.samples[i].label).collect();
    let concepts = out.concepts.as_ref().map(|c| {
        let (t, app) = concept_truth(schema, data, ids);
        concept_metrics(c.data(), t.data(), &app, schema)
    });
    let segmentation = out.labels.as_ref().map(|labels| {
        let mut acc = IouAccumulator::new(schema.n());
        for (l, &i) in labels.iter().zip(ids) {
            acc.add(l, &data.samples[i].mask);
        }
        SegmentationReport::from_accumulator(&acc)
    });
    EvalReport {
        variant: bundle.variant,
        samples: ids.len(),
        classification: classification_metrics(&out.classes(), &truth, schema),
        concepts,
        segmentation,
    }
}

pub fn evaluate_bundle(bundle: &ModelBundle, data: &Dataset, ids: &[usize]) -> Result<EvalReport> {
    let out = run_chain(bundle, data, ids)?;
    Ok(report_chain(bundle, data, ids, &out))
}

/// Flat metric name -> value view of a report, for aggregation.
pub fn flatten_report(r: &EvalReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("oa".to_string(), r.classification.oa);
    m.insert("ma".to_string(), r.classification.ma);
    m.insert("mcc".to_string(), r.classification.mcc);
    for a in &r.classification.per_anatomy {
        if let Some(v) = a.sensitivity {
            m.insert(format!("sensitivity.{}", a.anatomy), v);
        }
        if let Some(v) = a.specificity {
            m.insert(format!("specificity.{}", a.anatomy), v);
        }
    }
    if let Some(c) = &r.concepts {
        m.insert("coa".to_string(), c.coa);
        m.insert("rmse".to_string(), c.rmse);
        m.insert("rmse_applicable".to_string(), c.rmse_applicable);
    }
    if let Some(s) = &r.segmentation {
        m.insert("iou".to_string(), s.mean_foreground_iou);
    }
    m
}

/// Mean and standard deviation of every metric present in all reports.
pub fn summarize(reports: &[EvalReport]) -> BTreeMap<String, MeanStd> {
    let flat: Vec<BTreeMap<String, f64>> = reports.iter().map(flatten_report).collect();
    let Some(first) = flat.first() else {
        return BTreeMap::new();
    };
    first
        .keys()
        .filter(|k| flat.iter().all(|f| f.contains_key(*k)))
        .map(|k| {
            let v: Vec<f64> = flat.iter().map(|f| f[k]).collect();
            (k.clone(), mean_std(&v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleReport {
    pub variant: Variant,
    pub profile: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalReport>,
    pub summary: BTreeMap<String, MeanStd>,
}

/// Trains and evaluates one variant on the test split of each resample seed.
pub fn evaluate(
    profile: &Profile,
    schema: &ConceptSchema,
    variant: Variant,
    seeds: &[u64],
) -> Result<ResampleReport> {
    let mut data = profile.dataset(schema)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        resample_split(&mut data, schema.num_classes(), seed);
        let bundle = train_all(profile, schema, &data, variant, seed)?;
        per_seed.push(evaluate_bundle(&bundle, &data, &data.splits.test)?);
    }
    Ok(ResampleReport {
        variant,
        profile: profile.name.clone(),
        seeds: seeds.to_vec(),
        summary: summarize(&per_seed),
        per_seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleHeader {
    variant: Variant,
    schema_source: String,
    profile: Profile,
    seed: u64,
    height: usize,
    width: usize,
    channels: usize,
    stages: Vec<StageRecord>,
    components: Vec<String>,
}

/// Writes `magic, version, header length, JSON header, tensor blocks`.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut components = Vec::new();
    let mut blocks = Vec::new();
    for (name, store) in [
        ("observer", bundle.observer.as_ref().map(|m| &m.store)),
        ("conceiver", bundle.conceiver.as_ref().map(|m| &m.store)),
        ("predictor", bundle.predictor.as_ref().map(|m| &m.store)),
        ("seg_only", bundle.seg_only.as_ref().map(|m| &m.store)),
        ("standard", bundle.standard.as_ref().map(|m| &m.store)),
    ] {
        if let Some(s) = store {
            components.push(name.to_string());
            let mut buf = Vec::new();
            write_store(s, &mut buf)?;
            blocks.push(buf);
        }
    }
    let header = BundleHeader {
        variant: bundle.variant,
        schema_source: bundle.schema.source().to_string(),
        profile: bundle.profile.clone(),
        seed: bundle.seed,
        height: bundle.height,
        width: bundle.width,
        channels: bundle.channels,
        stages: bundle.stages.clone(),
        components,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.write_all(BUNDLE_MAGIC)?;
    out.write_all(&BUNDLE_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for b in blocks {
        out.write_all(&b)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a bundle; with `expected` set, a bundle of another variant is refused.
/// Nothing is returned unless every block parses and matches its architecture.
pub fn load_bundle(path: &Path, expected: Option<Variant>) -> Result<ModelBundle> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let ck = |m: &str| PipelineError::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ck("truncated header"))?;
    if &magic != BUNDLE_MAGIC {
        return Err(ck("not a model bundle"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|_| ck("truncated header"))?;
    let version = u32::from_le_bytes(v4);
    if version != BUNDLE_VERSION {
        return Err(PipelineError::Checkpoint(format!(
            "bundle version {version}, this build reads {BUNDLE_VERSION}"
        )));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8).map_err(|_| ck("truncated header"))?;
    let len = u64::from_le_bytes(v8) as usize;
    if len > bytes.len() {
        return Err(ck("truncated header"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| ck("truncated header"))?;
    let h: BundleHeader = serde_json::from_slice(&json)?;
    if let Some(e) = expected {
        if e != h.variant {
            return Err(PipelineError::VariantMismatch {
                expected: e,
                found: h.variant,
            });
        }
    }
    let schema = load_schema(&h.schema_source)?;
    let p = &h.profile;
    let (ch, ht, wd) = (h.channels, h.height, h.width);
    let (n, d, k) = (schema.n(), schema.d(), schema.num_classes());
    let mut b = ModelBundle {
        variant: h.variant,
        schema: schema.clone(),
        profile: p.clone(),
        seed: h.seed,
        height: ht,
        width: wd,
        channels: ch,
        observer: None,
        conceiver: None,
        predictor: None,
        seg_only: None,
        standard: None,
        stages: h.stages.clone(),
    };
    for name in &h.components {
        let stored = read_store(&mut r)
            .map_err(|e| PipelineError::Checkpoint(format!("{name} block: {e}")))?;
        match name.as_str() {
            "observer" => {
                let mut m = Observer::new(ch, n, p.observer.levels, p.observer.base_width, 0);
                m.store.load_from(&stored)?;
                b.observer = Some(m);
            }
            "conceiver" => {
                let input = h
                    .variant
                    .conceiver_input()
                    .ok_or_else(|| ck("conceiver block in a variant without one"))?;
                let mut m = Conceiver::new(&schema, input, ch, ht, wd, &p.conceiver.encoder, 0);
                m.store.load_from(&stored)?;
                b.conceiver = Some(m);
            }
            "predictor" => {
                let binary = h
                    .variant
                    .interaction()
                    .then(|| schema.binary_indices().to_vec());
                let mut m = Predictor::new(d, k, binary, &p.predictor, 0);
                m.store.load_from(&stored)?;
                b.predictor = Some(m);
            }
            "seg_only" => {
                let mut m = SegOnlyClassifier::new(n * ch, ht, wd, k, &p.seg_only.encoder, 0);
                m.store.load_from(&stored)?;
                b.seg_only = Some(m);
            }
            "standard" => {
                let mut m = StandardModel::new(ch, ht, wd, n, d, k, &p.standard, 0);
                m.store.load_from(&stored)?;
                b.standard = Some(m);
            }
            other => {
                return Err(PipelineError::Checkpoint(format!(
                    "unknown component {other}"
                )))
            }
        }
    }
    if (r.position() as usize) != bytes.len() {
        return Err(ck("trailing bytes after last block"));
    }
    audit(&b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_wiring() {
        assert_eq!(Variant::parse("PCBM-no-CI").unwrap(), Variant::PcbmNoCi);
        assert_eq!(Variant::parse("seg_only").unwrap(), Variant::SegOnly);
        assert!(Variant::parse("resnet").is_err());
        assert_eq!(Variant::Cbm.conceiver_input(), Some(ConceiverInput::Image));
        assert!(Variant::SegOnly.conceiver_input().is_none());
        assert!(Variant::Pcbm.interaction() && !Variant::PcbmNoCi.interaction());
    }

    #[test]
    fn profiles_round_trip_and_scale_zeroing() {
        for name in ["full", "desk", "acceptance", "tiny"] {
            let p = Profile::by_name(name).unwrap();
            let back: Profile = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            assert_eq!(back, p);
        }
        assert_eq!(Profile::desk().zeroing_pixels, 5.0);
        assert_eq!(Profile::acceptance().zeroing_pixels, 1.25);
        assert_eq!(Profile::full().observer.train.epochs, 200);
        assert!(Profile::by_name("huge").is_err());
    }
}
