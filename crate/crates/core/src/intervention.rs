//! Test-time intervention: editable sessions over one sample, segmentation and
//! property substitution with ground truth, greedy intervention curves,
//! rule-based visibility zeroing, organ ablation and the concept-only
//! faithfulness test.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conceiver::concept_targets;
use crate::metrics::{
    classification_metrics, mean_std, ClassificationMetrics, ConceptMetrics, MeanStd,
};
use crate::numerics::Tensor;
use crate::observer::{soft_mask, MaskedStack, Provenance, SegmentationMap};
use crate::pipeline::{
    concept_truth, report_chain, run_chain, ChainOutput, EvalReport, Inference, MaskOverride,
    ModelBundle, OverrideCode, Overrides, PipelineError, Result, Variant,
};
use crate::predictor::{rows, train_predictor, ClassOutput, PredictorConfig};
use crate::schema::{ConceptKind, ConceptSchema, Measure};
use crate::synth::{Dataset, GeoScan, Sample};

/// One user correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Edit {
    /// Replace a segmentation layer.
    Mask { segment: String, source: MaskSource },
    /// Set a property concept to a value in [0, 1].
    Concept { concept: String, value: f64 },
    /// Set a property concept to its (smoothed) ground truth.
    ConceptGroundTruth { concept: String },
    /// Drop overrides: one segment, one concept, or everything when both are absent.
    Clear {
        #[serde(default)]
        segment: Option<String>,
        #[serde(default)]
        concept: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    /// Row-major `h*w` probabilities in [0, 1].
    Layer {
        values: Vec<f64>,
    },
    Clear,
}

/// Which stages an edit forced to rerun.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recomputed {
    ConceiverAndPredictor,
    Predictor,
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: usize,
    pub edit: Edit,
    pub recomputed: Recomputed,
    pub class_before: String,
    pub class_after: String,
}

/// Overlay of user corrections on one sample's predictions. The bundle is only
/// ever read.
#[derive(Debug, Clone)]
pub struct InterventionSession {
    pub sample_id: usize,
    pub base: Inference,
    pub current: Inference,
    pub overrides: Overrides,
    pub audit: Vec<AuditEntry>,
}

fn intervenable(bundle: &ModelBundle) -> Result<()> {
    if bundle.conceiver.is_none() {
        return Err(PipelineError::rejected(
            OverrideCode::NotIntervenable,
            format!(
                "{} has no property bottleneck to intervene on",
                bundle.variant
            ),
        ));
    }
    Ok(())
}

fn sample(data: &Dataset, id: usize) -> Result<&Sample> {
    data.samples.get(id).ok_or_else(|| {
        PipelineError::rejected(OverrideCode::UnknownSample, format!("unknown sample {id}"))
    })
}

/// Smoothed ground-truth value of one concept for one sample.
pub fn ground_truth_concept(
    schema: &ConceptSchema,
    data: &Dataset,
    id: usize,
    concept: usize,
) -> f64 {
    let (t, _) = concept_targets(schema, data, &[id]);
    t.data()[concept]
}

impl InterventionSession {
    pub fn open(bundle: &ModelBundle, data: &Dataset, sample_id: usize) -> Result<Self> {
        intervenable(bundle)?;
        let s = sample(data, sample_id)?;
        let base = bundle.infer(&s.image, Some(&s.mask), &Overrides::default())?;
        Ok(Self {
            sample_id,
            current: base.clone(),
            base,
            overrides: Overrides::default(),
            audit: Vec::new(),
        })
    }

    fn segment_index(schema: &ConceptSchema, name: &str) -> Result<usize> {
        schema.segmentation_index(name).ok_or_else(|| {
            PipelineError::rejected(
                OverrideCode::UnknownSegment,
                format!("unknown segmentation concept `{name}`"),
            )
        })
    }

    fn concept_index(schema: &ConceptSchema, name: &str) -> Result<usize> {
        schema.concept_index(name).ok_or_else(|| {
            PipelineError::rejected(
                OverrideCode::UnknownConcept,
                format!("unknown property concept `{name}`"),
            )
        })
    }

    /// Validates and applies an edit, reruns the downstream stages and appends
    /// to the audit log. A rejected edit leaves the session unchanged.
    pub fn apply(
        &mut self,
        bundle: &ModelBundle,
        data: &Dataset,
        edit: Edit,
    ) -> Result<&Inference> {
        let schema = &bundle.schema;
        let s = sample(data, self.sample_id)?;
        let mut next = self.overrides.clone();
        match &edit {
            Edit::Mask { segment, source } => {
                if !bundle.variant.uses_observer() {
                    return Err(PipelineError::rejected(
                        OverrideCode::NotIntervenable,
                        format!("{} has no segmentation bottleneck", bundle.variant),
                    ));
                }
                let k = Self::segment_index(schema, segment)?;
                let o = match source {
                    MaskSource::GroundTruth => MaskOverride::GroundTruth,
                    MaskSource::Layer { values } => MaskOverride::Layer(values.clone()),
                    MaskSource::Clear => MaskOverride::Clear,
                };
                next.masks.insert(k, o);
            }
            Edit::Concept { concept, value } => {
                next.concepts
                    .insert(Self::concept_index(schema, concept)?, *value);
            }
            Edit::ConceptGroundTruth { concept } => {
                let i = Self::concept_index(schema, concept)?;
                next.concepts
                    .insert(i, ground_truth_concept(schema, data, self.sample_id, i));
            }
            Edit::Clear { segment, concept } => {
                if segment.is_none() && concept.is_none() {
                    next = Overrides::default();
                }
                if let Some(seg) = segment {
                    next.masks.remove(&Self::segment_index(schema, seg)?);
                }
                if let Some(c) = concept {
                    next.concepts.remove(&Self::concept_index(schema, c)?);
                }
            }
        }
        let recomputed = if next.masks != self.overrides.masks {
            Recomputed::ConceiverAndPredictor
        } else if next.concepts != self.overrides.concepts {
            Recomputed::Predictor
        } else {
            Recomputed::Nothing
        };
        let current = match recomputed {
            Recomputed::Nothing => self.current.clone(),
            Recomputed::Predictor => {
                bundle.check_concept_overrides(&next)?;
                let mut c = self.current.clone();
                let mut row = self.masked_concepts(bundle, data)?;
                for (&i, &v) in &next.concepts {
                    row[i] = v;
                }
                let t = Tensor::new(vec![1, row.len()], row.clone());
                c.output = bundle.classify(&t)?.remove(0);
                c.class = c.output.class();
                c.concepts = Some(row);
                c
            }
            Recomputed::ConceiverAndPredictor => bundle.infer(&s.image, Some(&s.mask), &next)?,
        };
        let names = schema.class_names();
        self.audit.push(AuditEntry {
            seq: self.audit.len(),
            edit,
            recomputed,
            class_before: names[self.current.class].clone(),
            class_after: names[current.class].clone(),
        });
        self.current = current;
        self.overrides = next;
        Ok(&self.current)
    }

    /// Conceiver output under the current mask overrides, before concept overrides.
    fn masked_concepts(&self, bundle: &ModelBundle, data: &Dataset) -> Result<Vec<f64>> {
        if self.overrides.masks.is_empty() {
            return Ok(self.base.concepts.clone().expect("conceiver present"));
        }
        let s = sample(data, self.sample_id)?;
        let only_masks = Overrides {
            masks: self.overrides.masks.clone(),
            concepts: BTreeMap::new(),
        };
        Ok(bundle
            .infer(&s.image, Some(&s.mask), &only_masks)?
            .concepts
            .expect("conceiver present"))
    }
}

/// Client-facing view of an inference, with names from the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub sample_id: usize,
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    /// Row-major grayscale image.
    pub image: Vec<f64>,
    pub mask_provenance: Option<Provenance>,
    pub segments: Vec<SegmentView>,
    pub concepts: Vec<ConceptView>,
    /// Interaction weight per binary concept.
    pub omega: Option<Vec<WeightView>>,
    pub interaction: Option<f64>,
    pub classes: Vec<ClassView>,
    pub predicted_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub name: String,
    /// Row-major `h*w` probabilities.
    pub probabilities: Vec<f64>,
    /// Pixels where this layer wins the argmax.
    pub area: usize,
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub index: usize,
    pub name: String,
    pub kind: ConceptKind,
    pub anatomy: String,
    pub value: f64,
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightView {
    pub concept: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassView {
    pub name: String,
    pub probability: f64,
}

pub fn payload(
    bundle: &ModelBundle,
    data: &Dataset,
    sample_id: usize,
    inf: &Inference,
    ov: &Overrides,
) -> Result<Payload> {
    let schema = &bundle.schema;
    let s = sample(data, sample_id)?;
    let segments = inf
        .segmentation
        .as_ref()
        .map(|m| {
            let arg = m.argmax();
            (0..m.classes())
                .map(|k| SegmentView {
                    name: schema.segmentation[k].clone(),
                    probabilities: m.channel(k).to_vec(),
                    area: arg.iter().filter(|&&l| l as usize == k).count(),
                    overridden: ov.masks.contains_key(&k),
                })
                .collect()
        })
        .unwrap_or_default();
    let concepts = inf
        .concepts
        .as_ref()
        .map(|c| {
            c.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let pc = &schema.concepts[i];
                    ConceptView {
                        index: i,
                        name: pc.name.clone(),
                        kind: pc.kind,
                        anatomy: schema.anatomies[pc.anatomy].name.clone(),
                        value: v,
                        overridden: ov.concepts.contains_key(&i),
                    }
                })
                .collect()
        })
        .unwrap_or_default();
    let omega = inf.output.omega.as_ref().map(|w| {
        schema
            .binary_indices()
            .iter()
            .zip(w)
            .map(|(&i, &weight)| WeightView {
                concept: schema.concepts[i].name.clone(),
                weight,
            })
            .collect()
    });
    let names = schema.class_names();
    Ok(Payload {
        sample_id,
        variant: bundle.variant,
        height: bundle.height,
        width: bundle.width,
        image: s.image.data().to_vec(),
        mask_provenance: inf.segmentation.as_ref().map(|m| m.provenance),
        segments,
        concepts,
        omega,
        interaction: inf.output.interaction,
        classes: names
            .iter()
            .zip(&inf.output.probabilities)
            .map(|(n, &p)| ClassView {
                name: n.clone(),
                probability: p,
            })
            .collect(),
        predicted_class: names[inf.class].clone(),
    })
}

/// Predicted versus ground-truth-mask metrics of a segmenting variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationIntervention {
    pub baseline: EvalReport,
    pub intervened: EvalReport,
}

impl SegmentationIntervention {
    fn concept_pair(&self) -> (ConceptMetrics, ConceptMetrics) {
        (
            self.baseline.concepts.expect("conceiver present"),
            self.intervened.concepts.expect("conceiver present"),
        )
    }

    pub fn degrades(&self) -> bool {
        let (b, i) = self.concept_pair();
        i.coa < b.coa || i.rmse > b.rmse
    }

    pub fn improves(&self) -> bool {
        let (b, i) = self.concept_pair();
        i.coa > b.coa || i.rmse < b.rmse
    }
}

/// Masked stacks from ground-truth masks, marked as edits.
pub fn ground_truth_stacks(
    bundle: &ModelBundle,
    data: &Dataset,
    ids: &[usize],
) -> Vec<MaskedStack> {
    ids.iter()
        .map(|&i| {
            let s = &data.samples[i];
            let mut map =
                SegmentationMap::from_labels(&s.mask, bundle.schema.n(), data.height, data.width);
            map.provenance = Provenance::Edited;
            soft_mask(&map, &s.image).expect("dataset shapes agree")
        })
        .collect()
}

fn check_segmentation_conditioned(bundle: &ModelBundle) -> Result<()> {
    if !bundle.variant.uses_observer() || bundle.conceiver.is_none() {
        return Err(PipelineError::rejected(
            OverrideCode::NotIntervenable,
            format!(
                "{} has no segmentation-conditioned conceiver",
                bundle.variant
            ),
        ));
    }
    Ok(())
}

/// Per-sample conceiver and predictor outputs on ground-truth masks.
pub fn ground_truth_chain(
    bundle: &ModelBundle,
    data: &Dataset,
    ids: &[usize],
) -> Result<ChainOutput> {
    check_segmentation_conditioned(bundle)?;
    let stacks = ground_truth_stacks(bundle, data, ids);
    let refs: Vec<&MaskedStack> = stacks.iter().collect();
    let c = bundle.concepts_from_stacks(&refs)?;
    let outputs = bundle.classify(&c)?;
    Ok(ChainOutput {
        labels: Some(ids.iter().map(|&i| data.samples[i].mask.clone()).collect()),
        concepts: Some(c),
        outputs,
    })
}

/// Reruns the conceiver and predictor on ground-truth masks.
pub fn intervene_segmentation(
    bundle: &ModelBundle,
    data: &Dataset,
    ids: &[usize],
    baseline: Option<&ChainOutput>,
) -> Result<SegmentationIntervention> {
    check_segmentation_conditioned(bundle)?;
    let base = match baseline {
        Some(b) => b.clone(),
        None => run_chain(bundle, data, ids)?,
    };
    let intervened = ground_truth_chain(bundle, data, ids)?;
    Ok(SegmentationIntervention {
        baseline: report_chain(bundle, data, ids, &base),
        intervened: report_chain(bundle, data, ids, &intervened),
    })
}

/// Replaces the listed concept columns with ground truth where applicable;
/// inapplicable entries keep their predictions.
pub fn substitute(
    predicted: &Tensor,
    truth: &Tensor,
    applicable: &[bool],
    columns: &[usize],
) -> Tensor {
    let d = predicted.shape()[1];
    let mut out = predicted.data().to_vec();
    for (r, row) in out.chunks_mut(d).enumerate() {
        for &j in columns {
            if applicable[r * d + j] {
                row[j] = truth.data()[r * d + j];
            }
        }
    }
    Tensor::new(predicted.shape().to_vec(), out)
}

/// Concept rows and their ground truth for one split.
#[derive(Debug, Clone)]
pub struct ConceptSet {
    pub predicted: Tensor,
    pub truth: Tensor,
    pub applicable: Vec<bool>,
    pub labels: Vec<usize>,
}

impl ConceptSet {
    pub fn new(schema: &ConceptSchema, data: &Dataset, ids: &[usize], predicted: Tensor) -> Self {
        let (truth, applicable) = concept_truth(schema, data, ids);
        Self {
            predicted,
            truth,
            applicable,
            labels: ids.iter().map(|&i| data.samples[i].label).collect(),
        }
    }

    fn with(&self, columns: &[usize]) -> Tensor {
        substitute(&self.predicted, &self.truth, &self.applicable, columns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Candidates ranked on the evaluated split itself.
    EvaluationSplit,
    /// Candidates ranked on validation, curve measured on the evaluated split.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyCurve {
    pub variant: Variant,
    pub selection: Selection,
    /// Concept names in intervention order.
    pub order: Vec<String>,
    /// Entry `k` is the metric after `k` substitutions.
    pub oa: Vec<f64>,
    pub ma: Vec<f64>,
    /// Logits at `k = d` equal the full-substitution logits bit for bit.
    pub endpoint_identical: bool,
    /// Logits at `k = 0` equal the un-intervened chain's bit for bit.
    pub start_identical: bool,
}

fn logits_equal(a: &[ClassOutput], b: &[ClassOutput]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.logits.len() == y.logits.len()
                && x.logits
                    .iter()
                    .zip(&y.logits)
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn oa_of(bundle: &ModelBundle, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let out = bundle.classify(x)?;
    let hits = out
        .iter()
        .zip(labels)
        .filter(|(o, &l)| o.class() == l)
        .count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// Greedy best-first property intervention. At each step the not-yet-chosen
/// concept whose substitution maximizes selection-set OA is added; ties go to
/// the lower index.
pub fn greedy_curve(
    bundle: &ModelBundle,
    eval: &ConceptSet,
    eval_chain: &[ClassOutput],
    selection_set: Option<&ConceptSet>,
) -> Result<GreedyCurve> {
    let schema = &bundle.schema;
    let d = schema.d();
    let sel = selection_set.unwrap_or(eval);
    let mut chosen: Vec<usize> = Vec::new();
    let (mut oa, mut ma) = (Vec::with_capacity(d + 1), Vec::with_capacity(d + 1));
    let mut record = |x: &Tensor| -> Result<Vec<ClassOutput>> {
        let out = bundle.classify(x)?;
        let pred: Vec<usize> = out.iter().map(ClassOutput::class).collect();
        let m = classification_metrics(&pred, &eval.labels, schema);
        oa.push(m.oa);
        ma.push(m.ma);
        Ok(out)
    };
    let start = record(&eval.with(&chosen))?;
    let mut last = start.clone();
    while chosen.len() < d {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..d).filter(|j| !chosen.contains(j)) {
            let mut cols = chosen.clone();
            cols.push(j);
            let score = oa_of(bundle, &sel.with(&cols), &sel.labels)?;
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((j, score));
            }
        }
        chosen.push(best.expect("candidates remain").0);
        last = record(&eval.with(&chosen))?;
    }
    let all: Vec<usize> = (0..d).collect();
    let full = bundle.classify(&eval.with(&all))?;
    Ok(GreedyCurve {
        variant: bundle.variant,
        selection: if selection_set.is_some() {
            Selection::HeldOut
        } else {
            Selection::EvaluationSplit
        },
        order: chosen
            .iter()
            .map(|&j| schema.concepts[j].name.clone())
            .collect(),
        oa,
        ma,
        endpoint_identical: logits_equal(&last, &full),
        start_identical: logits_equal(&start, eval_chain),
    })
}

/// One firing of the zeroing rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroingEvent {
    pub row: usize,
    pub concept: String,
    pub area: usize,
}

/// Visibility concepts whose organ covers fewer than `threshold` argmax pixels
/// are set to 0.
pub fn rule_based_zeroing(
    schema: &ConceptSchema,
    labels: &[Vec<u8>],
    concepts: &Tensor,
    threshold: f64,
) -> (Tensor, Vec<ZeroingEvent>) {
    let d = schema.d();
    let mut out = concepts.data().to_vec();
    let mut events = Vec::new();
    let rules: Vec<(usize, usize)> = (0..d)
        .filter_map(|c| schema.visibility_organ(c).map(|o| (c, o)))
        .collect();
    for (r, l) in labels.iter().enumerate() {
        let mut area = vec![0usize; schema.n()];
        for &p in l {
            area[p as usize] += 1;
        }
        for &(c, o) in &rules {
            if (area[o] as f64) < threshold {
                out[r * d + c] = 0.0;
                events.push(ZeroingEvent {
                    row: r,
                    concept: schema.concepts[c].name.clone(),
                    area: area[o],
                });
            }
        }
    }
    (Tensor::new(concepts.shape().to_vec(), out), events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroingReport {
    pub threshold: f64,
    pub fired: usize,
    pub baseline: ClassificationMetrics,
    pub corrected: ClassificationMetrics,
}

/// Applies zeroing to a segmenting variant's chain outputs and re-classifies.
pub fn zeroing_report(
    bundle: &ModelBundle,
    data: &Dataset,
    ids: &[usize],
    chain: &ChainOutput,
) -> Result<ZeroingReport> {
    let schema = &bundle.schema;
    let (labels, concepts) = match (&chain.labels, &chain.concepts) {
        (Some(l), Some(c)) => (l, c),
        _ => {
            return Err(PipelineError::rejected(
                OverrideCode::NotIntervenable,
                format!(
                    "{} lacks a segmentation or property bottleneck",
                    bundle.variant
                ),
            ))
        }
    };
    let threshold = bundle.profile.zeroing_pixels;
    let (fixed, events) = rule_based_zeroing(schema, labels, concepts, threshold);
    let truth: Vec<usize> = ids.iter().map(|&i| data.samples[i].label).collect();
    let corrected: Vec<usize> = bundle
        .classify(&fixed)?
        .iter()
        .map(ClassOutput::class)
        .collect();
    Ok(ZeroingReport {
        threshold,
        fired: events.len(),
        baseline: classification_metrics(&chain.classes(), &truth, schema),
        corrected: classification_metrics(&corrected, &truth, schema),
    })
}

/// Concept index scoring the visibility of a segmentation organ.
pub fn visibility_concept(schema: &ConceptSchema, organ: &str) -> Result<usize> {
    let o = schema.segmentation_index(organ).ok_or_else(|| {
        PipelineError::rejected(
            OverrideCode::UnknownSegment,
            format!("unknown organ `{organ}`"),
        )
    })?;
    (0..schema.d())
        .find(|&c| {
            schema.concepts[c].measure == Some(Measure::Visibility)
                && schema.visibility_organ(c) == Some(o)
        })
        .ok_or_else(|| {
            PipelineError::rejected(
                OverrideCode::InvalidEdit,
                format!("organ `{organ}` has no visibility concept"),
            )
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub organ: String,
    pub samples: usize,
    /// Predicted visibility on ablated images.
    pub ablated: BTreeMap<Variant, MeanStd>,
    /// Predicted visibility on the same images before ablation.
    pub control: BTreeMap<Variant, MeanStd>,
}

fn concept_column(bundle: &ModelBundle, images: &[&Tensor], column: usize) -> Result<Vec<f64>> {
    let c = if bundle.variant.uses_observer() {
        let maps = bundle.segment(images)?;
        let stacks = maps
            .iter()
            .zip(images)
            .map(|(m, x)| soft_mask(m, x))
            .collect::<Result<Vec<_>, _>>()?;
        bundle.concepts_from_stacks(&stacks.iter().collect::<Vec<_>>())?
    } else {
        bundle.concepts_from_images(images)?
    };
    let d = bundle.schema.d();
    Ok((0..images.len())
        .map(|r| c.data()[r * d + column])
        .collect())
}

/// Removes each organ from every sample of `ids` that shows it and reports the
/// predicted visibility of that organ per model.
pub fn organ_ablation(
    bundles: &[&ModelBundle],
    geo: &GeoScan,
    data: &Dataset,
    ids: &[usize],
    organs: &[&str],
) -> Result<Vec<AblationRow>> {
    let schema = geo.schema();
    let mut out = Vec::new();
    for &organ in organs {
        let column = visibility_concept(schema, organ)?;
        let mut originals = Vec::new();
        let mut ablated = Vec::new();
        for &i in ids {
            let s = &data.samples[i];
            if s.spec.organs.iter().any(|o| o.class == organ && o.present) {
                if let Ok(a) = geo.ablate_organ(s, organ) {
                    originals.push(&s.image);
                    ablated.push(a);
                }
            }
        }
        let ablated_images: Vec<&Tensor> = ablated.iter().map(|s| &s.image).collect();
        let mut row = AblationRow {
            organ: organ.to_string(),
            samples: ablated.len(),
            ablated: BTreeMap::new(),
            control: BTreeMap::new(),
        };
        for b in bundles {
            row.ablated.insert(
                b.variant,
                mean_std(&concept_column(b, &ablated_images, column)?),
            );
            row.control
                .insert(b.variant, mean_std(&concept_column(b, &originals, column)?));
        }
        out.push(row);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaithfulnessMode {
    /// Each model's own concepts: CBM `c` against PCBM `c ⊕ √c̄`.
    PerModel,
    /// The same PCBM concepts with and without `√c̄`.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub mode: FaithfulnessMode,
    pub concepts_only: ClassificationMetrics,
    pub with_interaction: ClassificationMetrics,
}

/// Appends `√c̄` from a frozen interaction module as an extra column.
pub fn with_interaction_column(concepts: &Tensor, interacted: &[f64]) -> Tensor {
    let (b, d) = (concepts.shape()[0], concepts.shape()[1]);
    let mut out = Vec::with_capacity(b * (d + 1));
    for (row, &v) in concepts.data().chunks(d).zip(interacted) {
        out.extend_from_slice(row);
        out.push(v.max(0.0).sqrt());
    }
    Tensor::new(vec![b, d + 1], out)
}

/// Trains concept-only MLPs on `train` rows of the feature matrices (indexed
/// by sample id) and scores them on `test` rows.
#[allow(clippy::too_many_arguments)]
pub fn faithfulness(
    mode: FaithfulnessMode,
    plain: &Tensor,
    augmented: &Tensor,
    data: &Dataset,
    classes: usize,
    cfg: &PredictorConfig,
    schema: &ConceptSchema,
    seed: u64,
) -> Result<FaithfulnessReport> {
    let labels = data.labels();
    let (train, val, test) = (&data.splits.train, &data.splits.val, &data.splits.test);
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let score = |x: &Tensor, what: &str| -> Result<ClassificationMetrics> {
        let (m, _) = train_predictor(x, &labels, classes, train, val, None, cfg, seed, what)?;
        let pred: Vec<usize> = m
            .predict(&rows(x, test))?
            .iter()
            .map(ClassOutput::class)
            .collect();
        Ok(classification_metrics(&pred, &truth, schema))
    };
    Ok(FaithfulnessReport {
        mode,
        concepts_only: score(plain, "predicted concepts -> labels")?,
        with_interaction: score(
            augmented,
            "predicted concepts and frozen interaction -> labels",
        )?,
    })
}
