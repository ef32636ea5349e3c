//! Classification, concept and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::schema::{ConceptKind, ConceptSchema};

/// Square confusion matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        let mut m = Self::new(k);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), k, "confusion matrix must be square");
            m.counts[i * k..(i + 1) * k].copy_from_slice(r);
        }
        m
    }

    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Self {
        let mut m = Self::new(classes);
        for (&p, &t) in predicted.iter().zip(truth) {
            m.counts[t * classes + p] += 1;
        }
        m
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, t: usize) -> u64 {
        (0..self.classes).map(|p| self.get(t, p)).sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, p)).sum()
    }

    /// Instance accuracy.
    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|i| self.get(i, i)).sum::<u64>() as f64 / total as f64
    }

    /// Mean per-class recall over classes that occur in the ground truth.
    pub fn mean_accuracy(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect();
        if recalls.is_empty() {
            0.0
        } else {
            recalls.iter().sum::<f64>() / recalls.len() as f64
        }
    }

    /// Multiclass Matthews correlation (Gorodkin's R_K); 0 when undefined.
    pub fn mcc(&self) -> f64 {
        let s = self.total() as f64;
        let c: f64 = (0..self.classes).map(|k| self.get(k, k) as f64).sum();
        let t: Vec<f64> = (0..self.classes).map(|k| self.row_sum(k) as f64).collect();
        let p: Vec<f64> = (0..self.classes).map(|k| self.col_sum(k) as f64).collect();
        let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
        let pp: f64 = p.iter().map(|x| x * x).sum();
        let tt: f64 = t.iter().map(|x| x * x).sum();
        let denom = ((s * s - pp) * (s * s - tt)).sqrt();
        if denom == 0.0 {
            0.0
        } else {
            (c * s - tp) / denom
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnatomyRates {
    pub anatomy: String,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub oa: f64,
    pub ma: f64,
    pub mcc: f64,
    pub per_anatomy: Vec<AnatomyRates>,
}

/// Sensitivity and specificity per anatomy over samples of that anatomy, with
/// SP as the positive class. A prediction of another anatomy counts as negative.
pub fn anatomy_rates(cm: &ConfusionMatrix, schema: &ConceptSchema) -> Vec<AnatomyRates> {
    schema
        .anatomies
        .iter()
        .enumerate()
        .map(|(a, anat)| {
            let (sp, nsp) = (2 * a, 2 * a + 1);
            let tp = cm.get(sp, sp) as f64;
            let fn_ = cm.row_sum(sp) as f64 - tp;
            let fp = cm.get(nsp, sp) as f64;
            let tn = cm.row_sum(nsp) as f64 - fp;
            let ratio = |num: f64, den: f64| (den > 0.0).then(|| num / den);
            AnatomyRates {
                anatomy: anat.name.clone(),
                sensitivity: ratio(tp, tp + fn_),
                specificity: ratio(tn, tn + fp),
            }
        })
        .collect()
}

pub fn classification_metrics(
    predicted: &[usize],
    truth: &[usize],
    schema: &ConceptSchema,
) -> ClassificationMetrics {
    let cm = ConfusionMatrix::from_predictions(predicted, truth, schema.num_classes());
    ClassificationMetrics {
        oa: cm.overall_accuracy(),
        ma: cm.mean_accuracy(),
        mcc: cm.mcc(),
        per_anatomy: anatomy_rates(&cm, schema),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    /// Root-mean-square error over every scalar entry, padded entries included.
    pub rmse: f64,
    /// RMSE over applicable scalar entries only.
    pub rmse_applicable: f64,
    /// Accuracy over applicable binary entries; a prediction of exactly 0.5 is false.
    pub coa: f64,
}

/// `predictions`, `targets` are row-major `[samples, d]`; `applicable` likewise.
pub fn concept_metrics(
    predictions: &[f64],
    targets: &[f64],
    applicable: &[bool],
    schema: &ConceptSchema,
) -> ConceptMetrics {
    let d = schema.d();
    let (mut se, mut n_s, mut se_a, mut n_a, mut hit, mut n_b) =
        (0.0, 0usize, 0.0, 0usize, 0usize, 0usize);
    for (k, (&p, &t)) in predictions.iter().zip(targets).enumerate() {
        let app = applicable[k];
        match schema.concepts[k % d].kind {
            ConceptKind::Scalar => {
                se += (p - t).powi(2);
                n_s += 1;
                if app {
                    se_a += (p - t).powi(2);
                    n_a += 1;
                }
            }
            ConceptKind::Binary if app => {
                n_b += 1;
                if (p > 0.5) == (t > 0.5) {
                    hit += 1;
                }
            }
            ConceptKind::Binary => {}
        }
    }
    let rms = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).sqrt() };
    ConceptMetrics {
        rmse: rms(se, n_s),
        rmse_applicable: rms(se_a, n_a),
        coa: if n_b == 0 {
            1.0
        } else {
            hit as f64 / n_b as f64
        },
    }
}

/// Running per-class intersection and union counts for argmax label maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, predicted: &[u8], target: &[u8]) {
        for (&p, &t) in predicted.iter().zip(target) {
            if p == t {
                self.intersection[p as usize] += 1;
                self.union[p as usize] += 1;
            } else {
                self.union[p as usize] += 1;
                self.union[t as usize] += 1;
            }
        }
    }

    /// Per-class IoU; classes with empty union are `None`.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect()
    }

    /// Mean IoU over defined classes other than background (index 0).
    pub fn mean_foreground(&self) -> f64 {
        let v: Vec<f64> = self.per_class().into_iter().skip(1).flatten().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Per-class IoU of one label map pair.
pub fn iou(predicted: &[u8], target: &[u8], classes: usize) -> Vec<Option<f64>> {
    let mut acc = IouAccumulator::new(classes);
    acc.add(predicted, target);
    acc.per_class()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: 0.0,
            std: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_degenerate() {
        let m = ConfusionMatrix::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        assert_eq!(
            (m.overall_accuracy(), m.mean_accuracy(), m.mcc()),
            (1.0, 1.0, 1.0)
        );
        let m = ConfusionMatrix::from_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(
            (m.overall_accuracy(), m.mean_accuracy(), m.mcc()),
            (0.5, 0.5, 0.0)
        );
    }

    #[test]
    fn iou_union_is_double() {
        let target = [1u8, 1, 0, 0];
        let pred = [1u8, 1, 1, 1];
        let r = iou(&pred, &target, 2);
        assert_eq!(r[1], Some(0.5));
        assert_eq!(r[0], Some(0.0));
        let r = iou(&[0, 0], &[0, 0], 3);
        assert_eq!(r, vec![Some(1.0), None, None]);
    }
}
