//! Classification metrics and the evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

use crate::data::DomainDataset;
use crate::error::Result;
use crate::model::TransformerModel;

/// Rank of `label` among the logits: the number of classes ordered before
/// it, counting strictly larger logits and equal logits at lower indices.
/// Rank 0 is the argmax with first-index tie-breaking.
pub fn label_rank(logits: &[f64], label: usize) -> usize {
    let t = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > t || (v == t && j < label))
        .count()
}

pub fn argmax(logits: &[f64]) -> usize {
    (0..logits.len())
        .find(|&j| label_rank(logits, j) == 0)
        .expect("non-empty logits")
}

/// Per-sample cross-entropy from raw logits.
pub fn sample_loss(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(num_classes: usize, labels: &[usize], predicted: &[usize]) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&t, &p) in labels.iter().zip(predicted) {
        m[t][p] += 1;
    }
    m
}

/// Mean over classes of TP / predicted-as-class; a class that is never
/// predicted contributes 0.
pub fn macro_precision(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let total: f64 = (0..k)
        .map(|c| {
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            if predicted == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / predicted as f64
            }
        })
        .sum();
    total / k as f64
}

/// Raw model outputs for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    /// Row-major `[n, num_classes]`.
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub macro_precision: f64,
    pub per_domain: BTreeMap<String, DomainMetrics>,
}

impl SplitMetrics {
    pub fn from_predictions(p: &Predictions, domain_names: &[String]) -> Self {
        let n = p.len();
        let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0);
        let mut predicted = Vec::with_capacity(n);
        let mut per: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
        for i in 0..n {
            let row = p.row(i);
            let rank = label_rank(row, p.labels[i]);
            let l = sample_loss(row, p.labels[i]);
            top1 += usize::from(rank == 0);
            top5 += usize::from(rank < 5);
            loss += l;
            predicted.push(argmax(row));
            let e = per.entry(p.domains[i]).or_default();
            e.0 += 1;
            e.1 += usize::from(rank == 0);
            e.2 += l;
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            n,
            top1: frac(top1, n),
            top5: frac(top5, n),
            loss: if n == 0 { 0.0 } else { loss / n as f64 },
            macro_precision: macro_precision(&confusion_matrix(p.num_classes, &p.labels, &predicted)),
            per_domain: per
                .into_iter()
                .map(|(d, (cnt, hit, l))| {
                    let name = domain_names.get(d).cloned().unwrap_or_else(|| format!("domain{d}"));
                    (
                        name,
                        DomainMetrics {
                            n: cnt,
                            accuracy: frac(hit, cnt),
                            loss: l / cnt as f64,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Runs the model over `indices` of `dataset` in chunks without augmentation.
pub fn predict(model: &TransformerModel, dataset: &DomainDataset, indices: &[usize]) -> Result<Predictions> {
    let mut logits = Vec::with_capacity(indices.len() * dataset.num_classes());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let (x, y) = dataset.batch(chunk, None);
        logits.extend_from_slice(model.forward(&x, false)?.logits.data());
        labels.extend(y);
    }
    Ok(Predictions {
        num_classes: model.config().num_classes,
        logits,
        labels,
        domains: indices.iter().map(|&i| dataset.samples[i].domain).collect(),
    })
}

pub fn evaluate_split(model: &TransformerModel, dataset: &DomainDataset, indices: &[usize]) -> Result<SplitMetrics> {
    Ok(SplitMetrics::from_predictions(&predict(model, dataset, indices)?, &dataset.domains))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,split,loss,top1,top5\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.epoch, p.split, p.loss, p.top1, p.top5));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    /// Fine-tuning wall clock as `HH:MM:SS`.
    pub finetune_wall_clock: Option<String>,
    pub eval_seconds: Option<f64>,
}

/// Evaluation of one model. `gap` and `delta_acc` are derived on
/// serialization and never stored.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub num_classes: usize,
    pub train: Option<SplitMetrics>,
    pub valid: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    pub baseline_test_top1: Option<f64>,
    #[serde(default)]
    pub curves: Vec<CurvePoint>,
    #[serde(default)]
    pub timing: EvalTiming,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, num_classes: usize) -> Self {
        Self {
            model: model.into(),
            num_classes,
            train: None,
            valid: None,
            test: None,
            baseline_test_top1: None,
            curves: Vec::new(),
            timing: EvalTiming::default(),
        }
    }

    /// Validation top-1 minus test top-1.
    pub fn gap(&self) -> Option<f64> {
        Some(self.valid.as_ref()?.top1 - self.test.as_ref()?.top1)
    }

    /// Test top-1 minus the baseline's test top-1.
    pub fn delta_acc(&self) -> Option<f64> {
        Some(self.test.as_ref()?.top1 - self.baseline_test_top1?)
    }

    /// Top-5 says little when there are few classes to rank.
    pub fn top5_low_information(&self) -> bool {
        self.num_classes <= 10
    }

    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        self.baseline_test_top1 = baseline.test.as_ref().map(|t| t.top1);
        self
    }
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View<'a> {
            model: &'a str,
            num_classes: usize,
            train: &'a Option<SplitMetrics>,
            valid: &'a Option<SplitMetrics>,
            test: &'a Option<SplitMetrics>,
            gap: Option<f64>,
            baseline_test_top1: Option<f64>,
            delta_acc: Option<f64>,
            top5_low_information: bool,
            curves: &'a [CurvePoint],
            timing: &'a EvalTiming,
        }
        View {
            model: &self.model,
            num_classes: self.num_classes,
            train: &self.train,
            valid: &self.valid,
            test: &self.test,
            gap: self.gap(),
            baseline_test_top1: self.baseline_test_top1,
            delta_acc: self.delta_acc(),
            top5_low_information: self.top5_low_information(),
            curves: &self.curves,
            timing: &self.timing,
        }
        .serialize(s)
    }
}
