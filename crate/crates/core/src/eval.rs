//! Confusion matrices, IoU and the per-scene evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::scenegen::{ImageSample, NUM_CLASSES};
use crate::segnet::predict;
use crate::severity::SeverityConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no class has any labeled or predicted pixel")]
    Empty,
    #[error("sample `{0}` has no label")]
    Unlabeled(String),
    #[error("sample `{id}`: {msg}")]
    Shape { id: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, truth: &[u8], pred: &[u8]) {
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize * self.k + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    /// `tp/(tp+fp+fn)` per class; `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64, EvalError> {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(EvalError::Empty);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
}

impl Metrics {
    pub fn from_cm(cm: &ConfusionMatrix) -> Result<Self, EvalError> {
        Ok(Metrics {
            per_class: cm.iou_per_class(),
            miou: cm.miou()?,
            pixels: cm.total(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub scenes: BTreeMap<String, Metrics>,
    pub overall: Metrics,
    pub savpt: bool,
    #[serde(default)]
    pub config_hash: String,
    /// SHA-256 of the evaluated checkpoint file.
    #[serde(default)]
    pub checkpoint_sha256: String,
}

/// Per-scene and pooled confusion matrices.
pub fn confusion_by_scene(
    model: &Model,
    samples: &[ImageSample],
    savpt: Option<&SeverityConfig>,
) -> Result<BTreeMap<String, ConfusionMatrix>, EvalError> {
    let mut out: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    for s in samples {
        let label = s.label.as_ref().ok_or_else(|| EvalError::Unlabeled(s.id.clone()))?;
        let logits = model.logits(s, savpt)?;
        let pred = predict(&logits).swap_remove(0);
        if pred.len() != label.data.len() {
            return Err(EvalError::Shape {
                id: s.id.clone(),
                msg: format!("{} predicted pixels vs {} labeled", pred.len(), label.data.len()),
            });
        }
        out.entry(s.scene.name().to_string())
            .or_insert_with(|| ConfusionMatrix::new(NUM_CLASSES))
            .add(&label.data, &pred);
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    samples: &[ImageSample],
    savpt: Option<&SeverityConfig>,
) -> Result<EvalReport, EvalError> {
    let by_scene = confusion_by_scene(model, samples, savpt)?;
    let mut pooled = ConfusionMatrix::new(NUM_CLASSES);
    let mut scenes = BTreeMap::new();
    for (k, cm) in &by_scene {
        pooled.merge(cm);
        scenes.insert(k.clone(), Metrics::from_cm(cm)?);
    }
    Ok(EvalReport {
        scenes,
        overall: Metrics::from_cm(&pooled)?,
        savpt: savpt.is_some(),
        config_hash: String::new(),
        checkpoint_sha256: String::new(),
    })
}

/// `max − min`; zero for fewer than two values.
pub fn range(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() {
        0.0
    } else {
        max - min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub runs: Vec<SeedResult>,
    pub average: f64,
    pub range: f64,
}

impl StrategyRow {
    pub fn new(strategy: impl Into<String>, runs: Vec<SeedResult>) -> Self {
        let ok: Vec<f64> = runs.iter().filter_map(|r| r.miou).collect();
        let average = if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        };
        StrategyRow {
            strategy: strategy.into(),
            average,
            range: range(&ok),
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRangeReport {
    pub rows: Vec<StrategyRow>,
}

/// Mean of `values[end-window .. end]` (clipped at 0).
pub fn trailing_mean(values: &[f32], end: usize, window: usize) -> f64 {
    let end = end.min(values.len());
    let start = end.saturating_sub(window);
    let s = &values[start..end];
    s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(5);
        let t = [0u8, 1, 2, 3, 4, 4];
        cm.add(&t, &t);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert!(cm.iou_per_class().iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn disjoint_class_and_zero_union() {
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&[0, 0, 1, 1], &[1, 1, 1, 1]);
        let iou = cm.iou_per_class();
        assert_eq!(iou[0], Some(0.0));
        assert_eq!(iou[1], Some(0.5));
        assert_eq!(iou[2], None);
        assert_eq!(cm.miou().unwrap(), 0.25);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(ConfusionMatrix::new(5).miou(), Err(EvalError::Empty)));
    }

    #[test]
    fn range_and_rows() {
        assert_eq!(range(&[0.3]), 0.0);
        assert_eq!(range(&[]), 0.0);
        let row = StrategyRow::new(
            "cod",
            vec![
                SeedResult {
                    seed: 1,
                    miou: Some(0.5),
                    error: None,
                },
                SeedResult {
                    seed: 2,
                    miou: Some(0.25),
                    error: None,
                },
                SeedResult {
                    seed: 3,
                    miou: None,
                    error: Some("boom".into()),
                },
            ],
        );
        assert_eq!(row.range, 0.25);
        assert_eq!(row.average, 0.375);
    }

    #[test]
    fn report_json_shape() {
        let cm = {
            let mut c = ConfusionMatrix::new(5);
            c.add(&[0, 1], &[0, 2]);
            c
        };
        let m = Metrics::from_cm(&cm).unwrap();
        let r = EvalReport {
            scenes: [("fog".to_string(), m.clone())].into_iter().collect(),
            overall: m,
            savpt: true,
            config_hash: "h".into(),
            checkpoint_sha256: "c".into(),
        };
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v["fog"]["miou"].is_number());
        assert_eq!(v["savpt"], true);
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn trailing_window() {
        let v = [1.0f32, 2.0, 3.0, 4.0];
        assert_eq!(trailing_mean(&v, 4, 2), 3.5);
        assert_eq!(trailing_mean(&v, 1, 5), 1.0);
    }
}
