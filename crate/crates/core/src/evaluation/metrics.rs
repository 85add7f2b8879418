//! Per-leaf error metrics with standard errors.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::schema::{EntityInstance, EntitySchema, LeafKind, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Rmse,
    ErrorRate,
    OneMinusWordIou,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Rmse => "rmse",
            MetricKind::ErrorRate => "error_rate",
            MetricKind::OneMinusWordIou => "one_minus_word_iou",
        }
    }

    pub fn for_leaf(kind: &LeafKind) -> MetricKind {
        match kind {
            LeafKind::Numerical { .. } => MetricKind::Rmse,
            LeafKind::Categorical { .. } => MetricKind::ErrorRate,
            LeafKind::Text(_) => MetricKind::OneMinusWordIou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafMetric {
    pub metric: MetricKind,
    pub value: f64,
    pub stderr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking_fraction: Option<f64>,
    pub per_leaf: BTreeMap<String, LeafMetric>,
    /// Same metrics for the optimal-constant predictor on the same cells.
    pub baseline: BTreeMap<String, LeafMetric>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table: one row per leaf with model and baseline columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("leaf,metric,value,stderr,count,baseline_value,baseline_stderr\n");
        for (path, m) in &self.per_leaf {
            let (bv, bs) = match self.baseline.get(path) {
                Some(b) => (b.value.to_string(), b.stderr.to_string()),
                None => (String::new(), String::new()),
            };
            s.push_str(&format!("{path},{},{},{},{},{bv},{bs}\n", m.metric.as_str(), m.value, m.stderr, m.count));
        }
        s
    }
}

/// `1 - |A ∩ B| / |A ∪ B|` over lowercase whitespace-separated word sets.
/// Two empty strings count as identical.
pub fn one_minus_word_iou(predicted: &str, truth: &str) -> f64 {
    let words = |s: &str| s.split_whitespace().map(str::to_lowercase).collect::<BTreeSet<String>>();
    let (a, b) = (words(predicted), words(truth));
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

/// Running per-leaf error sums.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sums: BTreeMap<usize, (f64, f64, usize)>,
}

impl MetricAccumulator {
    /// Record one prediction. Values must be in original units.
    pub fn add(&mut self, schema: &EntitySchema, leaf: usize, predicted: &Value, truth: &Value) -> Result<()> {
        let err = match (&schema.leaf(leaf).kind, predicted, truth) {
            (LeafKind::Numerical { .. }, Value::Num(p), Value::Num(t)) => (p - t) * (p - t),
            (LeafKind::Categorical { .. }, Value::Cat(p), Value::Cat(t)) => f64::from(u8::from(p != t)),
            (LeafKind::Text(_), Value::Text(p), Value::Text(t)) => one_minus_word_iou(p, t),
            _ => {
                return Err(Error::data(format!(
                    "prediction {predicted:?} and truth {truth:?} do not match property `{}`",
                    schema.leaf(leaf).path
                )))
            }
        };
        let slot = self.sums.entry(leaf).or_default();
        slot.0 += err;
        slot.1 += err * err;
        slot.2 += 1;
        Ok(())
    }

    /// Leaves with no observations are omitted.
    pub fn finish(&self, schema: &EntitySchema) -> BTreeMap<String, LeafMetric> {
        let mut out = BTreeMap::new();
        for (&leaf, &(sum, sum_sq, n)) in &self.sums {
            let metric = MetricKind::for_leaf(&schema.leaf(leaf).kind);
            let nf = n as f64;
            let mean = sum / nf;
            let var = if n > 1 { ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0) } else { 0.0 };
            let se_mean = (var / nf).sqrt();
            let (value, stderr) = match metric {
                MetricKind::Rmse => {
                    let rmse = mean.sqrt();
                    // Delta method on the square root of the mean squared error.
                    (rmse, if rmse > 0.0 { se_mean / (2.0 * rmse) } else { 0.0 })
                }
                MetricKind::ErrorRate => (mean, (mean * (1.0 - mean) / nf).sqrt()),
                MetricKind::OneMinusWordIou => (mean, se_mean),
            };
            out.insert(schema.leaf(leaf).path.clone(), LeafMetric { metric, value, stderr, count: n });
        }
        out
    }
}

/// Score Present prediction cells against Present truth cells; everything
/// else is skipped.
pub fn compute_metrics(predictions: &[EntityInstance], truths: &[EntityInstance], schema: &EntitySchema) -> Result<MetricReport> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid("predictions and truths must be aligned"));
    }
    let mut acc = MetricAccumulator::default();
    for (p, t) in predictions.iter().zip(truths) {
        schema.check_width(p)?;
        schema.check_width(t)?;
        for leaf in 0..schema.dim() {
            if let (Some(pv), Some(tv)) = (p.cells[leaf].value(), t.cells[leaf].value()) {
                acc.add(schema, leaf, pv, tv)?;
            }
        }
    }
    Ok(MetricReport { masking_fraction: None, per_leaf: acc.finish(schema), baseline: BTreeMap::new() })
}
