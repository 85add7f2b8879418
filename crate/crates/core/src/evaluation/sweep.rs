//! Point-prediction quality as a function of the masked fraction.

use serde::Serialize;

use crate::diffusion::mask_random_subset;
use crate::error::{Error, Result};
use crate::evaluation::metrics::{MetricAccumulator, MetricReport};
use crate::generation::{denormalize_value, point_value};
use crate::model::Model;
use crate::rng::{stream_rng, Stream};
use crate::schema::{EntityInstance, Value};

const CHUNK: usize = 256;

/// Optimal-constant predictions in original units.
pub fn baseline_values(model: &Model) -> Result<Vec<Option<Value>>> {
    if model.baseline.len() != model.dim() {
        return Err(Error::Checkpoint("model carries no training baseline".into()));
    }
    model
        .baseline
        .iter()
        .enumerate()
        .map(|(leaf, v)| v.clone().map(|v| denormalize_value(model, leaf, v)).transpose())
        .collect()
}

/// Point-predict every Masked leaf of already-masked, normalized entities and
/// score against the clean originals in original units.
pub(crate) fn score_masked(
    model: &Model,
    masked: &[EntityInstance],
    truths: &[EntityInstance],
    acc: &mut MetricAccumulator,
    baseline_acc: &mut MetricAccumulator,
    baseline: &[Option<Value>],
) -> Result<()> {
    for (chunk_m, chunk_t) in masked.chunks(CHUNK).zip(truths.chunks(CHUNK)) {
        let preds = model.predict_batch(chunk_m, None, None)?;
        for (pred, truth) in preds.iter().zip(chunk_t) {
            for (&leaf, p) in pred {
                let Some(t) = truth.cells[leaf].value() else { continue };
                let v = denormalize_value(model, leaf, point_value(model, leaf, p))?;
                acc.add(&model.schema, leaf, &v, t)?;
                if let Some(b) = &baseline[leaf] {
                    baseline_acc.add(&model.schema, leaf, b, t)?;
                }
            }
        }
    }
    Ok(())
}

/// For each fraction, mask `max(1, ceil(f * D_eff))` random leaves of every
/// test entity in each trial, point-predict them and pool the errors over
/// entities and trials.
pub fn masking_sweep(model: &Model, test: &[EntityInstance], fractions: &[f64], trials: usize, seed: u64) -> Result<Vec<MetricReport>> {
    if fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("fractions must be sorted"));
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(Error::invalid("fractions must lie in [0, 1)"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let baseline = baseline_values(model)?;
    let normalized: Vec<EntityInstance> = test.iter().map(|e| model.schema.normalize(e)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(fractions.len());
    for (fi, &f) in fractions.iter().enumerate() {
        let mut acc = MetricAccumulator::default();
        let mut base_acc = MetricAccumulator::default();
        for trial in 0..trials {
            let mut rng = stream_rng(seed, Stream::Sweep, ((fi as u64) << 32) | trial as u64);
            let masked: Vec<EntityInstance> = normalized
                .iter()
                .map(|e| {
                    let count = ((f * e.effective_dim() as f64).ceil() as usize).max(1);
                    mask_random_subset(e, count, &mut rng)
                })
                .collect::<Result<_>>()?;
            score_masked(model, &masked, test, &mut acc, &mut base_acc, &baseline)?;
        }
        out.push(MetricReport {
            masking_fraction: Some(f),
            per_leaf: acc.finish(&model.schema),
            baseline: base_acc.finish(&model.schema),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub leaf: String,
    pub metric: &'static str,
    pub source: &'static str,
    pub value: f64,
    pub stderr: f64,
}

/// Long-format table: fraction, leaf, metric, source, value, stderr.
pub fn sweep_rows(reports: &[MetricReport]) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for r in reports {
        let fraction = r.masking_fraction.unwrap_or(f64::NAN);
        for (source, table) in [("model", &r.per_leaf), ("baseline", &r.baseline)] {
            for (leaf, m) in table {
                rows.push(SweepRow {
                    fraction,
                    leaf: leaf.clone(),
                    metric: m.metric.as_str(),
                    source,
                    value: m.value,
                    stderr: m.stderr,
                });
            }
        }
    }
    rows
}

pub fn sweep_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("fraction,leaf,metric,source,value,stderr\n");
    for r in sweep_rows(reports) {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.fraction, r.leaf, r.metric, r.source, r.value, r.stderr));
    }
    s
}

/// Score predictions of every Masked leaf of raw `partial` entities against
/// `truths`, with the constant baseline on the same cells.
pub fn evaluate_masked(model: &Model, partial: &[EntityInstance], truths: &[EntityInstance]) -> Result<MetricReport> {
    if partial.len() != truths.len() {
        return Err(Error::invalid("inputs and truths must be aligned"));
    }
    let baseline = baseline_values(model)?;
    let normalized: Vec<EntityInstance> = partial.iter().map(|e| model.schema.normalize(e)).collect::<Result<_>>()?;
    let mut acc = MetricAccumulator::default();
    let mut base_acc = MetricAccumulator::default();
    score_masked(model, &normalized, truths, &mut acc, &mut base_acc, &baseline)?;
    Ok(MetricReport { masking_fraction: None, per_leaf: acc.finish(&model.schema), baseline: base_acc.finish(&model.schema) })
}
