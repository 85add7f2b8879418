//! Step-by-step diffusion sampling against one-shot masked-model sampling
//! from the same checkpoint.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::learner::{downstream_efficacy, BoostConfig, EfficacyReport};
use crate::generation::{generate, SampleConfig};
use crate::model::Model;
use crate::schema::{EntityInstance, EntitySchema, LeafKind, Value};

/// Agreement between the pairwise structure of a synthetic set and a
/// reference set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointStats {
    /// Total-variation distance between empirical joints, per categorical pair.
    pub categorical_tvd: BTreeMap<String, f64>,
    /// Absolute Pearson-correlation difference, per numerical pair.
    pub correlation_gap: BTreeMap<String, f64>,
    pub mean_tvd: Option<f64>,
    pub mean_correlation_gap: Option<f64>,
}

fn cat(e: &EntityInstance, leaf: usize) -> Option<usize> {
    match e.cells[leaf].value() {
        Some(Value::Cat(c)) => Some(*c),
        _ => None,
    }
}

fn num(e: &EntityInstance, leaf: usize) -> Option<f64> {
    e.cells[leaf].value().and_then(Value::as_num)
}

fn joint_frequencies(set: &[EntityInstance], a: usize, b: usize) -> BTreeMap<(usize, usize), f64> {
    let mut counts = BTreeMap::new();
    let mut total = 0.0;
    for e in set {
        if let (Some(x), Some(y)) = (cat(e, a), cat(e, b)) {
            *counts.entry((x, y)).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    counts.values_mut().for_each(|c| *c /= total);
    counts
}

fn correlation(set: &[EntityInstance], a: usize, b: usize) -> Option<f64> {
    let pairs: Vec<(f64, f64)> = set.iter().filter_map(|e| Some((num(e, a)?, num(e, b)?))).collect();
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x / n, sy + y / n));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Some(0.0);
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Pairwise joint statistics of `synthetic` compared against `reference`.
pub fn joint_stats(schema: &EntitySchema, synthetic: &[EntityInstance], reference: &[EntityInstance]) -> JointStats {
    let mut categorical_tvd = BTreeMap::new();
    let mut correlation_gap = BTreeMap::new();
    let leaves = schema.leaves();
    for a in 0..leaves.len() {
        for b in a + 1..leaves.len() {
            let key = format!("{}|{}", leaves[a].path, leaves[b].path);
            match (&leaves[a].kind, &leaves[b].kind) {
                (LeafKind::Categorical { .. }, LeafKind::Categorical { .. }) => {
                    let p = joint_frequencies(synthetic, a, b);
                    let q = joint_frequencies(reference, a, b);
                    let mut cells: Vec<&(usize, usize)> = p.keys().chain(q.keys()).collect();
                    cells.sort_unstable();
                    cells.dedup();
                    let tvd = 0.5 * cells.iter().map(|k| (p.get(k).unwrap_or(&0.0) - q.get(k).unwrap_or(&0.0)).abs()).sum::<f64>();
                    categorical_tvd.insert(key, tvd);
                }
                (LeafKind::Numerical { .. }, LeafKind::Numerical { .. }) => {
                    if let (Some(s), Some(r)) = (correlation(synthetic, a, b), correlation(reference, a, b)) {
                        correlation_gap.insert(key, (s - r).abs());
                    }
                }
                _ => {}
            }
        }
    }
    let mean = |m: &BTreeMap<String, f64>| (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64);
    JointStats { mean_tvd: mean(&categorical_tvd), mean_correlation_gap: mean(&correlation_gap), categorical_tvd, correlation_gap }
}

/// Fraction of entities whose two categorical leaves take the same label.
pub fn match_rate(set: &[EntityInstance], a: usize, b: usize) -> f64 {
    let hits = set.iter().filter(|e| matches!((cat(e, a), cat(e, b)), (Some(x), Some(y)) if x == y)).count();
    hits as f64 / set.len().max(1) as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationArm {
    pub leap: usize,
    pub network_calls: usize,
    pub joint: JointStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efficacy: Option<EfficacyReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub samples: usize,
    pub seed: u64,
    pub diffusion: AblationArm,
    pub single_step: AblationArm,
}

/// Optional downstream comparison inside the ablation.
#[derive(Debug, Clone)]
pub struct EfficacySetup<'a> {
    pub target: &'a str,
    pub real_train: &'a [EntityInstance],
    pub learner_seeds: usize,
    pub learner: BoostConfig,
}

/// Output of the ablation: the report plus both synthetic sets.
pub struct Ablation {
    pub report: AblationReport,
    pub diffusion_samples: Vec<EntityInstance>,
    pub single_step_samples: Vec<EntityInstance>,
}

/// Draw `n` entities with leap 1 and with leap `D`, using the same seed, and
/// compare each set against `eval` (raw units).
pub fn ablate_single_step_vs_diffusion(
    model: &Model,
    eval: &[EntityInstance],
    n: usize,
    seed: u64,
    efficacy: Option<&EfficacySetup<'_>>,
) -> Result<Ablation> {
    if eval.is_empty() || n == 0 {
        return Err(Error::invalid("ablation needs a non-empty evaluation set and n >= 1"));
    }
    let mut arms = Vec::with_capacity(2);
    let mut sets = Vec::with_capacity(2);
    for leap in [1, model.dim()] {
        let cfg = SampleConfig { leap, seed, ..SampleConfig::default() };
        let outcomes = generate(model, n, &cfg)?;
        let network_calls = outcomes.iter().map(|o| o.network_calls).sum();
        let samples: Vec<EntityInstance> = outcomes.into_iter().map(|o| o.entity).collect();
        let efficacy = match efficacy {
            Some(s) => Some(downstream_efficacy(
                &model.schema,
                s.real_train,
                std::slice::from_ref(&samples),
                eval,
                s.target,
                s.learner_seeds,
                &s.learner,
            )?),
            None => None,
        };
        arms.push(AblationArm { leap, network_calls, joint: joint_stats(&model.schema, &samples, eval), efficacy });
        sets.push(samples);
    }
    let single_step = arms.pop().expect("two arms");
    let diffusion = arms.pop().expect("two arms");
    let single_step_samples = sets.pop().expect("two sets");
    let diffusion_samples = sets.pop().expect("two sets");
    Ok(Ablation {
        report: AblationReport { samples: n, seed, diffusion, single_step },
        diffusion_samples,
        single_step_samples,
    })
}
