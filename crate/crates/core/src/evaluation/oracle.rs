//! Exact likelihoods of the random-order reverse process for tiny
//! all-categorical schemas, and Monte-Carlo estimates of the training bound.

use crate::diffusion::loss_weight;
use crate::error::{Error, Result};
use crate::model::{categorical_nll, Model, PropertyPrediction};
use crate::rng::{stream_rng, Stream};
use crate::schema::{Cell, EntityInstance, LeafKind};
use crate::training::RateSampling;

/// Largest leaf count accepted by the exact computations.
pub const MAX_EXACT_LEAVES: usize = 8;

fn check_small(model: &Model, entity: &EntityInstance) -> Result<Vec<usize>> {
    let d = model.dim();
    if d > MAX_EXACT_LEAVES {
        return Err(Error::invalid(format!("exact likelihood needs at most {MAX_EXACT_LEAVES} leaves, schema has {d}")));
    }
    model.schema.validate_entity(entity)?;
    let mut values = Vec::with_capacity(d);
    for (leaf, cell) in entity.cells.iter().enumerate() {
        if !matches!(model.schema.leaf(leaf).kind, LeafKind::Categorical { .. }) {
            return Err(Error::invalid("exact likelihood needs an all-categorical schema"));
        }
        match cell.value() {
            Some(crate::schema::Value::Cat(c)) => values.push(*c),
            _ => return Err(Error::invalid("exact likelihood needs a fully observed entity")),
        }
    }
    Ok(values)
}

/// `cond[S][d] = -ln p(x_d | leaves in bitmask S revealed)` for every
/// `d` outside `S`; one batched forward pass over all patterns.
pub fn pattern_losses(model: &Model, entity: &EntityInstance) -> Result<Vec<Vec<f64>>> {
    let values = check_small(model, entity)?;
    let d = values.len();
    let patterns: Vec<EntityInstance> = (0..1usize << d)
        .map(|s| {
            EntityInstance::new(
                (0..d).map(|i| if s >> i & 1 == 1 { entity.cells[i].clone() } else { Cell::Masked }).collect(),
            )
        })
        .collect();
    // The fully revealed pattern has nothing to decode.
    let preds = model.predict_batch(&patterns[..patterns.len() - 1], None, None)?;
    let mut out = vec![vec![f64::NAN; d]; 1 << d];
    for (s, pred) in preds.iter().enumerate() {
        for (&leaf, p) in pred {
            let PropertyPrediction::CategoricalLogits(logits) = p else { unreachable!("categorical schema") };
            out[s][leaf] = categorical_nll(logits, values[leaf]);
        }
    }
    Ok(out)
}

/// `ln p(x)` under the reverse process that reveals one uniformly chosen
/// masked leaf at a time. Summing over all orders is done by dynamic
/// programming over the revealed sets.
pub fn exact_reverse_loglik(model: &Model, entity: &EntityInstance) -> Result<f64> {
    let cond = pattern_losses(model, entity)?;
    Ok(reverse_loglik_from_patterns(&cond))
}

pub fn reverse_loglik_from_patterns(cond: &[Vec<f64>]) -> f64 {
    let d = cond[0].len();
    let full = (1usize << d) - 1;
    // log P(reach revealed set S)
    let mut log_p = vec![f64::NEG_INFINITY; 1 << d];
    log_p[0] = 0.0;
    for s in 1..=full {
        let revealed = s.count_ones() as usize;
        let choose = -((d - revealed + 1) as f64).ln();
        let terms: Vec<f64> = (0..d)
            .filter(|&i| s >> i & 1 == 1)
            .map(|i| {
                let prev = s & !(1 << i);
                log_p[prev] + choose - cond[prev][i]
            })
            .collect();
        log_p[s] = crate::numeric::log_sum_exp(&terms);
    }
    log_p[full]
}

/// Monte-Carlo estimate of the weighted training objective for one entity
/// with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

/// Estimate `E[C(pi) * sum of masked-leaf losses]` under the training
/// corruption with `draws` samples. Per-pattern losses are computed once,
/// so each draw only samples a rate and a mask.
pub fn bound_estimate(model: &Model, entity: &EntityInstance, draws: usize, sampling: RateSampling, seed: u64) -> Result<BoundEstimate> {
    let cond = pattern_losses(model, entity)?;
    let d = cond[0].len();
    let full = (1usize << d) - 1;
    let mut rng = stream_rng(seed, Stream::Corruption, 0);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let (pi, factor) = sampling.draw(&mut rng);
        let sample = crate::diffusion::corrupt(entity, pi, &mut rng)?;
        let revealed = full & !sample.masked.iter().fold(0usize, |m, &i| m | 1 << i);
        let loss: f64 = sample.masked.iter().map(|&i| cond[revealed][i]).sum();
        let w = loss_weight(d, sample.n_before, pi)? * factor;
        let x = w * loss;
        sum += x;
        sum_sq += x * x;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(BoundEstimate { mean, stderr: (var / n).sqrt(), draws })
}
