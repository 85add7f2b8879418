//! Reverse-process simulation: unconditional sampling, imputation and point
//! prediction.
//!
//! Public entry points take and return entities in original units; the
//! `*_normalized` variants work on the network's normalized scale.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, sample_index, Model, PropertyPrediction, TextDecoding};
use crate::numeric::{gmm_nll, gmm_point, gmm_sample, softmax};
use crate::rng::{stream_rng, Rng, Stream};
use crate::schema::{Cell, EntityInstance, LeafKind, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    Sample,
    /// Deterministic values: mixture point estimate, categorical argmax,
    /// greedy text.
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    /// Leaves de-masked per network call.
    pub leap: usize,
    pub seed: u64,
    pub temperature: f64,
    pub numeric_mode: NumericMode,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { leap: 1, seed: 0, temperature: 1.0, numeric_mode: NumericMode::Sample }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leap == 0 {
            return Err(Error::invalid("leap must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub entity: EntityInstance,
    pub network_calls: usize,
}

/// Per-entity random sources. Leaf choice and leaf values use separate
/// streams so that the choice of order does not shift the value draws.
struct Walker {
    entity: EntityInstance,
    order_rng: Rng,
    value_rng: Rng,
    calls: usize,
}

fn draw_value(model: &Model, leaf: usize, pred: &PropertyPrediction, cfg: &SampleConfig, rng: &mut Rng) -> Value {
    let point = cfg.numeric_mode == NumericMode::Point;
    match pred {
        PropertyPrediction::CategoricalLogits(logits) => {
            if point {
                Value::Cat(argmax(logits))
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / cfg.temperature).collect();
                Value::Cat(sample_index(&softmax(&scaled), rng))
            }
        }
        PropertyPrediction::Gmm(params) => Value::Num(if point { gmm_point(params) } else { gmm_sample(params, rng) }),
        PropertyPrediction::Text(latent) => {
            let mode = if point {
                TextDecoding::Greedy
            } else {
                TextDecoding::Sample { temperature: cfg.temperature, rng }
            };
            Value::Text(model.decode_text(leaf, latent, mode))
        }
    }
}

/// Run the reverse process on normalized entities in lockstep. Entity `i`
/// uses random streams indexed by `first_index + i`, so results do not depend
/// on how entities are grouped into calls.
pub fn sample_batch_normalized(
    model: &Model,
    conditioning: &[EntityInstance],
    cfg: &SampleConfig,
    first_index: u64,
) -> Result<Vec<SampleOutcome>> {
    cfg.validate()?;
    let mut walkers: Vec<Walker> = conditioning
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let idx = first_index + i as u64;
            Walker {
                entity: e.clone(),
                order_rng: stream_rng(cfg.seed, Stream::SampleOrder, idx),
                value_rng: stream_rng(cfg.seed, Stream::SampleValue, idx),
                calls: 0,
            }
        })
        .collect();
    for w in &walkers {
        model.schema.check_width(&w.entity)?;
    }
    loop {
        let active: Vec<usize> = (0..walkers.len()).filter(|&i| walkers[i].entity.masked_count() > 0).collect();
        if active.is_empty() {
            break;
        }
        let mut chosen = Vec::with_capacity(active.len());
        for &i in &active {
            let w = &mut walkers[i];
            let masked = w.entity.masked_indices();
            let k = cfg.leap.min(masked.len());
            let mut pick: Vec<usize> =
                sample_indices(&mut w.order_rng, masked.len(), k).into_iter().map(|j| masked[j]).collect();
            pick.sort_unstable();
            chosen.push(pick);
        }
        let batch: Vec<EntityInstance> = active.iter().map(|&i| walkers[i].entity.clone()).collect();
        let preds = model.predict_batch(&batch, None, Some(&chosen))?;
        for ((&i, pick), pred) in active.iter().zip(&chosen).zip(preds) {
            let w = &mut walkers[i];
            w.calls += 1;
            for &leaf in pick {
                let v = draw_value(model, leaf, &pred[&leaf], cfg, &mut w.value_rng);
                w.entity.cells[leaf] = Cell::Present(v);
            }
        }
    }
    Ok(walkers.into_iter().map(|w| SampleOutcome { entity: w.entity, network_calls: w.calls }).collect())
}

/// Complete every Masked leaf of `conditioning` (original units).
pub fn sample_entity(model: &Model, conditioning: &EntityInstance, cfg: &SampleConfig, index: u64) -> Result<SampleOutcome> {
    let mut out = sample_batch(model, std::slice::from_ref(conditioning), cfg, index)?;
    Ok(out.pop().expect("one outcome"))
}

/// Batched [`sample_entity`] in original units.
pub fn sample_batch(model: &Model, conditioning: &[EntityInstance], cfg: &SampleConfig, first_index: u64) -> Result<Vec<SampleOutcome>> {
    let normalized: Vec<EntityInstance> =
        conditioning.iter().map(|e| model.schema.normalize(e)).collect::<Result<_>>()?;
    let mut out = sample_batch_normalized(model, &normalized, cfg, first_index)?;
    for (o, given) in out.iter_mut().zip(conditioning) {
        o.entity = model.schema.denormalize(&o.entity)?;
        // The normalization round trip may move observed values by an ulp.
        for (cell, g) in o.entity.cells.iter_mut().zip(&given.cells) {
            if g.is_present() {
                cell.clone_from(g);
            }
        }
    }
    Ok(out)
}

/// Draw `n` unconditional entities.
pub fn generate(model: &Model, n: usize, cfg: &SampleConfig) -> Result<Vec<SampleOutcome>> {
    let blank = vec![EntityInstance::all_masked(model.dim()); n];
    let mut out = Vec::with_capacity(n);
    for (c, chunk) in blank.chunks(256).enumerate() {
        out.extend(sample_batch(model, chunk, cfg, (c * 256) as u64)?);
    }
    Ok(out)
}

/// Masked-modeling generation: one network call on the fully masked entity,
/// every leaf sampled independently from that single prediction.
pub fn single_step_generate(model: &Model, n: usize, cfg: &SampleConfig) -> Result<Vec<EntityInstance>> {
    cfg.validate()?;
    let dim = model.dim();
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let batch = vec![EntityInstance::all_masked(dim); end - start];
        let preds = model.predict_batch(&batch, None, None)?;
        for (off, pred) in preds.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, Stream::SampleValue, (start + off) as u64);
            let mut e = EntityInstance::all_masked(dim);
            for leaf in 0..dim {
                e.cells[leaf] = Cell::Present(draw_value(model, leaf, &pred[&leaf], cfg, &mut rng));
            }
            out.push(model.schema.denormalize(&e)?);
        }
    }
    Ok(out)
}

/// Fill every Masked leaf of `partial` given its Present leaves.
pub fn impute(model: &Model, partial: &EntityInstance, cfg: &SampleConfig, index: u64) -> Result<EntityInstance> {
    Ok(sample_entity(model, partial, cfg, index)?.entity)
}

/// Deterministic prediction of one leaf from the Present leaves of `partial`.
/// Other Masked leaves are ignored.
pub fn point_predict(model: &Model, partial: &EntityInstance, target: usize) -> Result<Value> {
    if target >= model.dim() {
        return Err(Error::invalid(format!("leaf index {target} out of range")));
    }
    if partial.cells[target].is_present() {
        return Err(Error::invalid(format!("target `{}` is observed", model.schema.leaf(target).path)));
    }
    let mut e = model.schema.normalize(partial)?;
    e.cells[target] = Cell::Masked;
    let preds = model.predict_batch(std::slice::from_ref(&e), None, Some(&[vec![target]]))?;
    let value = point_value(model, target, &preds[0][&target]);
    denormalize_value(model, target, value)
}

/// Point estimate of a prediction on the normalized scale.
pub fn point_value(model: &Model, leaf: usize, pred: &PropertyPrediction) -> Value {
    match pred {
        PropertyPrediction::CategoricalLogits(l) => Value::Cat(argmax(l)),
        PropertyPrediction::Gmm(p) => Value::Num(gmm_point(p)),
        PropertyPrediction::Text(latent) => Value::Text(model.decode_text(leaf, latent, TextDecoding::Greedy)),
    }
}

pub(crate) fn denormalize_value(model: &Model, leaf: usize, value: Value) -> Result<Value> {
    match (value, model.schema.leaf(leaf).normalizer()) {
        (Value::Num(x), Some(n)) => Ok(Value::Num(n.denormalize(x))),
        (Value::Num(_), None) => Err(Error::schema("numerical normalizer is not fitted")),
        (v, _) => Ok(v),
    }
}

/// Log-likelihood profile of one numerical leaf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoglikCurve {
    /// (value in original units, log density in original units).
    pub points: Vec<(f64, f64)>,
    pub argmax: f64,
    /// Where the curve falls half a unit below its maximum, left and right,
    /// linearly interpolated between grid points.
    pub interval: (Option<f64>, Option<f64>),
}

impl LoglikCurve {
    pub fn half_width(&self) -> Option<f64> {
        match self.interval {
            (Some(lo), Some(hi)) => Some(0.5 * (hi - lo)),
            _ => None,
        }
    }
}

/// Mask only `target`, run one forward pass and evaluate the mixture's log
/// density (including the normalization Jacobian) at every grid value.
pub fn conditional_loglik_curve(model: &Model, entity: &EntityInstance, target: usize, grid: &[f64]) -> Result<LoglikCurve> {
    if grid.is_empty() {
        return Err(Error::invalid("grid must not be empty"));
    }
    let spec = model.schema.leaf(target);
    let LeafKind::Numerical { normalizer: Some(norm) } = &spec.kind else {
        return Err(Error::invalid(format!("`{}` is not a fitted numerical leaf", spec.path)));
    };
    let mut e = model.schema.normalize(entity)?;
    e.cells[target] = Cell::Masked;
    let preds = model.predict_batch(std::slice::from_ref(&e), None, Some(&[vec![target]]))?;
    let PropertyPrediction::Gmm(params) = &preds[0][&target] else { unreachable!("numerical head") };
    let log_jacobian = -norm.scale().ln();
    let mut points = Vec::with_capacity(grid.len());
    for &x in grid {
        points.push((x, -gmm_nll(params, norm.normalize(x))? + log_jacobian));
    }
    let best = (0..points.len()).max_by(|&a, &b| points[a].1.total_cmp(&points[b].1)).expect("nonempty");
    let cut = points[best].1 - 0.5;
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = best;
        for i in range {
            if points[i].1 < cut {
                let (x0, y0) = points[prev];
                let (x1, y1) = points[i];
                return Some(x0 + (x1 - x0) * (y0 - cut) / (y0 - y1));
            }
            prev = i;
        }
        None
    };
    let lo = crossing(&mut (0..best).rev());
    let hi = crossing(&mut (best + 1..points.len()));
    Ok(LoglikCurve { argmax: points[best].0, points, interval: (lo, hi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::ModelConfig;
    use crate::schema::{EntitySchema, Normalizer, PropertySpec};

    fn binary(name: &str) -> PropertySpec {
        PropertySpec { path: name.into(), kind: LeafKind::Categorical { categories: vec!["0".into(), "1".into()] } }
    }

    fn tiny() -> ModelConfig {
        ModelConfig { model_dim: 8, n_heads: 2, n_entity_layers: 1, n_enc_dec_layers: 1, gmm_components: 2, embedding_dim: 4, ..ModelConfig::default() }
    }

    /// Zero the readout layers so every head is uniform (or a fixed mixture).
    fn flatten_heads(m: &mut Model) {
        for id in 0..m.params.len() {
            let name = m.params.name(id).to_string();
            if name.ends_with(".head") || name.ends_with(".head_b") {
                let t = m.params.get_mut(id);
                *t = Tensor::zeros(t.rows, t.cols);
            }
        }
    }

    #[test]
    fn observed_entities_need_no_calls() {
        let m = Model::new(tiny(), EntitySchema::from_leaves(vec![binary("a"), binary("b")]).unwrap()).unwrap();
        let e = EntityInstance::new(vec![Cell::Present(Value::Cat(1)), Cell::Missing]);
        let out = sample_entity(&m, &e, &SampleConfig::default(), 0).unwrap();
        assert_eq!(out.network_calls, 0);
        assert_eq!(out.entity, e);
    }

    #[test]
    fn calls_follow_leap() {
        let schema = EntitySchema::from_leaves((0..5).map(|i| binary(&format!("l{i}"))).collect()).unwrap();
        let m = Model::new(tiny(), schema).unwrap();
        for leap in 1..=6 {
            let cfg = SampleConfig { leap, ..SampleConfig::default() };
            let out = sample_entity(&m, &EntityInstance::all_masked(5), &cfg, 3).unwrap();
            assert_eq!(out.network_calls, 5usize.div_ceil(leap.min(5)));
            assert!(out.entity.cells.iter().all(Cell::is_present));
        }
        let mut cond = EntityInstance::all_masked(5);
        cond.cells[2] = Cell::Present(Value::Cat(1));
        cond.cells[4] = Cell::Missing;
        let out = sample_entity(&m, &cond, &SampleConfig { leap: 2, ..SampleConfig::default() }, 0).unwrap();
        assert_eq!(out.network_calls, 2);
        assert_eq!(out.entity.cells[2], Cell::Present(Value::Cat(1)));
        assert_eq!(out.entity.cells[4], Cell::Missing);
    }

    #[test]
    fn uniform_heads_give_uniform_joint() {
        let mut m = Model::new(tiny(), EntitySchema::from_leaves(vec![binary("a"), binary("b")]).unwrap()).unwrap();
        flatten_heads(&mut m);
        let n = 10_000;
        let out = generate(&m, n, &SampleConfig { seed: 11, ..SampleConfig::default() }).unwrap();
        let mut counts = [0f64; 4];
        for o in &out {
            let v: Vec<usize> = o.entity.cells.iter().map(|c| match c.value() {
                Some(Value::Cat(c)) => *c,
                _ => unreachable!(),
            }).collect();
            counts[v[0] * 2 + v[1]] += 1.0;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 3 degrees of freedom: the 0.99 quantile is 11.34.
        assert!(chi2 < 11.34, "{counts:?}");
    }

    #[test]
    fn full_leap_reproduces_single_step() {
        let schema = EntitySchema::from_leaves(vec![binary("a"), binary("b"), binary("c")]).unwrap();
        let m = Model::new(tiny(), schema).unwrap();
        let cfg = SampleConfig { leap: 3, seed: 4, ..SampleConfig::default() };
        let leaped = generate(&m, 50, &cfg).unwrap();
        assert!(leaped.iter().all(|o| o.network_calls == 1));
        let single = single_step_generate(&m, 50, &cfg).unwrap();
        assert_eq!(leaped.into_iter().map(|o| o.entity).collect::<Vec<_>>(), single);
    }

    #[test]
    fn point_prediction_denormalizes_and_takes_argmax() {
        let schema = EntitySchema::from_leaves(vec![
            PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: Some(Normalizer::new(0.0, 10.0).unwrap()) } },
            PropertySpec { path: "k".into(), kind: LeafKind::Categorical { categories: vec!["a".into(), "b".into(), "c".into()] } },
        ])
        .unwrap();
        let mut m = Model::new(ModelConfig { unit_variance: true, gmm_components: 1, ..tiny() }, schema).unwrap();
        flatten_heads(&mut m);
        let bias = m.params.id("dec.x.head_b").unwrap();
        m.params.get_mut(bias).data[0] = 0.5;
        let kb = m.params.id("dec.k.head_b").unwrap();
        m.params.get_mut(kb).data.copy_from_slice(&[0.1, 2.0, -1.0]);
        let partial = EntityInstance::new(vec![Cell::Masked, Cell::Masked]);
        assert_eq!(point_predict(&m, &partial, 0).unwrap(), Value::Num(5.0));
        assert_eq!(point_predict(&m, &partial, 1).unwrap(), Value::Cat(1));
        let observed = EntityInstance::new(vec![Cell::Present(Value::Num(3.0)), Cell::Masked]);
        assert!(point_predict(&m, &observed, 0).is_err());
    }

    #[test]
    fn point_imputation_is_deterministic() {
        let schema = EntitySchema::from_leaves(vec![binary("a"), binary("b"), binary("c")]).unwrap();
        let m = Model::new(tiny(), schema).unwrap();
        let cfg = SampleConfig { numeric_mode: NumericMode::Point, seed: 2, ..SampleConfig::default() };
        let partial = EntityInstance::new(vec![Cell::Present(Value::Cat(0)), Cell::Masked, Cell::Masked]);
        assert_eq!(impute(&m, &partial, &cfg, 0).unwrap(), impute(&m, &partial, &cfg, 0).unwrap());
    }

    #[test]
    fn loglik_curve_peaks_at_single_mean() {
        let schema = EntitySchema::from_leaves(vec![
            PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: Some(Normalizer::new(0.0, 10.0).unwrap()) } },
            binary("k"),
        ])
        .unwrap();
        let mut m = Model::new(ModelConfig { gmm_components: 1, ..tiny() }, schema).unwrap();
        flatten_heads(&mut m);
        let bias = m.params.id("dec.x.head_b").unwrap();
        // Weight logit, mean, scale pre-activation.
        m.params.get_mut(bias).data.copy_from_slice(&[0.0, 0.42, -2.0]);
        let e = EntityInstance::new(vec![Cell::Present(Value::Num(1.0)), Cell::Present(Value::Cat(0))]);
        let grid: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        let curve = conditional_loglik_curve(&m, &e, 0, &grid).unwrap();
        assert!((curve.argmax - 4.2).abs() < 1e-9);
        let sigma = 10.0 * ((-2.0f64).exp().ln_1p() + 1e-3);
        assert!((curve.half_width().unwrap() - sigma).abs() < 1e-3, "{:?} vs {sigma}", curve.half_width());
        let PropertyPrediction::Gmm(p) = point_params(&m, &e) else { unreachable!() };
        for &i in &[17usize, 420, 901] {
            let x = grid[i];
            let expected = -gmm_nll(&p, x / 10.0).unwrap() - 10f64.ln();
            assert!((curve.points[i].1 - expected).abs() < 1e-9);
        }
        assert!(conditional_loglik_curve(&m, &e, 1, &grid).is_err());
        assert!(conditional_loglik_curve(&m, &e, 0, &[]).is_err());
    }

    fn point_params(m: &Model, e: &EntityInstance) -> PropertyPrediction {
        let mut n = m.schema.normalize(e).unwrap();
        n.cells[0] = Cell::Masked;
        m.forward(&n).unwrap().remove(&0).unwrap()
    }
}
