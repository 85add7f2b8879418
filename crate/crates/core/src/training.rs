//! The weighted denoising objective and the optimization loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::diffusion::{corrupt, corrupt_fixed_rate, CorruptionSample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, PropertyPrediction};
use crate::rng::{stream_rng, Rng, Stream};
use crate::schema::{EntityInstance, EntitySchema, LeafKind, Value};

/// Upper clamp on the masking rate before the loss weight is computed.
pub const MAX_MASK_RATE: f64 = 1.0 - 1e-6;

/// How the masking rate is drawn in diffusion mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSampling {
    /// `pi ~ U(0, 1)`, weight `C(pi)`.
    Uniform,
    /// Half of the draws from `U(0, 1)`, half from a density proportional to
    /// `1 / (1 - pi)` on `[0, MAX_MASK_RATE]`, with `C(pi)` divided by the
    /// mixture density. Same expected objective; the weight stays bounded as
    /// `pi` approaches 1.
    Importance,
}

impl RateSampling {
    /// Draw a masking rate and its importance factor.
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        match self {
            RateSampling::Uniform => (rng.gen::<f64>().min(MAX_MASK_RATE), 1.0),
            RateSampling::Importance => {
                let log_span = -(1.0 - MAX_MASK_RATE).ln();
                let pi = if rng.gen_bool(0.5) {
                    rng.gen::<f64>().min(MAX_MASK_RATE)
                } else {
                    (1.0 - (-log_span * rng.gen::<f64>()).exp()).min(MAX_MASK_RATE)
                };
                let density = 0.5 + 0.5 / ((1.0 - pi) * log_span);
                (pi, 1.0 / density)
            }
        }
    }
}

/// How corruption draws are produced during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    /// Masking rate drawn per entity, weighted objective.
    Diffusion,
    /// I.i.d. masking at a constant rate with unit weights.
    FixedMask { rate: f64 },
}

impl TrainMode {
    pub fn label(&self) -> String {
        match self {
            TrainMode::Diffusion => "diffusion".into(),
            TrainMode::FixedMask { rate } => format!("fixed_mask({rate})"),
        }
    }

    fn draw<R: rand::Rng + ?Sized>(
        &self,
        sampling: RateSampling,
        entity: &EntityInstance,
        rng: &mut R,
    ) -> Result<CorruptionSample> {
        match *self {
            TrainMode::Diffusion => {
                let (pi, factor) = sampling.draw(rng);
                let mut s = corrupt(entity, pi, rng)?;
                s.weight *= factor;
                Ok(s)
            }
            TrainMode::FixedMask { rate } => corrupt_fixed_rate(entity, rate, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub rate_sampling: RateSampling,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Diffusion,
            rate_sampling: RateSampling::Importance,
            batch_size: 64,
            epochs: 20,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let TrainMode::FixedMask { rate } = self.mode {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::invalid(format!("fixed masking rate must lie in (0, 1), got {rate}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be positive"));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return Err(Error::invalid("learning_rate and grad_clip must be positive, weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Loss of one entity inside a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityLoss {
    pub weight: f64,
    pub pi: f64,
    /// Unweighted reconstruction loss per Masked leaf.
    pub leaves: Vec<(usize, f64)>,
}

impl EntityLoss {
    pub fn weighted(&self) -> f64 {
        self.weight * self.leaves.iter().map(|(_, l)| l).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    /// Sum of weighted entity losses divided by the batch size.
    pub total: f64,
    /// Path -> (mean unweighted loss, count).
    pub per_leaf: BTreeMap<String, (f64, usize)>,
    pub weight_mean: f64,
    pub weight_max: f64,
    pub entities: Vec<EntityLoss>,
}

impl LossReport {
    fn from_entities(schema: &EntitySchema, entities: Vec<EntityLoss>) -> LossReport {
        let b = entities.len().max(1) as f64;
        let total = entities.iter().map(EntityLoss::weighted).sum::<f64>() / b;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &entities {
            for &(leaf, l) in &e.leaves {
                let slot = sums.entry(schema.leaf(leaf).path.clone()).or_default();
                slot.0 += l;
                slot.1 += 1;
            }
        }
        let per_leaf = sums.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect();
        let weight_mean = entities.iter().map(|e| e.weight).sum::<f64>() / b;
        let weight_max = entities.iter().map(|e| e.weight).fold(0.0, f64::max);
        LossReport { total, per_leaf, weight_mean, weight_max, entities }
    }
}

/// Loss of one prediction: cross-entropy, mixture NLL or mean per-token
/// cross-entropy for text.
pub fn reconstruction_loss(model: &Model, leaf: usize, pred: &PropertyPrediction, truth: &Value) -> Result<f64> {
    model.reconstruction_loss(leaf, pred, truth)
}

/// Decoupled-weight-decay Adam with per-tensor learning-rate multipliers.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> AdamW {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for id in 0..params.len() {
            let Some(g) = grads.get(id) else { continue };
            let lr_i = lr * params.lr_scale(id);
            let decay = if params.decays(id) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = &mut params.get_mut(id).data;
            for j in 0..w.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g.data[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                w[j] -= lr_i * (update + decay * w[j]);
            }
        }
    }
}

/// Cosine-annealed learning rate for `step` of `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step as f64 / (total - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
}

fn draw_batch<R: rand::Rng + ?Sized>(
    mode: &TrainMode,
    sampling: RateSampling,
    batch: &[EntityInstance],
    rng: &mut R,
) -> Result<Vec<CorruptionSample>> {
    batch.iter().map(|e| mode.draw(sampling, e, rng)).collect()
}

/// Weighted loss and gradients for pre-drawn corruptions. Gradients are `None`
/// in evaluation mode.
fn batch_loss(
    model: &Model,
    batch: &[EntityInstance],
    draws: &[CorruptionSample],
    dropout: Option<&mut Rng>,
    want_grads: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    let corrupted: Vec<EntityInstance> = draws.iter().map(|d| d.corrupted.clone()).collect();
    let b = batch.len() as f64;
    let weights: Vec<f64> = draws.iter().map(|d| d.weight / b).collect();
    let mut g = Graph::new(&model.params);
    let mut opts = ForwardOptions { dropout, ..ForwardOptions::default() };
    let (root, detail) = model.loss_graph(&mut g, &corrupted, batch, &weights, &mut opts)?;
    let mut entities: Vec<EntityLoss> =
        draws.iter().map(|d| EntityLoss { weight: d.weight, pi: d.pi, leaves: Vec::new() }).collect();
    for (e, leaf, l) in detail {
        entities[e].leaves.push((leaf, l));
    }
    for e in &mut entities {
        e.leaves.sort_by_key(|&(leaf, _)| leaf);
    }
    let report = LossReport::from_entities(&model.schema, entities);
    if !report.total.is_finite() {
        let bad: Vec<String> = report
            .per_leaf
            .iter()
            .filter(|(_, (l, _))| !l.is_finite())
            .map(|(k, _)| k.clone())
            .collect();
        return Err(Error::numerical(format!("non-finite loss (leaves: {})", bad.join(","))));
    }
    let grads = want_grads.then(|| g.backward(root));
    Ok((report, grads))
}

/// Stateful optimization loop over one model.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    optimizer: AdamW,
    step: usize,
    total_steps: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, total_steps: usize) -> Result<Trainer> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params);
        Ok(Trainer { model, config, optimizer, step: 0, total_steps: total_steps.max(1) })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Corrupt, score and update once on a normalized batch.
    pub fn training_step(&mut self, batch: &[EntityInstance]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let mut corruption = stream_rng(self.config.seed, Stream::Corruption, self.step as u64);
        let mut dropout = stream_rng(self.config.seed, Stream::Dropout, self.step as u64);
        let draws = draw_batch(&self.config.mode, self.config.rate_sampling, batch, &mut corruption)?;
        let (report, grads) = batch_loss(&self.model, batch, &draws, Some(&mut dropout), true)?;
        let mut grads = grads.expect("gradients requested");
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::numerical(format!("non-finite gradient at step {}", self.step)));
        }
        if norm > self.config.grad_clip {
            grads.scale(self.config.grad_clip / norm);
        }
        let lr = cosine_lr(self.config.learning_rate, self.step, self.total_steps);
        self.optimizer.step(&mut self.model.params, &grads, lr, &self.config);
        self.step += 1;
        Ok(report)
    }
}

/// Evaluation-mode objective on fixed corruption draws, chunked.
pub fn evaluate_objective(
    model: &Model,
    entities: &[EntityInstance],
    mode: &TrainMode,
    sampling: RateSampling,
    seed: u64,
    chunk: usize,
) -> Result<LossReport> {
    let mut rng = stream_rng(seed, Stream::Validation, 0);
    let mut all = Vec::with_capacity(entities.len());
    for batch in entities.chunks(chunk.max(1)) {
        let draws = draw_batch(mode, sampling, batch, &mut rng)?;
        let (report, _) = batch_loss(model, batch, &draws, None, false)?;
        all.extend(report.entities);
    }
    Ok(LossReport::from_entities(&model.schema, all))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCurve {
    pub mode: String,
    pub epochs: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mode,train_loss,validation_loss,learning_rate\n");
        for e in &self.epochs {
            let val = e.validation_loss.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, self.mode, e.train_loss, val, e.learning_rate));
        }
        s
    }
}

pub struct FitOutput {
    pub model: Model,
    pub curve: LossCurve,
}

/// Training-set constants: mean for numerical, mode for categorical, most
/// frequent string for text. Ties go to the smallest value.
pub fn constant_baseline(schema: &EntitySchema, data: &[EntityInstance]) -> Vec<Option<Value>> {
    (0..schema.dim())
        .map(|leaf| {
            let values = data.iter().filter_map(|e| e.cells[leaf].value());
            match &schema.leaf(leaf).kind {
                LeafKind::Numerical { .. } => {
                    let xs: Vec<f64> = values.filter_map(Value::as_num).collect();
                    (!xs.is_empty()).then(|| Value::Num(xs.iter().sum::<f64>() / xs.len() as f64))
                }
                LeafKind::Categorical { categories } => {
                    let mut counts = vec![0usize; categories.len()];
                    for v in values {
                        if let Value::Cat(c) = v {
                            counts[*c] += 1;
                        }
                    }
                    let best = (0..counts.len()).max_by_key(|&c| (counts[c], std::cmp::Reverse(c)))?;
                    (counts[best] > 0).then_some(Value::Cat(best))
                }
                LeafKind::Text(_) => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for v in values {
                        if let Value::Text(t) = v {
                            *counts.entry(t).or_default() += 1;
                        }
                    }
                    let max = counts.values().copied().max()?;
                    counts.into_iter().find(|&(_, n)| n == max).map(|(t, _)| Value::Text(t.to_string()))
                }
            }
        })
        .collect()
}

/// Seeded split into (train, validation) index lists.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if n > 1 { n_val.min(n - 1) } else { 0 };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Train a fresh model on raw (unnormalized) entities with a fitted schema.
///
/// `on_epoch` sees every epoch record as it is produced.
pub fn fit(
    dataset: &[EntityInstance],
    schema: &EntitySchema,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutput> {
    train_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::data("cannot train on an empty dataset"));
    }
    if !schema.is_fitted() {
        return Err(Error::schema("numerical normalizers must be fitted before training"));
    }
    let mut data = Vec::with_capacity(dataset.len());
    for e in dataset {
        schema.validate_entity(e)?;
        if e.effective_dim() == 0 {
            return Err(Error::data("entity has every leaf Missing"));
        }
        data.push(schema.normalize(e)?);
    }
    let (train_idx, val_idx) = split_indices(data.len(), train_cfg.validation_fraction, train_cfg.seed);
    let train: Vec<EntityInstance> = train_idx.iter().map(|&i| data[i].clone()).collect();
    let val: Vec<EntityInstance> = val_idx.iter().map(|&i| data[i].clone()).collect();

    let mut model = Model::new(model_cfg.clone(), schema.clone())?;
    model.baseline = constant_baseline(schema, &train);
    let per_epoch = train.len().div_ceil(train_cfg.batch_size);
    let mut trainer = Trainer::new(model, train_cfg.clone(), per_epoch * train_cfg.epochs)?;
    let mut curve = LossCurve { mode: train_cfg.mode.label(), epochs: Vec::new() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut stream_rng(train_cfg.seed, Stream::Shuffle, epoch as u64));
        let lr = cosine_lr(train_cfg.learning_rate, trainer.steps_taken(), trainer.total_steps);
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in order.chunks(train_cfg.batch_size) {
            let batch: Vec<EntityInstance> = idx.iter().map(|&i| train[i].clone()).collect();
            let report = trainer.training_step(&batch)?;
            sum += report.total * batch.len() as f64;
            count += batch.len();
        }
        let validation_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_objective(&trainer.model, &val, &train_cfg.mode, train_cfg.rate_sampling, train_cfg.seed, 256)?.total)
        };
        let record = EpochRecord { epoch: epoch + 1, train_loss: sum / count as f64, validation_loss, learning_rate: lr };
        on_epoch(&record);
        curve.epochs.push(record);
    }
    Ok(FitOutput { model: trainer.model, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;
    use crate::rng::seeded;
    use crate::schema::{Cell, PropertySpec};

    fn cat(name: &str, k: usize) -> PropertySpec {
        PropertySpec {
            path: name.into(),
            kind: LeafKind::Categorical { categories: (0..k).map(|i| format!("c{i}")).collect() },
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig { model_dim: 8, n_heads: 2, n_entity_layers: 1, n_enc_dec_layers: 1, ..ModelConfig::default() }
    }

    fn copy_data(n: usize, k: usize, seed: u64) -> Vec<EntityInstance> {
        let mut rng = seeded(seed);
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..k);
                EntityInstance::new(vec![Cell::Present(Value::Cat(c)), Cell::Present(Value::Cat(c))])
            })
            .collect()
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 4)]).unwrap();
        let model = Model::new(tiny(), schema).unwrap();
        let pred = PropertyPrediction::CategoricalLogits(vec![0.3; 4]);
        for c in 0..4 {
            let l = reconstruction_loss(&model, 0, &pred, &Value::Cat(c)).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let l = reconstruction_loss(&model, 0, &PropertyPrediction::CategoricalLogits(vec![margin, 0.0, 0.0, 0.0]), &Value::Cat(0)).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
        assert!(reconstruction_loss(&model, 0, &pred, &Value::Num(0.1)).is_err());
    }

    #[test]
    fn replay_is_deterministic() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 3), cat("b", 3)]).unwrap();
        let data = copy_data(16, 3, 1);
        let run = || {
            let model = Model::new(tiny(), schema.clone()).unwrap();
            let mut t = Trainer::new(model, TrainConfig { batch_size: 8, ..TrainConfig::default() }, 5).unwrap();
            let reports: Vec<LossReport> = (0..5).map(|s| t.training_step(&data[(s % 2) * 8..(s % 2) * 8 + 8]).unwrap()).collect();
            (reports, t.model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn single_leaf_loss_is_weighted_by_inverse_survival() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 3), cat("b", 2)]).unwrap();
        let model = Model::new(tiny(), schema).unwrap();
        let e = EntityInstance::new(vec![Cell::Present(Value::Cat(2)), Cell::Missing]);
        let cfg = TrainConfig { rate_sampling: RateSampling::Uniform, ..TrainConfig::default() };
        let mut t = Trainer::new(model.clone(), cfg, 1).unwrap();
        let report = t.training_step(std::slice::from_ref(&e)).unwrap();
        let ent = &report.entities[0];
        assert!((ent.weight - 1.0 / (1.0 - ent.pi)).abs() < 1e-12);
        let mut masked = e.clone();
        masked.cells[0] = Cell::Masked;
        // Dropout makes the training loss stochastic; recompute in evaluation mode.
        let pred = model.forward(&masked).unwrap();
        let direct = reconstruction_loss(&model, 0, &pred[&0], &Value::Cat(2)).unwrap();
        let draws = vec![CorruptionSample {
            corrupted: masked,
            pi: ent.pi,
            n_before: 0,
            masked: vec![0],
            weight: ent.weight,
            d_eff: 1,
        }];
        let (eval, _) = batch_loss(&model, &[e], &draws, None, false).unwrap();
        assert!((eval.total - ent.weight * direct).abs() < 1e-9);
        assert_eq!(eval.entities[0].leaves.len(), 1);
    }

    #[test]
    fn report_total_decomposes() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 3), cat("b", 3), cat("c", 2)]).unwrap();
        let model = Model::new(tiny(), schema).unwrap();
        let mut data = copy_data(10, 3, 4)
            .into_iter()
            .map(|mut e| {
                e.cells.push(Cell::Present(Value::Cat(1)));
                e
            })
            .collect::<Vec<_>>();
        data[3].cells[2] = Cell::Missing;
        let mut t = Trainer::new(model, TrainConfig::default(), 1).unwrap();
        let r = t.training_step(&data).unwrap();
        let recomputed: f64 = r.entities.iter().map(|e| e.weight * e.leaves.iter().map(|x| x.1).sum::<f64>()).sum::<f64>() / 10.0;
        assert!((r.total - recomputed).abs() < 1e-9);
        assert!(r.entities[3].leaves.iter().all(|&(leaf, _)| leaf != 2));
    }

    #[test]
    fn missing_leaves_get_no_gradient() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 3), cat("b", 3)]).unwrap();
        let model = Model::new(ModelConfig { dropout: 0.0, ..tiny() }, schema).unwrap();
        let batch = vec![EntityInstance::new(vec![Cell::Present(Value::Cat(1)), Cell::Missing]); 4];
        let mut rng = seeded(2);
        let draws = draw_batch(&TrainMode::Diffusion, RateSampling::Uniform, &batch, &mut rng).unwrap();
        let (_, grads) = batch_loss(&model, &batch, &draws, None, true).unwrap();
        let grads = grads.unwrap();
        for (id, (name, _)) in model.params.iter().enumerate() {
            if name.starts_with("enc.b.") || name.starts_with("dec.b.") {
                assert!(grads.get(id).is_none_or(|g| g.data.iter().all(|&x| x == 0.0)), "{name}");
            }
        }
    }

    #[test]
    fn fixed_mask_mode_is_reported() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 2), cat("b", 2)]).unwrap();
        let cfg = TrainConfig { mode: TrainMode::FixedMask { rate: 0.5 }, epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let out = fit(&copy_data(20, 2, 3), &schema, &tiny(), &cfg, |_| {}).unwrap();
        assert_eq!(out.curve.mode, "fixed_mask(0.5)");
        assert!(out.curve.to_csv().lines().nth(1).unwrap().contains("fixed_mask(0.5)"));
        assert!(fit(&[], &schema, &tiny(), &cfg, |_| {}).is_err());
        let bad = TrainConfig { mode: TrainMode::FixedMask { rate: 1.0 }, ..cfg };
        assert!(fit(&copy_data(4, 2, 3), &schema, &tiny(), &bad, |_| {}).is_err());
    }

    #[test]
    fn fit_is_reproducible() {
        let schema = EntitySchema::from_leaves(vec![cat("a", 3), cat("b", 3)]).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let a = fit(&copy_data(30, 3, 5), &schema, &tiny(), &cfg, |_| {}).unwrap();
        let b = fit(&copy_data(30, 3, 5), &schema, &tiny(), &cfg, |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curve.epochs, b.curve.epochs);
        assert_eq!(a.model.baseline.len(), 2);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 5, 11) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 11).abs() < 1e-12);
    }

    #[test]
    fn baseline_uses_mean_and_mode() {
        let schema = EntitySchema::from_leaves(vec![
            cat("a", 3),
            PropertySpec { path: "x".into(), kind: LeafKind::Numerical { normalizer: None } },
        ])
        .unwrap();
        let rows = [(2, 0.0), (2, 2.0), (1, 4.0)]
            .iter()
            .map(|&(c, x)| EntityInstance::new(vec![Cell::Present(Value::Cat(c)), Cell::Present(Value::Num(x))]))
            .collect::<Vec<_>>();
        let b = constant_baseline(&schema, &rows);
        assert_eq!(b, vec![Some(Value::Cat(2)), Some(Value::Num(2.0))]);
    }
}
