//! Small gradient-boosted tree learner and the downstream-efficacy protocol.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::schema::{EntityInstance, EntitySchema, LeafKind, Value};

#[derive(Debug, Clone, PartialEq)]
pub struct BoostConfig {
    pub rounds: usize,
    pub depth: usize,
    pub learning_rate: f64,
    /// Row fraction drawn per round.
    pub subsample: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub bins: usize,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig { rounds: 200, depth: 3, learning_rate: 0.1, subsample: 0.8, lambda: 1.0, bins: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loss {
    Squared,
    Logistic,
}

#[derive(Debug, Clone)]
enum Node {
    Split { feature: usize, bin: u8, left: usize, right: usize },
    Leaf(f64),
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[u8]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split { feature, bin, left, right } => i = if row[feature] <= bin { left } else { right },
                Node::Leaf(v) => return v,
            }
        }
    }
}

/// Quantile cut points per feature, fitted on training rows.
#[derive(Debug, Clone)]
struct Binner {
    cuts: Vec<Vec<f64>>,
}

impl Binner {
    fn fit(x: &[Vec<f64>], bins: usize) -> Binner {
        let n_features = x.first().map_or(0, Vec::len);
        let cuts = (0..n_features)
            .map(|f| {
                let mut col: Vec<f64> = x.iter().map(|r| r[f]).collect();
                col.sort_by(f64::total_cmp);
                col.dedup();
                if col.len() <= bins {
                    // Midpoints between distinct values.
                    col.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
                } else {
                    let mut c: Vec<f64> = (1..bins).map(|q| col[q * col.len() / bins]).collect();
                    c.dedup();
                    c
                }
            })
            .collect();
        Binner { cuts }
    }

    fn transform(&self, row: &[f64]) -> Vec<u8> {
        row.iter().zip(&self.cuts).map(|(x, c)| c.partition_point(|cut| cut < x) as u8).collect()
    }
}

struct Booster {
    base: f64,
    trees: Vec<Tree>,
    learning_rate: f64,
}

impl Booster {
    fn score(&self, row: &[u8]) -> f64 {
        self.base + self.learning_rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn build_tree(rows: &[Vec<u8>], idx: &mut [usize], g: &[f64], h: &[f64], n_bins: &[usize], cfg: &BoostConfig) -> Tree {
    let mut tree = Tree { nodes: Vec::new() };
    grow(&mut tree, rows, idx, g, h, n_bins, cfg, 0);
    tree
}

#[allow(clippy::too_many_arguments)]
fn grow(tree: &mut Tree, rows: &[Vec<u8>], idx: &mut [usize], g: &[f64], h: &[f64], n_bins: &[usize], cfg: &BoostConfig, depth: usize) -> usize {
    let (gs, hs): (f64, f64) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
    let me = tree.nodes.len();
    tree.nodes.push(Node::Leaf(-gs / (hs + cfg.lambda)));
    if depth == cfg.depth || idx.len() < 2 {
        return me;
    }
    let parent = gs * gs / (hs + cfg.lambda);
    let mut best: Option<(f64, usize, u8)> = None;
    for (f, &nb) in n_bins.iter().enumerate() {
        if nb < 2 {
            continue;
        }
        let mut hg = vec![0.0; nb];
        let mut hh = vec![0.0; nb];
        for &i in idx.iter() {
            let b = rows[i][f] as usize;
            hg[b] += g[i];
            hh[b] += h[i];
        }
        let (mut gl, mut hl) = (0.0, 0.0);
        for b in 0..nb - 1 {
            gl += hg[b];
            hl += hh[b];
            let (gr, hr) = (gs - gl, hs - hl);
            if hl < 1e-6 || hr < 1e-6 {
                continue;
            }
            let gain = gl * gl / (hl + cfg.lambda) + gr * gr / (hr + cfg.lambda) - parent;
            if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                best = Some((gain, f, b as u8));
            }
        }
    }
    let Some((_, feature, bin)) = best else { return me };
    // Partition in place: rows going left first.
    let mut split = 0;
    for k in 0..idx.len() {
        if rows[idx[k]][feature] <= bin {
            idx.swap(k, split);
            split += 1;
        }
    }
    let (l, r) = idx.split_at_mut(split);
    let left = grow(tree, rows, l, g, h, n_bins, cfg, depth + 1);
    let right = grow(tree, rows, r, g, h, n_bins, cfg, depth + 1);
    tree.nodes[me] = Node::Split { feature, bin, left, right };
    me
}

fn boost(rows: &[Vec<u8>], y: &[f64], loss: Loss, n_bins: &[usize], cfg: &BoostConfig, seed: u64, stream: u64) -> Booster {
    let n = y.len();
    let base = match loss {
        Loss::Squared => y.iter().sum::<f64>() / n as f64,
        Loss::Logistic => {
            let p = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    };
    let mut booster = Booster { base, trees: Vec::with_capacity(cfg.rounds), learning_rate: cfg.learning_rate };
    let mut score = vec![base; n];
    let mut rng = stream_rng(seed, Stream::Learner, stream);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..cfg.rounds {
        for i in 0..n {
            match loss {
                Loss::Squared => {
                    g[i] = score[i] - y[i];
                    h[i] = 1.0;
                }
                Loss::Logistic => {
                    let p = sigmoid(score[i]);
                    g[i] = p - y[i];
                    h[i] = (p * (1.0 - p)).max(1e-12);
                }
            }
        }
        let mut idx: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < cfg.subsample).collect();
        if idx.is_empty() {
            idx.push(rng.gen_range(0..n));
        }
        let tree = build_tree(rows, &mut idx, &g, &h, n_bins, cfg);
        for i in 0..n {
            score[i] += cfg.learning_rate * tree.predict(&rows[i]);
        }
        booster.trees.push(tree);
    }
    booster
}

/// Which downstream task the target leaf defines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Coefficient of determination.
    Regression,
    /// Macro-averaged F1.
    Classification,
}

/// Flattens entities into feature rows: numerical leaves as values (Missing
/// takes the training mean), categorical leaves one-hot; text is skipped.
#[derive(Debug, Clone)]
struct Featurizer {
    target: usize,
    means: Vec<f64>,
}

impl Featurizer {
    fn fit(schema: &EntitySchema, target: usize, train: &[EntityInstance]) -> Featurizer {
        let means = (0..schema.dim())
            .map(|leaf| {
                let xs: Vec<f64> = train.iter().filter_map(|e| e.cells[leaf].value().and_then(Value::as_num)).collect();
                if xs.is_empty() {
                    0.0
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            })
            .collect();
        Featurizer { target, means }
    }

    fn row(&self, schema: &EntitySchema, e: &EntityInstance) -> Vec<f64> {
        let mut out = Vec::new();
        for (leaf, spec) in schema.leaves().iter().enumerate() {
            if leaf == self.target {
                continue;
            }
            match &spec.kind {
                LeafKind::Numerical { .. } => {
                    out.push(e.cells[leaf].value().and_then(Value::as_num).unwrap_or(self.means[leaf]))
                }
                LeafKind::Categorical { categories } => {
                    let hot = match e.cells[leaf].value() {
                        Some(Value::Cat(c)) => Some(*c),
                        _ => None,
                    };
                    out.extend((0..categories.len()).map(|c| f64::from(u8::from(hot == Some(c)))));
                }
                LeafKind::Text(_) => {}
            }
        }
        out
    }
}

/// Trained downstream model for one target leaf.
pub struct DownstreamModel {
    task: Task,
    featurizer: Featurizer,
    binner: Binner,
    boosters: Vec<Booster>,
}

impl DownstreamModel {
    /// Fit on entities whose target is Present.
    pub fn fit(schema: &EntitySchema, target: usize, train: &[EntityInstance], cfg: &BoostConfig, seed: u64) -> Result<DownstreamModel> {
        let task = match &schema.leaf(target).kind {
            LeafKind::Numerical { .. } => Task::Regression,
            LeafKind::Categorical { .. } => Task::Classification,
            LeafKind::Text(_) => return Err(Error::invalid("downstream target must be numerical or categorical")),
        };
        let rows: Vec<&EntityInstance> = train.iter().filter(|e| e.cells[target].is_present()).collect();
        if rows.is_empty() {
            return Err(Error::data("no training rows with a present target"));
        }
        let owned: Vec<EntityInstance> = rows.iter().map(|e| (*e).clone()).collect();
        let featurizer = Featurizer::fit(schema, target, &owned);
        let x: Vec<Vec<f64>> = rows.iter().map(|e| featurizer.row(schema, e)).collect();
        let binner = Binner::fit(&x, cfg.bins);
        let binned: Vec<Vec<u8>> = x.iter().map(|r| binner.transform(r)).collect();
        let n_bins: Vec<usize> = binner.cuts.iter().map(|c| c.len() + 1).collect();
        let boosters = match task {
            Task::Regression => {
                let y: Vec<f64> = rows.iter().map(|e| e.cells[target].value().and_then(Value::as_num).expect("present")).collect();
                vec![boost(&binned, &y, Loss::Squared, &n_bins, cfg, seed, 0)]
            }
            Task::Classification => {
                let k = schema.leaf(target).categories().map_or(0, <[String]>::len);
                (0..k)
                    .map(|c| {
                        let y: Vec<f64> =
                            rows.iter().map(|e| f64::from(u8::from(e.cells[target].value() == Some(&Value::Cat(c))))).collect();
                        boost(&binned, &y, Loss::Logistic, &n_bins, cfg, seed, c as u64)
                    })
                    .collect()
            }
        };
        Ok(DownstreamModel { task, featurizer, binner, boosters })
    }

    pub fn predict(&self, schema: &EntitySchema, e: &EntityInstance) -> Value {
        let row = self.binner.transform(&self.featurizer.row(schema, e));
        match self.task {
            Task::Regression => Value::Num(self.boosters[0].score(&row)),
            Task::Classification => {
                let scores: Vec<f64> = self.boosters.iter().map(|b| b.score(&row)).collect();
                Value::Cat(crate::model::argmax(&scores))
            }
        }
    }

    /// R² or macro-F1 on `test`. Every test target must be Present.
    pub fn score(&self, schema: &EntitySchema, test: &[EntityInstance]) -> Result<f64> {
        let target = self.featurizer.target;
        let mut truth = Vec::with_capacity(test.len());
        for e in test {
            truth.push(e.cells[target].value().cloned().ok_or_else(|| Error::data("test target is Missing"))?);
        }
        let preds: Vec<Value> = test.iter().map(|e| self.predict(schema, e)).collect();
        Ok(match self.task {
            Task::Regression => {
                let t: Vec<f64> = truth.iter().filter_map(Value::as_num).collect();
                let p: Vec<f64> = preds.iter().filter_map(Value::as_num).collect();
                r_squared(&p, &t)
            }
            Task::Classification => {
                let cat = |v: &Value| if let Value::Cat(c) = v { *c } else { usize::MAX };
                macro_f1(&preds.iter().map(cat).collect::<Vec<_>>(), &truth.iter().map(cat).collect::<Vec<_>>())
            }
        })
    }
}

pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Unweighted mean of per-class F1 over classes seen in truth or predictions.
pub fn macro_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(truth).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let f1s = classes.iter().map(|&c| {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fn_)
        }
    });
    f1s.sum::<f64>() / classes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl ScoreSummary {
    fn of(xs: &[f64]) -> ScoreSummary {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        ScoreSummary { mean, std, runs: xs.len() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficacyReport {
    pub target: String,
    pub task: Task,
    pub real: ScoreSummary,
    pub synthetic: ScoreSummary,
}

impl EfficacyReport {
    pub fn ratio(&self) -> f64 {
        self.synthetic.mean / self.real.mean
    }
}

/// Train the learner on real data and on each synthetic set with
/// `learner_seeds` seeds, and score everything on `real_test`.
pub fn downstream_efficacy(
    schema: &EntitySchema,
    real_train: &[EntityInstance],
    synthetic: &[Vec<EntityInstance>],
    real_test: &[EntityInstance],
    target: &str,
    learner_seeds: usize,
    cfg: &BoostConfig,
) -> Result<EfficacyReport> {
    let t = schema.require_leaf(target)?;
    if learner_seeds == 0 || synthetic.is_empty() {
        return Err(Error::invalid("need at least one synthetic set and one learner seed"));
    }
    if real_test.iter().any(|e| !e.cells[t].is_present()) {
        return Err(Error::data(format!("target `{target}` is Missing in the test set")));
    }
    let mut real = Vec::with_capacity(learner_seeds);
    let mut synth = Vec::with_capacity(learner_seeds * synthetic.len());
    for seed in 0..learner_seeds as u64 {
        let m = DownstreamModel::fit(schema, t, real_train, cfg, seed)?;
        real.push(m.score(schema, real_test)?);
        for set in synthetic {
            let m = DownstreamModel::fit(schema, t, set, cfg, seed)?;
            synth.push(m.score(schema, real_test)?);
        }
    }
    let task = match &schema.leaf(t).kind {
        LeafKind::Numerical { .. } => Task::Regression,
        _ => Task::Classification,
    };
    Ok(EfficacyReport { target: target.to_string(), task, real: ScoreSummary::of(&real), synthetic: ScoreSummary::of(&synth) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::toy::{correlated_table, CLASSIFICATION_TARGET, REGRESSION_TARGET};
    use crate::schema::Cell;

    #[test]
    fn metric_helpers() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert!((r_squared(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0])).abs() < 1e-15);
        assert_eq!(macro_f1(&[0, 1, 1], &[0, 1, 1]), 1.0);
        // class 0: tp 1, fp 0, fn 1 -> 2/3; class 1: tp 1, fp 1, fn 0 -> 2/3.
        assert!((macro_f1(&[0, 1, 1], &[0, 0, 1]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn learner_fits_planted_signal() {
        let train = correlated_table(800, 0.3, 1);
        let test = correlated_table(400, 0.3, 2);
        let s = &train.schema;
        for (target, floor) in [(REGRESSION_TARGET, 0.8), (CLASSIFICATION_TARGET, 0.8)] {
            let t = s.require_leaf(target).unwrap();
            let m = DownstreamModel::fit(s, t, &train.entities, &BoostConfig::default(), 0).unwrap();
            let score = m.score(s, &test.entities).unwrap();
            assert!(score > floor, "{target}: {score}");
        }
    }

    #[test]
    fn identical_synthetic_data_scores_like_real() {
        let train = correlated_table(300, 0.3, 3);
        let test = correlated_table(200, 0.3, 4);
        let cfg = BoostConfig { rounds: 30, ..BoostConfig::default() };
        let r = downstream_efficacy(&train.schema, &train.entities, std::slice::from_ref(&train.entities), &test.entities, REGRESSION_TARGET, 2, &cfg).unwrap();
        assert_eq!(r.real, r.synthetic);
    }

    #[test]
    fn shuffled_labels_fall_to_chance() {
        let train = correlated_table(600, 0.3, 5);
        let test = correlated_table(600, 0.3, 6);
        let t = train.schema.require_leaf(CLASSIFICATION_TARGET).unwrap();
        let mut rng = stream_rng(9, Stream::Noise, 0);
        let shuffled: Vec<EntityInstance> = train
            .entities
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.cells[t] = Cell::Present(Value::Cat(rng.gen_range(0..2)));
                e
            })
            .collect();
        let cfg = BoostConfig { rounds: 50, ..BoostConfig::default() };
        let r = downstream_efficacy(&train.schema, &train.entities, &[shuffled], &test.entities, CLASSIFICATION_TARGET, 3, &cfg).unwrap();
        assert!(r.real.mean > 0.8);
        assert!((r.synthetic.mean - 0.5).abs() < 0.1, "{r:?}");
        let mut bad = test.entities.clone();
        bad[0].cells[t] = Cell::Missing;
        assert!(downstream_efficacy(&train.schema, &train.entities, std::slice::from_ref(&train.entities), &bad, CLASSIFICATION_TARGET, 1, &cfg).is_err());
    }
}
