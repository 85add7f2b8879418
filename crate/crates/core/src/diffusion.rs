//! Forward absorbing-mask process.
//!
//! Every leaf independently jumps into the mask state and stays there. The
//! process is parameterized directly by the masking probability `pi` rather
//! than by a time variable and a rate schedule: the likelihood bound only
//! depends on `pi`.

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::schema::{Cell, EntityInstance};

/// Marginal transition matrix of one leaf after masking probability `pi`.
///
/// State `0` is the mask; states `1..k` are the category values.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pi: f64,
    k: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(pi: f64, k: usize) -> Result<TransitionMatrix> {
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::invalid(format!("masking probability {pi} outside [0, 1]")));
        }
        if k < 2 {
            return Err(Error::invalid(format!("state count {k} must be at least 2")));
        }
        let mut entries = vec![0.0; k * k];
        entries[0] = 1.0;
        for i in 1..k {
            entries[i * k] = pi;
            entries[i * k + i] = 1.0 - pi;
        }
        Ok(TransitionMatrix { pi, k, entries })
    }

    pub fn pi(&self) -> f64 {
        self.pi
    }

    pub fn states(&self) -> usize {
        self.k
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.k + to]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    /// Dense matrix product `self · other` as a row-major vector.
    pub fn compose(&self, other: &TransitionMatrix) -> Vec<f64> {
        assert_eq!(self.k, other.k, "state counts differ");
        let k = self.k;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for m in 0..k {
                let a = self.get(i, m);
                if a == 0.0 {
                    continue;
                }
                for j in 0..k {
                    out[i * k + j] += a * other.get(m, j);
                }
            }
        }
        out
    }
}

/// Shorthand for [`TransitionMatrix::new`].
pub fn transition_matrix(pi: f64, k: usize) -> Result<TransitionMatrix> {
    TransitionMatrix::new(pi, k)
}

/// A draw from the corruption marginal used by the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSample {
    pub corrupted: EntityInstance,
    pub pi: f64,
    /// Leaves masked by the independent step, before the one extra mask.
    pub n_before: usize,
    /// Leaf indices that are Masked in `corrupted`, ascending.
    pub masked: Vec<usize>,
    pub weight: f64,
    pub d_eff: usize,
}

/// Loss weight `D (1 - n/D) / ((1 - pi) (n + 1))`.
///
/// Draws that mask more leaves than `pi` would predict get a smaller weight.
pub fn loss_weight(d_eff: usize, n_before: usize, pi: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi) {
        return Err(Error::invalid(format!("loss weight needs 0 <= pi < 1, got {pi}")));
    }
    if n_before >= d_eff {
        return Err(Error::invalid(format!("n_before {n_before} must be below d_eff {d_eff}")));
    }
    let d = d_eff as f64;
    let n = n_before as f64;
    Ok(d * (1.0 - n / d) / ((1.0 - pi) * (n + 1.0)))
}

/// The `beta`-free factor `D - N` of the total forward jump rate.
pub fn total_rate_proportion(d_eff: usize, n_masked: usize) -> usize {
    d_eff.saturating_sub(n_masked)
}

fn eligible_leaves(entity: &EntityInstance) -> Result<Vec<usize>> {
    let mut eligible = Vec::with_capacity(entity.cells.len());
    for (i, c) in entity.cells.iter().enumerate() {
        match c {
            Cell::Present(_) => eligible.push(i),
            Cell::Missing => {}
            Cell::Masked => return Err(Error::invalid("corrupt expects an entity without Masked leaves")),
        }
    }
    if eligible.is_empty() {
        return Err(Error::data("entity has no non-Missing leaves"));
    }
    Ok(eligible)
}

/// Sample a corrupted entity: mask each present leaf independently with
/// probability `pi`, redraw if everything got masked, then mask one more leaf
/// chosen uniformly among the survivors.
pub fn corrupt<R: Rng + ?Sized>(entity: &EntityInstance, pi: f64, rng: &mut R) -> Result<CorruptionSample> {
    if !(0.0..1.0).contains(&pi) {
        return Err(Error::invalid(format!("corrupt needs 0 <= pi < 1, got {pi}")));
    }
    let eligible = eligible_leaves(entity)?;
    let d_eff = eligible.len();
    // Drawing the count from the binomial conditioned on `n < d_eff` and then
    // a uniform subset matches the redraw loop in distribution, but stays
    // cheap when `pi` is within a hair of 1.
    let n_before = truncated_binomial(d_eff, pi, rng);
    let mut hit = vec![false; d_eff];
    for j in sample_indices(rng, d_eff, n_before + 1) {
        hit[j] = true;
    }

    let mut corrupted = entity.clone();
    let mut masked = Vec::with_capacity(n_before + 1);
    for (j, &leaf) in eligible.iter().enumerate() {
        if hit[j] {
            corrupted.cells[leaf] = Cell::Masked;
            masked.push(leaf);
        }
    }
    let weight = loss_weight(d_eff, n_before, pi)?;
    Ok(CorruptionSample { corrupted, pi, n_before, masked, weight, d_eff })
}

/// Binomial(`d`, `pi`) count conditioned on being below `d`, by inversion.
fn truncated_binomial<R: Rng + ?Sized>(d: usize, pi: f64, rng: &mut R) -> usize {
    let (ln_p, ln_q) = (pi.ln(), (-pi).ln_1p());
    let mut ln_choose = 0.0;
    let logs: Vec<f64> = (0..d)
        .map(|n| {
            if n > 0 {
                ln_choose += ((d - n + 1) as f64).ln() - (n as f64).ln();
            }
            let t = n as f64;
            let head = if n == 0 { 0.0 } else { t * ln_p };
            ln_choose + head + (d as f64 - t) * ln_q
        })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mut u = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (n, p) in probs.iter().enumerate() {
        if u < *p {
            return n;
        }
        u -= p;
    }
    d - 1
}

/// Fixed-rate masking used by the masked-modeling ablation: i.i.d. masks at
/// `rate`, redrawn when nothing is masked or (for `D_eff > 1`) everything is.
/// The weight is 1.
pub fn corrupt_fixed_rate<R: Rng + ?Sized>(entity: &EntityInstance, rate: f64, rng: &mut R) -> Result<CorruptionSample> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("fixed masking rate must lie in (0, 1), got {rate}")));
    }
    let eligible = eligible_leaves(entity)?;
    let d_eff = eligible.len();
    let hit = loop {
        let hit: Vec<bool> = (0..d_eff).map(|_| rng.gen::<f64>() < rate).collect();
        let n = hit.iter().filter(|&&h| h).count();
        if n > 0 && (n < d_eff || d_eff == 1) {
            break hit;
        }
    };
    let mut corrupted = entity.clone();
    let mut masked = Vec::new();
    for (j, &leaf) in eligible.iter().enumerate() {
        if hit[j] {
            corrupted.cells[leaf] = Cell::Masked;
            masked.push(leaf);
        }
    }
    let n_before = masked.len() - 1;
    Ok(CorruptionSample { corrupted, pi: rate, n_before, masked, weight: 1.0, d_eff })
}

/// Mask a uniformly random subset of `count` non-Missing leaves.
pub fn mask_random_subset<R: Rng + ?Sized>(entity: &EntityInstance, count: usize, rng: &mut R) -> Result<EntityInstance> {
    let eligible = eligible_leaves(entity)?;
    let count = count.clamp(1, eligible.len());
    let mut out = entity.clone();
    for j in sample_indices(rng, eligible.len(), count) {
        out.cells[eligible[j]] = Cell::Masked;
    }
    Ok(out)
}
