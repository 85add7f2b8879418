//! Gaussian-mixture likelihoods for numerical leaves and numeric input embeddings.
//!
//! All values here are in normalized units.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Lower bound on mixture scales.
pub const SCALE_FLOOR: f64 = 1e-3;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mixture of `M` univariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    /// `ln sigma_k`.
    pub log_scales: Vec<f64>,
}

impl GmmParams {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> Result<GmmParams> {
        let m = weights.len();
        if m == 0 || means.len() != m || log_scales.len() != m {
            return Err(Error::invalid("mixture parameter vectors must be non-empty and equally long"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must be a probability vector"));
        }
        if means.iter().chain(&log_scales).any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture means and scales must be finite"));
        }
        Ok(GmmParams { weights, means, log_scales })
    }

    /// Mixture from unnormalized weight logits.
    pub fn from_logits(logits: &[f64], means: Vec<f64>, log_scales: Vec<f64>) -> Result<GmmParams> {
        GmmParams::new(softmax(logits), means, log_scales)
    }

    /// Decode a raw head row `[weight logits | means | scale pre-activations]`
    /// with `sigma = softplus(raw) + SCALE_FLOOR`. With `unit_scale`, the row is
    /// a single mean and the mixture is one unit-variance Gaussian.
    pub fn from_head(raw: &[f64], components: usize, unit_scale: bool) -> GmmParams {
        if unit_scale {
            return GmmParams { weights: vec![1.0], means: vec![raw[0]], log_scales: vec![0.0] };
        }
        let m = components;
        let weights = softmax(&raw[..m]);
        let means = raw[m..2 * m].to_vec();
        let log_scales = raw[2 * m..3 * m].iter().map(|&r| (softplus(r) + SCALE_FLOOR).ln()).collect();
        GmmParams { weights, means, log_scales }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.log_scales[k].exp()
    }

    /// Per-component `ln w_k + ln N(x; mu_k, sigma_k)`.
    fn joint_log_terms(&self, x: f64) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let z = (x - self.means[k]) / self.scale(k);
                self.weights[k].ln() - 0.5 * z * z - self.log_scales[k] - HALF_LN_2PI
            })
            .collect()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        log_sum_exp(&self.joint_log_terms(x))
    }
}

/// Negative log density `-ln sum_k w_k N(x; mu_k, sigma_k)`.
pub fn gmm_nll(params: &GmmParams, x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::numerical("gmm_nll needs a finite target"));
    }
    let v = -params.log_density(x);
    if !v.is_finite() {
        return Err(Error::numerical("gmm_nll is not finite"));
    }
    Ok(v)
}

/// Gradients of [`gmm_nll`] with respect to the weight logits, means and log scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGrad {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

/// NLL and its analytic gradient. The weight gradient is with respect to the
/// logits whose softmax gives `params.weights`.
pub fn gmm_nll_grad(params: &GmmParams, x: f64) -> Result<(f64, GmmGrad)> {
    let nll = gmm_nll(params, x)?;
    let resp = softmax(&params.joint_log_terms(x));
    let m = params.components();
    let mut g = GmmGrad { logits: vec![0.0; m], means: vec![0.0; m], log_scales: vec![0.0; m] };
    for k in 0..m {
        let s = params.scale(k);
        let z = (x - params.means[k]) / s;
        g.logits[k] = params.weights[k] - resp[k];
        g.means[k] = -resp[k] * z / s;
        g.log_scales[k] = -resp[k] * (z * z - 1.0);
    }
    Ok((nll, g))
}

/// Draw a component by weight, then a Gaussian value from it.
pub fn gmm_sample<R: Rng + ?Sized>(params: &GmmParams, rng: &mut R) -> f64 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut k = params.components() - 1;
    for (i, w) in params.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let normal = Normal::new(params.means[k], params.scale(k)).expect("finite scale");
    normal.sample(rng)
}

/// Weighted mean of the component means.
pub fn gmm_point(params: &GmmParams) -> f64 {
    params.weights.iter().zip(&params.means).map(|(w, m)| w * m).sum()
}

/// Unit-variance single Gaussian: returns `(nll, d nll / d mu)` where the
/// nll is `(mu - x)^2 / 2 + ln(2 pi) / 2`.
pub fn mse_mode(params: &GmmParams, x: f64) -> Result<(f64, f64)> {
    if params.components() != 1 || params.log_scales[0] != 0.0 {
        return Err(Error::invalid("squared-error mode needs one component with a frozen unit scale"));
    }
    let (nll, g) = gmm_nll_grad(params, x)?;
    Ok((nll, g.means[0]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Periodic,
    Dice,
}

/// Numeric input embedding settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericEmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    /// Periodic frequencies, `dim / 2` of them.
    pub frequencies: Vec<f64>,
    pub dice_range: (f64, f64),
}

impl NumericEmbeddingConfig {
    pub fn periodic(frequencies: Vec<f64>) -> Self {
        NumericEmbeddingConfig {
            kind: EmbeddingKind::Periodic,
            dim: frequencies.len() * 2,
            frequencies,
            dice_range: (0.0, 1.0),
        }
    }

    pub fn dice(dim: usize, range: (f64, f64)) -> Self {
        NumericEmbeddingConfig { kind: EmbeddingKind::Dice, dim, frequencies: Vec::new(), dice_range: range }
    }
}

/// Embed a scalar. Periodic: interleaved `[sin(f_i x), cos(f_i x)]`. DICE: the
/// value sets an angle `theta = pi (x - lo) / (hi - lo)` and the embedding is
/// the unit vector `cos(theta) u + sin(theta) v` for two fixed orthonormal
/// directions, so cosine similarity is `cos(theta_x - theta_y)`.
pub fn embed_numeric(x: f64, cfg: &NumericEmbeddingConfig) -> Vec<f64> {
    match cfg.kind {
        EmbeddingKind::Periodic => {
            let mut out = Vec::with_capacity(cfg.dim);
            for f in &cfg.frequencies {
                out.push((f * x).sin());
                out.push((f * x).cos());
            }
            out
        }
        EmbeddingKind::Dice => dice_features(x, cfg.dim, cfg.dice_range),
    }
}

pub(crate) fn dice_features(x: f64, dim: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let theta = PI * (x - lo) / (hi - lo);
    let pairs = (dim / 2).max(1) as f64;
    let norm = pairs.sqrt().recip();
    (0..dim)
        .map(|i| {
            if i % 2 == 0 {
                theta.cos() * norm
            } else {
                theta.sin() * norm
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single(mu: f64, log_s: f64) -> GmmParams {
        GmmParams::new(vec![1.0], vec![mu], vec![log_s]).unwrap()
    }

    #[test]
    fn nll_examples() {
        assert!((gmm_nll(&single(0.0, 0.0), 0.0).unwrap() - 0.918939).abs() < 1e-6);
        let two = GmmParams::new(vec![0.3, 0.7], vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert!((gmm_nll(&two, 1.7).unwrap() - gmm_nll(&single(0.0, 0.0), 1.7).unwrap()).abs() < 1e-12);
        let bimodal = GmmParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!((gmm_nll(&bimodal, 0.0).unwrap() - 1.418939).abs() < 1e-6);
        assert!(gmm_nll(&bimodal, f64::NAN).is_err());
    }

    #[test]
    fn point_examples() {
        assert_eq!(gmm_point(&single(2.5, 0.0)), 2.5);
        let sym = GmmParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(gmm_point(&sym), 0.0);
        let p = GmmParams::new(vec![0.2, 0.8], vec![0.0, 10.0], vec![0.0, 0.0]).unwrap();
        assert!((gmm_point(&p) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn mse_mode_examples() {
        let (v, g) = mse_mode(&single(0.0, 0.0), 0.0).unwrap();
        assert!((v - HALF_LN_2PI).abs() < 1e-15);
        assert_eq!(g, 0.0);
        let (v, g) = mse_mode(&single(1.0, 0.0), 0.0).unwrap();
        assert!((v - 0.5 - HALF_LN_2PI).abs() < 1e-15);
        assert!((g - 1.0).abs() < 1e-15);
        assert!(mse_mode(&single(1.0, 0.3), 0.0).is_err());
    }

    #[test]
    fn degenerate_component_concentrates() {
        let p = single(3.0, SCALE_FLOOR.ln());
        let mut rng = seeded(11);
        let xs: Vec<f64> = (0..10_000).map(|_| gmm_sample(&p, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((mean - 3.0).abs() < 1e-3);
        assert!(sd <= 2.0 * SCALE_FLOOR, "{sd}");
    }

    #[test]
    fn bimodal_samples() {
        let p = GmmParams::new(vec![0.5, 0.5], vec![-1.0, 1.0], vec![0.1f64.ln(); 2]).unwrap();
        let mut rng = seeded(12);
        let xs: Vec<f64> = (0..10_000).map(|_| gmm_sample(&p, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let middle = xs.iter().filter(|x| x.abs() <= 0.5).count() as f64 / xs.len() as f64;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!(middle < 0.05);
        let mut again = seeded(12);
        assert_eq!(gmm_sample(&p, &mut again), xs[0]);
    }

    #[test]
    fn head_decoding_respects_floor() {
        let p = GmmParams::from_head(&[0.0, 0.0, -1.0, 1.0, -80.0, 2.0], 2, false);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.scale(0) >= SCALE_FLOOR && p.scale(0) < 1.01 * SCALE_FLOOR);
        let u = GmmParams::from_head(&[0.25], 1, true);
        assert_eq!(u, single(0.25, 0.0));
    }

    #[test]
    fn periodic_embedding_at_zero() {
        let cfg = NumericEmbeddingConfig::periodic(vec![0.3, 1.7, 9.0]);
        let e = embed_numeric(0.0, &cfg);
        assert_eq!(e.len(), 6);
        for pair in e.chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
        assert_eq!(embed_numeric(0.42, &cfg), embed_numeric(0.42, &cfg));
    }

    #[test]
    fn dice_similarity_decreases_with_distance() {
        let cfg = NumericEmbeddingConfig::dice(8, (0.0, 1.0));
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut rng = seeded(13);
        for _ in 0..100 {
            let mut t: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            t.sort_by(f64::total_cmp);
            if t[1] - t[0] < 1e-6 || t[2] - t[1] < 1e-6 {
                continue;
            }
            let (x, y, z) = (embed_numeric(t[0], &cfg), embed_numeric(t[1], &cfg), embed_numeric(t[2], &cfg));
            assert!(cos(&x, &y) > cos(&x, &z));
        }
    }
}
