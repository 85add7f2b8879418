use proptest::prelude::*;

use entdiff::numeric::{gmm_nll, gmm_sample, GmmParams};
use entdiff::rng::seeded;

fn mixture() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..6).prop_flat_map(|m| {
        (
            prop::collection::vec(-3.0f64..3.0, m),
            prop::collection::vec(-5.0f64..5.0, m),
            prop::collection::vec(-2.0f64..1.0, m),
        )
    })
}

proptest! {
    #[test]
    fn nll_ignores_component_order((logits, means, scales) in mixture(), x in -8.0f64..8.0, seed in any::<u64>()) {
        let base = GmmParams::from_logits(&logits, means.clone(), scales.clone()).unwrap();
        let mut perm: Vec<usize> = (0..logits.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut seeded(seed));
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let shuffled = GmmParams::from_logits(&pick(&logits), pick(&means), pick(&scales)).unwrap();
        let (a, b) = (gmm_nll(&base, x).unwrap(), gmm_nll(&shuffled, x).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn unit_gaussian_nll_is_minimized_at_the_value(x in -10.0f64..10.0, offset in 1e-3f64..3.0) {
        let at = |mu: f64| gmm_nll(&GmmParams::new(vec![1.0], vec![mu], vec![0.0]).unwrap(), x).unwrap();
        prop_assert!(at(x) < at(x + offset));
        prop_assert!(at(x) < at(x - offset));
        prop_assert!((at(x) - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }
}

#[test]
fn sample_nll_matches_integrated_entropy() {
    let params = GmmParams::new(vec![0.3, 0.7], vec![-1.0, 2.0], vec![0.5f64.ln(), 0.0]).unwrap();
    // Differential entropy by the midpoint rule on a wide grid.
    let (lo, hi, steps) = (-12.0, 14.0, 200_000);
    let h = (hi - lo) / steps as f64;
    let entropy: f64 = (0..steps)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let ln_p = params.log_density(x);
            -ln_p.exp() * ln_p * h
        })
        .sum();
    let mut rng = seeded(5);
    let n = 100_000;
    let empirical = (0..n).map(|_| gmm_nll(&params, gmm_sample(&params, &mut rng)).unwrap()).sum::<f64>() / n as f64;
    assert!((empirical / entropy - 1.0).abs() <= 0.02, "empirical {empirical} vs entropy {entropy}");
}
