use proptest::prelude::*;
use uragc_core::OptionDistribution;
use uragc_engine::evaluation::{apply_wrong_aware, SwapRule};
use uragc_engine::strategy::{replug_mixture, replug_weights};

fn dist(k: usize) -> impl Strategy<Value = OptionDistribution> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|w| OptionDistribution::normalized(w).unwrap())
}

proptest! {
    #[test]
    fn replug_is_a_convex_combination(
        (sims, dists) in (1usize..8).prop_flat_map(|n| (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(dist(4), n),
        ))
    ) {
        let out = replug_mixture(&sims, &dists).unwrap();
        let w = replug_weights(&sims);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in 0..4 {
            let lo = dists.iter().map(|d| d.probs()[c]).fold(f64::INFINITY, f64::min);
            let hi = dists.iter().map(|d| d.probs()[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.probs()[c] >= lo - 1e-12 && out.probs()[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn wrong_aware_is_a_transposition(p in prop::collection::vec(0.0f64..1.0, 2..8)) {
        for rule in [SwapRule::MaxMin, SwapRule::MaxSecond] {
            let out = apply_wrong_aware(&p, rule);
            let moved: Vec<usize> = (0..p.len()).filter(|&i| out[i] != p[i]).collect();
            prop_assert!(moved.is_empty() || moved.len() == 2);
            let mut a = p.clone();
            let mut b = out.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let top = p.iter().position(|&x| x == max).unwrap();
            if rule == SwapRule::MaxMin {
                let min = p.iter().copied().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(out[top], min);
            }
        }
    }
}
