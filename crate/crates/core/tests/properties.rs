use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viseme_core::alignment::VisemeClass;
use viseme_core::dsp::{design_butter_bandpass, design_notch, filter_zero_phase};
use viseme_core::eval::{binary_auc, macro_ovr_auc, topk_accuracy};
use viseme_core::reconstruct::edit_distance;

/// Plain exponential recursion; fine for the short inputs used here.
fn brute_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_distance(ra, rb) + usize::from(x != y);
            sub.min(brute_distance(ra, b) + 1).min(brute_distance(a, rb) + 1)
        }
    }
}

fn short_seq() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=6)
}

proptest! {
    #[test]
    fn edit_distance_matches_brute_force(a in short_seq(), b in short_seq()) {
        prop_assert_eq!(edit_distance(&a, &b), brute_distance(&a, &b));
    }

    #[test]
    fn edit_distance_is_a_metric(a in short_seq(), b in short_seq(), c in short_seq()) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b) == 0, a == b);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn zero_phase_filtering_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 200),
        y in prop::collection::vec(-10.0f64..10.0, 200),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        for f in [design_butter_bandpass(4, 30.0, 200.0, 1000.0).unwrap(), design_notch(60.0, 30.0, 1000.0).unwrap()] {
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let fx = filter_zero_phase(&f, &x).unwrap();
            let fy = filter_zero_phase(&f, &y).unwrap();
            let fm = filter_zero_phase(&f, &mix).unwrap();
            for i in 0..mix.len() {
                let want = a * fx[i] + b * fy[i];
                prop_assert!((fm[i] - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", fm[i], want);
            }
        }
    }

    #[test]
    fn auc_is_invariant_to_monotone_transforms(
        pos in prop::collection::vec(-5.0f64..5.0, 1..20),
        neg in prop::collection::vec(-5.0f64..5.0, 1..20),
    ) {
        let warp = |v: &[f64]| v.iter().map(|x| x.exp() * 3.0 + 1.0).collect::<Vec<_>>();
        let a = binary_auc(&pos, &neg).unwrap();
        prop_assert_eq!(a, binary_auc(&warp(&pos), &warp(&neg)).unwrap());
        let flipped = binary_auc(&neg, &pos).unwrap();
        prop_assert!((a + flipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_never_decreases(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<Vec<f32>> = (0..30).map(|_| (0..15).map(|_| rng.random::<f32>()).collect()).collect();
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..15)).collect();
        let mut last = 0.0;
        for k in 1..=15 {
            let acc = topk_accuracy(&logits, &labels, k).unwrap();
            prop_assert!(acc >= last);
            last = acc;
        }
        prop_assert_eq!(last, 100.0);
    }
}

#[test]
fn random_scores_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 15_000;
    let scores: Vec<Vec<f32>> = (0..n).map(|_| (0..VisemeClass::COUNT).map(|_| rng.random::<f32>()).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..VisemeClass::COUNT)).collect();
    let auc = macro_ovr_auc(&scores, &labels).unwrap();
    assert!((auc - 50.0).abs() <= 2.0, "{auc}");
}

#[test]
fn perfect_scores_give_full_auc() {
    let labels: Vec<usize> = (0..60).map(|i| i % 15).collect();
    let scores: Vec<Vec<f32>> = labels
        .iter()
        .map(|&l| (0..15).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    assert_eq!(macro_ovr_auc(&scores, &labels).unwrap(), 100.0);
}
