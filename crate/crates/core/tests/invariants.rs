//! Randomized invariant checks over the routing, metric, and tensor APIs.

use moe_ffd_core::gating::{moe_loss, topk_gate};
use moe_ffd_core::metrics::{auc, eer, ScoredBatch};
use moe_ffd_core::tensor::Tensor;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, 2..8)
}

proptest! {
    #[test]
    fn topk_weights_form_a_sparse_distribution(l in logits(), k in 1usize..8) {
        let k = k.min(l.len());
        let d = topk_gate(&l, &l, k).unwrap();
        let nonzero = d.weights.iter().filter(|&&w| w > 0.0).count();
        prop_assert_eq!(nonzero, k);
        let sum: f64 = d.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn topk_weights_ignore_logit_shifts(l in logits(), k in 1usize..8, c in -50.0..50.0f64) {
        let k = k.min(l.len());
        let base = topk_gate(&l, &l, k).unwrap();
        let shifted_l: Vec<f64> = l.iter().map(|v| v + c).collect();
        let shifted = topk_gate(&shifted_l, &shifted_l, k).unwrap();
        prop_assert_eq!(&base.selected, &shifted.selected);
        for (a, b) in base.weights.iter().zip(&shifted.weights) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn moe_loss_is_nonnegative_and_scale_invariant(
        imp in prop::collection::vec(0.01..100.0f64, 1..8),
        c in 0.01..100.0f64,
    ) {
        let base = moe_loss(&imp).unwrap();
        prop_assert!(base >= 0.0);
        let scaled: Vec<f64> = imp.iter().map(|v| v * c).collect();
        prop_assert!((moe_loss(&scaled).unwrap() - base).abs() <= 1e-9 * (1.0 + base));
    }

    #[test]
    fn moe_loss_vanishes_on_uniform_importance(v in 0.01..100.0f64, n in 1usize..8) {
        // the mean of n copies of v rounds, so allow roundoff-level slack
        prop_assert!(moe_loss(&vec![v; n]).unwrap().abs() <= 1e-25);
    }

    #[test]
    fn auc_complements_under_label_flip(
        scores in prop::collection::vec(-10.0..10.0f64, 2..40),
        split in 1usize..39,
    ) {
        prop_assume!(split < scores.len());
        let labels: Vec<usize> = (0..scores.len()).map(|i| usize::from(i >= split)).collect();
        let flipped: Vec<usize> = labels.iter().map(|&l| 1 - l).collect();
        let a = auc(&ScoredBatch::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let b = auc(&ScoredBatch::new(scores.clone(), flipped).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() <= 1e-12);
        let e = eer(&ScoredBatch::new(scores, labels).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn tensor_bytes_round_trip(data in prop::collection::vec(-1e6..1e6f64, 1..64)) {
        let t = Tensor::new(vec![data.len()], data).unwrap();
        let back = Tensor::<f64>::from_le_bytes(vec![t.len()], &t.to_le_bytes()).unwrap();
        prop_assert_eq!(t, back);
    }

    #[test]
    fn transpose_is_an_involution(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = moe_ffd_core::rng::Stream::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        prop_assert_eq!(t.transpose2().unwrap().transpose2().unwrap(), t);
    }
}
