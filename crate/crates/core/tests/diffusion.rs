use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparse_mdm::diffusion::{
    forward_mask, mdm_loss, posterior_unmask_dist, reverse_step_token, MaskedSequence, Vocabulary,
};
use sparse_mdm::sparse::{register_positions, to_dense, to_sparse};

fn vocab() -> Vocabulary {
    Vocabulary::new(8).unwrap()
}

fn masked_seq() -> impl Strategy<Value = MaskedSequence> {
    prop::collection::vec(prop::option::weighted(0.6, 0u32..8), 0..40).prop_map(|v| {
        let vocab = vocab();
        MaskedSequence::new(vocab, v.into_iter().map(|t| t.unwrap_or(vocab.mask_id)).collect()).unwrap()
    })
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |w| {
        let sum: f64 = w.iter().sum();
        (sum > 1e-3).then(|| w.iter().map(|x| x / sum).collect())
    })
}

proptest! {
    #[test]
    fn sparse_roundtrip(x in masked_seq(), regs in 0usize..5) {
        let sp = to_sparse(&x, regs);
        prop_assert_eq!(sp.clean.len() + sp.masked_positions().len(), x.len());
        prop_assert_eq!(sp.input_size(3), x.len() - x.mask_count() + 3 + regs);
        prop_assert_eq!(to_dense(&sp, vocab()).unwrap(), x);
    }

    #[test]
    fn registers_sit_after_the_sequence(s in 0usize..20, l in 0usize..50, m in 0usize..10) {
        let r = register_positions(s, l, m);
        prop_assert_eq!(r, (s + l..s + l + m).collect::<Vec<_>>());
    }

    #[test]
    fn forward_mask_only_masks(x in masked_seq(), t in 0.0f64..=1.0, seed in any::<u64>()) {
        let vocab = vocab();
        let clean = MaskedSequence::new(
            vocab,
            x.tokens().iter().map(|&id| if id == vocab.mask_id { 3 } else { id }).collect(),
        ).unwrap();
        let xt = forward_mask(&clean, t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in clean.tokens().iter().zip(xt.tokens()) {
            prop_assert!(a == b || *b == vocab.mask_id);
        }
        if !xt.is_clean() {
            prop_assert!(forward_mask(&xt, t, &mut ChaCha8Rng::seed_from_u64(seed)).is_err());
        }
    }

    #[test]
    fn posterior_is_normalized(pred in distribution(8), t in 0.01f64..=1.0, frac in 0.0f64..1.0) {
        let s = t * frac;
        let d = posterior_unmask_dist(&pred, t, s).unwrap();
        prop_assert!((d.total() - 1.0).abs() < 1e-12);
        prop_assert!((d.mask_prob - s / t).abs() < 1e-15);
        for (p, q) in pred.iter().zip(&d.token_probs) {
            prop_assert!((q - p * (t - s) / t).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_at_zero_never_stays_masked(pred in distribution(8), t in 0.01f64..=1.0, seed in any::<u64>()) {
        let d = posterior_unmask_dist(&pred, t, 0.0).unwrap();
        prop_assert_eq!(d.mask_prob, 0.0);
        let vocab = vocab();
        let tok = reverse_step_token(vocab.mask_id, &d, &vocab, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(vocab.is_ordinary(tok));
        prop_assert!(pred[tok as usize] > 0.0);
    }

    #[test]
    fn clean_tokens_are_absorbing(tok in 0u32..8, pred in distribution(8), seed in any::<u64>()) {
        let d = posterior_unmask_dist(&pred, 0.5, 0.25).unwrap();
        let vocab = vocab();
        prop_assert_eq!(reverse_step_token(tok, &d, &vocab, &mut ChaCha8Rng::seed_from_u64(seed)), tok);
    }

    #[test]
    fn loss_falls_as_target_logit_rises(
        logits in prop::collection::vec(-4.0f64..4.0, 6),
        target in 0u32..6,
        bump in 0.01f64..3.0,
        t in 0.05f64..=1.0,
    ) {
        let base = Array2::from_shape_vec((1, 6), logits.clone()).unwrap();
        let mut raised = base.clone();
        raised[[0, target as usize]] += bump;
        let a = mdm_loss(base.view(), &[target], t).unwrap().value;
        let b = mdm_loss(raised.view(), &[target], t).unwrap().value;
        prop_assert!(b < a);
        prop_assert!(b > 0.0);
    }

    #[test]
    fn loss_scales_with_inverse_time(logits in prop::collection::vec(-4.0f64..4.0, 12), t in 0.05f64..=1.0) {
        let x = Array2::from_shape_vec((2, 6), logits).unwrap();
        let at_one = mdm_loss(x.view(), &[1, 4], 1.0).unwrap().value;
        let at_t = mdm_loss(x.view(), &[1, 4], t).unwrap().value;
        prop_assert!((at_t - at_one / t).abs() <= 1e-12 * at_t.abs().max(1.0));
    }
}
