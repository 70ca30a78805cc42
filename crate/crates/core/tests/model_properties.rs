use memedit_core::classifier::ScopeExample;
use memedit_core::math::{kl_from_log_probs, log_softmax};
use memedit_core::metrics::slot_kl;
use memedit_core::predictor::PredictorExample;
use memedit_core::text::{EncoderParams, SEP};
use memedit_core::{ScopeClassifier, ScopeVariant, SeqPredictor, TokenSeq};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 16;
const DIM: usize = 6;

fn ids(max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(SEP + 1..VOCAB as u32, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_deterministic_and_order_free(seed in any::<u64>(), seq in ids(10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::random(VOCAB, DIM, &mut rng);
        let a = enc.encode(&seq);
        let b = enc.encode(&seq);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut shuffled = seq.clone();
        shuffled.shuffle(&mut rng);
        for (x, y) in a.iter().zip(enc.encode(&shuffled).iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn embed_scores_are_symmetric(seed in any::<u64>(), z in ids(8), x in ids(8)) {
        let cls = ScopeClassifier::new(ScopeVariant::Embed, VOCAB, DIM, &mut ChaCha8Rng::seed_from_u64(seed));
        let zx = cls.score(&z, &x).log_value();
        let xz = cls.score(&x, &z).log_value();
        prop_assert!((zx - xz).abs() <= 1e-12 * (1.0 + zx.abs()));
    }

    #[test]
    fn scores_are_probabilities(seed in any::<u64>(), z in ids(8), x in ids(8), cross in any::<bool>()) {
        let variant = if cross { ScopeVariant::Cross } else { ScopeVariant::Embed };
        let cls = ScopeClassifier::new(variant, VOCAB, DIM, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = cls.score(&z, &x);
        prop_assert!(s.log_value().is_finite() && s.log_value() <= 0.0);
        prop_assert!(s.value() > 0.0 && s.value() <= 1.0);
    }

    #[test]
    fn bce_is_non_negative(seed in any::<u64>(), pairs in prop::collection::vec((ids(6), ids(6), any::<bool>()), 1..8)) {
        let cls = ScopeClassifier::new(ScopeVariant::Cross, VOCAB, DIM, &mut ChaCha8Rng::seed_from_u64(seed));
        let batch: Vec<ScopeExample> = pairs
            .into_iter()
            .map(|(d, i, label)| ScopeExample { descriptor: TokenSeq::new(d), input: TokenSeq::new(i), label })
            .collect();
        let (loss, grad) = cls.bce_loss(&batch).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        prop_assert!(memedit_core::optim::Parameters::all_finite(&grad));
    }

    #[test]
    fn slot_distributions_normalize(seed in any::<u64>(), ctx in ids(10)) {
        let p = SeqPredictor::new(VOCAB, DIM, 3, &mut ChaCha8Rng::seed_from_u64(seed));
        let dists = p.slot_log_probs(&TokenSeq::new(ctx));
        prop_assert_eq!(dists.len(), 3);
        for d in dists {
            let total: f64 = d.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decoding_agrees_with_scoring(seed in any::<u64>(), ctx in ids(10)) {
        let p = SeqPredictor::new(VOCAB, DIM, 2, &mut ChaCha8Rng::seed_from_u64(seed));
        let ctx = TokenSeq::new(ctx);
        let pred = p.predict(&ctx);
        for (slot, dist) in p.slot_log_probs(&ctx).iter().enumerate() {
            let best = dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = dist.iter().position(|&l| l == best).unwrap() as u32;
            prop_assert_eq!(pred.slot_ids[slot], first);
            prop_assert_eq!(pred.slot_log_probs[slot].to_bits(), best.to_bits());
        }
    }

    #[test]
    fn kl_is_non_negative(seed in any::<u64>(), ctx in ids(10)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = SeqPredictor::new(VOCAB, DIM, 2, &mut rng);
        let b = SeqPredictor::new(VOCAB, DIM, 2, &mut rng);
        let ctx = TokenSeq::new(ctx);
        let (pa, pb) = (a.slot_log_probs(&ctx), b.slot_log_probs(&ctx));
        prop_assert!(slot_kl(&pa, &pb) >= 0.0);
        prop_assert_eq!(slot_kl(&pa, &pa), 0.0);
    }

    #[test]
    fn kl_of_logits_matches_direct_sum(p in prop::collection::vec(-5.0f64..5.0, 2..9), q in prop::collection::vec(-5.0f64..5.0, 2..9)) {
        let n = p.len().min(q.len());
        let (lp, lq) = (log_softmax(&p[..n]), log_softmax(&q[..n]));
        let direct: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
        prop_assert!((kl_from_log_probs(&lp, &lq) - direct).abs() < 1e-12);
    }

    #[test]
    fn unlikelihood_without_negatives_is_nll(seed in any::<u64>(), ctx in ids(8), tgt in ids(3)) {
        let p = SeqPredictor::new(VOCAB, DIM, 2, &mut ChaCha8Rng::seed_from_u64(seed));
        let tgt = TokenSeq::new(tgt.into_iter().take(2).collect());
        let batch = [PredictorExample { context: TokenSeq::new(ctx), target: tgt, negative: None }];
        let (a, _) = p.nll_loss(&batch).unwrap();
        let (b, _) = p.unlikelihood_loss(&batch, 1.0).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}
