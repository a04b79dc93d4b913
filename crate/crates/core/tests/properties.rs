use std::collections::BTreeMap;

use hardboost::boost::{adapt_scale, HardnessStats, WeightTable};
use hardboost::eval::{
    probe_ranks, rank_accuracy, roc_curve, verification_metrics, Ensemble, ScoredPair,
};
use hardboost::margin::{
    forward_logits, margin_logit, softmax, softmax_prob, weighted_exponent_sides, weighted_loss,
    MarginParams, PROB_FLOOR,
};
use hardboost::numeric::{l2_norm, Architecture, EmbeddingModel, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = l2_norm(&v);
    (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
}

fn small_model(seed: u64) -> EmbeddingModel {
    let arch = Architecture {
        input_dim: 4,
        hidden: vec![6, 5],
        embed_dim: 3,
        num_classes: 4,
    };
    EmbeddingModel::init(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #[test]
    fn embeddings_are_unit(seed in 0u64..1000, x in prop::collection::vec(-3.0f64..3.0, 4)) {
        let model = small_model(seed);
        if let Ok(e) = model.embed(&x) {
            prop_assert!((l2_norm(&e) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-80.0f64..80.0, 1..20)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn probabilities_are_clamped(
        seed in 0u64..500,
        n in 1usize..6,
        s in 1.0f64..64.0,
    ) {
        let model = small_model(seed);
        let (centers, _) = model.normalized_centers().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Matrix::zeros(n, 3);
        for i in 0..n {
            let e = model.embed(&[rand::Rng::random_range(&mut rng, -1.0..1.0), 0.3, -0.2, 0.5]).unwrap();
            feats.row_mut(i).copy_from_slice(&e);
        }
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let params = MarginParams::new(1.0, 0.2, 0.2, s).unwrap();
        let rows = forward_logits(&feats, &centers, &labels, &params, &vec![s; n]).unwrap();
        for r in &rows {
            let p = softmax_prob(r);
            prop_assert!((PROB_FLOOR..=1.0).contains(&p));
        }
    }

    /// With M = (1, 0, 0) and unit weights the loss is plain scaled-softmax
    /// cross-entropy, computed here independently from raw cosines.
    #[test]
    fn loss_reduces_to_cross_entropy(
        cosines in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..5),
        s in 1.0f64..40.0,
    ) {
        // Build features/centers realizing the cosines: centers = identity,
        // feature = normalized cosine vector.
        let n = cosines.len();
        let mut feats = Matrix::zeros(n, 3);
        let mut kept = Vec::new();
        for (i, c) in cosines.iter().enumerate() {
            if let Some(u) = unit(c.clone()) {
                feats.row_mut(kept.len()).copy_from_slice(&u);
                kept.push(i);
            }
        }
        prop_assume!(!kept.is_empty());
        let feats = Matrix::from_vec(kept.len(), 3, feats.as_slice()[..kept.len() * 3].to_vec()).unwrap();
        let labels: Vec<usize> = (0..kept.len()).map(|i| i % 3).collect();
        let params = MarginParams::new(1.0, 0.0, 0.0, s).unwrap();
        let rows = forward_logits(&feats, &Matrix::identity(3), &labels, &params, &vec![s; kept.len()]).unwrap();
        let loss = weighted_loss(&rows, &vec![1.0; kept.len()]).unwrap();
        let mut reference = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = feats.row(i).iter().map(|c| s * c).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let p = (z[y] - lse).exp().max(PROB_FLOOR);
            reference -= p.ln();
        }
        reference /= kept.len() as f64;
        prop_assert!((loss - reference).abs() <= 1e-12 * reference.abs().max(1.0), "{loss} vs {reference}");
    }

    #[test]
    fn positive_logit_monotone_in_margins(
        theta in 0.0f64..2.5,
        ma1 in 0.0f64..0.6, ma2 in 0.0f64..0.6,
        mc1 in 0.0f64..0.5, mc2 in 0.0f64..0.5,
        s in 1.0f64..64.0,
    ) {
        let (lo_a, hi_a) = if ma1 <= ma2 { (ma1, ma2) } else { (ma2, ma1) };
        let (lo_c, hi_c) = if mc1 <= mc2 { (mc1, mc2) } else { (mc2, mc1) };
        prop_assume!(theta + hi_a <= std::f64::consts::PI);
        let f = |ma: f64, mc: f64| margin_logit(theta, &MarginParams::new(1.0, ma, mc, s).unwrap(), s, true).unwrap();
        prop_assert!(f(hi_a, lo_c) <= f(lo_a, lo_c));
        prop_assert!(f(lo_a, hi_c) <= f(lo_a, lo_c));
    }

    #[test]
    fn probability_increasing_in_positive_logit(
        negs in prop::collection::vec(-20.0f64..20.0, 1..6),
        a in -20.0f64..20.0,
        delta in 1e-3f64..5.0,
    ) {
        let p = |pos: f64| {
            let mut z = vec![pos];
            z.extend(&negs);
            softmax(&z)[0]
        };
        prop_assert!(p(a + delta) > p(a));
    }

    #[test]
    fn weight_as_margin_identity(
        theta in 0.0f64..2.6,
        d in 0.1f64..5.0,
        ma in 0.0f64..0.5,
        mc in 0.0f64..0.5,
        s in 1.0f64..64.0,
    ) {
        let params = MarginParams::new(1.0, ma, mc, s).unwrap();
        let (lhs, rhs) = weighted_exponent_sides(theta, d, &params).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
    }

    #[test]
    fn update_is_anti_monotone(pa in 1e-12f64..1.0, pb in 1e-12f64..1.0, alpha in 0.01f64..0.5) {
        prop_assume!(pa < pb);
        let t = WeightTable::init([0, 1], alpha).unwrap();
        let u = t.update_weights(&BTreeMap::from([(0, pa), (1, pb)])).unwrap();
        prop_assert!(u.get(0).unwrap() > u.get(1).unwrap());
    }

    #[test]
    fn update_composes(p0 in 1e-6f64..1.0, p in 1e-6f64..1.0, q in 1e-6f64..1.0, alpha in 0.0f64..0.5) {
        // Start from a non-unit weight.
        let t = WeightTable::init([7], alpha).unwrap()
            .update_weights(&BTreeMap::from([(7, p0)])).unwrap();
        let twice = t.update_weights(&BTreeMap::from([(7, p)])).unwrap()
            .update_weights(&BTreeMap::from([(7, q)])).unwrap();
        let once = t.update_weights(&BTreeMap::from([(7, p * q)])).unwrap();
        let (a, b) = (twice.get(7).unwrap(), once.get(7).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
    }

    #[test]
    fn single_update_is_bounded(p in 1e-12f64..1.0, alpha in 0.0f64..0.5) {
        let t = WeightTable::init([0], alpha).unwrap();
        let u = t.update_weights(&BTreeMap::from([(0, p)])).unwrap();
        prop_assert!(u.get(0).unwrap() <= 1e6 * (1.0 + 1e-12));
    }

    #[test]
    fn adapt_scale_range_and_monotone(s in 0.1f64..100.0, a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, y) = (adapt_scale(s, lo), adapt_scale(s, hi));
        prop_assert!(y <= x);
        for v in [x, y] {
            prop_assert!(v >= 0.67 * s - 1e-12 && v <= 1.33 * s + 1e-12);
        }
    }

    #[test]
    fn uniform_weights_are_neutral(n in 1usize..300, batches in 1usize..40, s in 1.0f64..64.0) {
        let mut stats = HardnessStats::new(1.0, 0.0, 0.99, 1.0, 1e-6);
        for _ in 0..batches {
            stats = stats.update_running_stats(&vec![1.0; n]).unwrap();
            let d_hat = stats.normalize_hardness(1.0);
            prop_assert_eq!(d_hat, 0.0);
            prop_assert_eq!(adapt_scale(s, d_hat), s);
        }
    }

    #[test]
    fn tar_monotone_and_ranks_monotone(
        gen in prop::collection::vec(-1.0f64..1.0, 1..10),
        imp in prop::collection::vec(-1.0f64..1.0, 1..10),
    ) {
        let pairs: Vec<ScoredPair> = gen.iter().map(|&s| ScoredPair { score: s, genuine: true })
            .chain(imp.iter().map(|&s| ScoredPair { score: s, genuine: false }))
            .collect();
        let report = verification_metrics(&pairs).unwrap();
        for w in report.tar_at_far.windows(2) {
            prop_assert!(w[0].tar <= w[1].tar);
        }
        let roc = roc_curve(&pairs).unwrap();
        for w in roc.windows(2) {
            prop_assert!(w[0].far <= w[1].far && w[0].tar <= w[1].tar);
        }
    }

    #[test]
    fn rank_accuracy_monotone(ranks in prop::collection::vec(1usize..30, 1..50)) {
        let r = rank_accuracy(&ranks);
        for w in r.rank_accuracy.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn ensemble_score_is_symmetric(
        seed in 0u64..200,
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
        b2 in -1.0f64..1.0,
    ) {
        let e = Ensemble::new(vec![small_model(seed), small_model(seed + 1)], vec![1.0, b2]).unwrap();
        if let (Ok(x), Ok(y)) = (e.ensemble_score(&a, &b), e.ensemble_score(&b, &a)) {
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn probe_ranks_match_sorting_oracle(
        scores in prop::collection::vec(prop::collection::vec(0u8..5, 4), 1..4),
        truth in prop::collection::vec(0usize..4, 1..4),
    ) {
        let n = scores.len().min(truth.len());
        let m: Vec<Vec<f64>> = scores[..n].iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let gallery = vec![0usize, 1, 2, 3];
        let ranks = probe_ranks(&m, &gallery, &truth[..n]).unwrap();
        for i in 0..n {
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&x, &y| m[i][y].total_cmp(&m[i][x]).then(x.cmp(&y)));
            let oracle = order.iter().position(|&c| c == truth[i]).unwrap() + 1;
            prop_assert_eq!(ranks[i], oracle);
        }
    }
}
