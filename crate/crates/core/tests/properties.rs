use std::collections::BTreeSet;

use creu::cvae_ensemble::{combine, w2_diag_gauss, DiagonalGaussian, EnsembleWeights};
use creu::data_pipeline::{batch_indices, make_cold_start_split, InteractionRecord};
use creu::embedding_store::{freq_bucket, EmbeddingStore};
use creu::synthetic::{self, SyntheticConfig};
use creu::trainer::compute_auc;
use creu::uncertainty::{paide_epistemic, sinkhorn_divergence, weight_entropy, PairwiseDistanceMatrix, PointCloud};
use proptest::collection::vec;
use proptest::prelude::*;

fn records(items: Vec<usize>) -> Vec<InteractionRecord> {
    items
        .into_iter()
        .enumerate()
        .map(|(t, item)| InteractionRecord {
            user_id: t % 7,
            item_id: item,
            user_fields: vec![t % 7],
            item_fields: vec![vec![item]],
            label: (t % 3 == 0) as u8,
            timestamp: t as i64,
        })
        .collect()
}

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

fn cloud(rows: &[Vec<f64>]) -> PointCloud {
    PointCloud::from_rows(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_records(items in vec(0usize..12, 1..400), k in 1usize..6, frac in 0.0f64..0.95) {
        let recs = records(items);
        let split = match make_cold_start_split(&recs, frac, k) {
            Ok(s) => s,
            Err(e) => {
                prop_assert!(matches!(e, creu::Error::EmptySplit(_)), "unexpected error {e}");
                return Ok(());
            }
        };
        let mut seen = BTreeSet::new();
        for (_, part) in split.partitions() {
            for r in part {
                prop_assert!(seen.insert(r.timestamp), "record {} appears twice", r.timestamp);
            }
        }
        prop_assert_eq!(seen.len(), recs.len());

        let old: BTreeSet<usize> = split.old_train.iter().map(|r| r.item_id).collect();
        prop_assert!(old.is_disjoint(&split.new_item_ids));

        for &item in &split.new_item_ids {
            let stamps = |part: &[InteractionRecord]| -> Vec<i64> {
                part.iter().filter(|r| r.item_id == item).map(|r| r.timestamp).collect()
            };
            let groups = [stamps(&split.warm_a), stamps(&split.warm_b), stamps(&split.warm_c), stamps(&split.test)];
            for g in &groups[..3] {
                prop_assert_eq!(g.len(), k);
            }
            for w in groups.windows(2) {
                prop_assert!(w[0].iter().max() < w[1].iter().min());
            }
        }
        prop_assert_eq!(make_cold_start_split(&recs, frac, k).unwrap(), split);
    }

    #[test]
    fn freq_bucket_monotone_and_bounded(a in 0u64..1_000_000, b in 0u64..1_000_000, buckets in 1usize..16) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(freq_bucket(lo, buckets) <= freq_bucket(hi, buckets));
        prop_assert!(freq_bucket(hi, buckets) < buckets);
    }

    #[test]
    fn batch_indices_partition(len in 0usize..500, bs in 1usize..64, seed in any::<u64>()) {
        let batches = batch_indices(len, bs, seed);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn simplex_weights(logits in vec(-30.0f64..30.0, 1..8)) {
        let pi = EnsembleWeights::from_logits(logits).pi();
        prop_assert!(pi.iter().all(|&p| p >= 0.0));
        prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paide_within_bounds(n in 2usize..6, raw in vec(0.01f64..1.0, 6), d in vec(0.0f64..20.0, 36), bump in 0.0f64..5.0, pick in 0usize..36) {
        let pi = simplex(raw[..n].to_vec());
        let mut values: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 0.0 } else { d[i] }).collect();
        let i = paide_epistemic(&PairwiseDistanceMatrix::new(n, values.clone()).unwrap(), &pi).unwrap();
        prop_assert!(i >= 0.0 && i <= weight_entropy(&pi) + 1e-12);
        let (m, k) = ((pick / 6) % n, pick % n);
        if m != k {
            values[m * n + k] += bump;
            let j = paide_epistemic(&PairwiseDistanceMatrix::new(n, values).unwrap(), &pi).unwrap();
            prop_assert!(j >= i - 1e-15);
        }
    }

    #[test]
    fn sinkhorn_divergence_properties(x in vec(vec(-3.0f64..3.0, 2), 1..12), y in vec(vec(-3.0f64..3.0, 2), 1..12)) {
        let (cx, cy) = (cloud(&x), cloud(&y));
        let xy = sinkhorn_divergence(&cx, &cy, 0.15, 10).unwrap();
        let yx = sinkhorn_divergence(&cy, &cx, 0.15, 10).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-9 * (1.0 + xy.abs()));
        prop_assert!(sinkhorn_divergence(&cx, &cx, 0.15, 10).unwrap() <= 1e-9);
    }

    #[test]
    fn combine_in_convex_hull(raw in vec(0.01f64..1.0, 1..5), embs in vec(vec(-5.0f64..5.0, 4), 5)) {
        let n = raw.len();
        let logits: Vec<f64> = raw.iter().map(|x| x.ln()).collect();
        let out = combine(&EnsembleWeights::from_logits(logits), &embs[..n]).unwrap();
        for (j, &v) in out.iter().enumerate() {
            let lo = embs[..n].iter().map(|e| e[j]).fold(f64::INFINITY, f64::min);
            let hi = embs[..n].iter().map(|e| e[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn w2_symmetric_nonnegative(m1 in vec(-5.0f64..5.0, 3), s1 in vec(0.1f64..3.0, 3), m2 in vec(-5.0f64..5.0, 3), s2 in vec(0.1f64..3.0, 3)) {
        let a = DiagonalGaussian::new(m1, s1).unwrap();
        let b = DiagonalGaussian::new(m2, s2).unwrap();
        let ab = w2_diag_gauss(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - w2_diag_gauss(&b, &a).unwrap()).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(w2_diag_gauss(&a, &a).unwrap() == 0.0);
    }

    #[test]
    fn auc_invariant_under_monotone_transform(scores in vec(-4.0f64..4.0, 2..80), seed in any::<u64>()) {
        let labels: Vec<u8> = (0..scores.len()).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = compute_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-2.0 * s).exp())).collect();
        prop_assert!((a - compute_auc(&mapped, &labels).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn store_initialization_reproducible(seed in any::<u64>(), dim in 1usize..12) {
        let cfg = SyntheticConfig { users: 20, items: 10, interactions: 300, min_item_count: 10, ..SyntheticConfig::default() };
        let schema = synthetic::schema(&cfg);
        let a = EmbeddingStore::new(&schema, dim, seed).unwrap();
        let b = EmbeddingStore::new(&schema, dim, seed).unwrap();
        prop_assert_eq!(a.params(), b.params());
    }
}
