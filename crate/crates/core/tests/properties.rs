use std::collections::BTreeMap;

use eas_core::headid::{aggregate, instance_contributions, jaccard, HeadId};
use eas_core::metrics::{rouge_l_f1, wilcoxon_one_sided};
use eas_core::model::{AttentionCapture, ModelConfig, RowKind, Transformer};
use eas_core::rgtrain::{attention_fraction, rg_weight, smooth_labels};
use eas_core::synthcorpus::Stage;
use eas_core::tokenizer::TokenRange;
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn signed_rank_oracle(d: &[f64]) -> f64 {
    let nz: Vec<f64> = d.iter().copied().filter(|&x| x != 0.0).collect();
    let n = nz.len();
    let mut mags: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rank = |m: f64| {
        let pos: Vec<usize> = (0..n).filter(|&i| mags[i] == m).collect();
        pos.iter().map(|&i| (i + 1) as f64).sum::<f64>() / pos.len() as f64
    };
    let ranks: Vec<f64> = nz.iter().map(|x| rank(x.abs())).collect();
    let observed: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut hits = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

fn argmax_first(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for i in 0..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

fn random_capture(seed: &[f64], nl: usize, nh: usize, n: usize, generated: usize) -> AttentionCapture {
    let mut data = Array4::zeros((nl, nh, n, n));
    let mut k = 0;
    for v in data.iter_mut() {
        *v = seed[k % seed.len()] * (1.0 + k as f64 * 1e-3).sin().abs();
        k += 1;
    }
    let mut kinds = vec![RowKind::Prompt; n - generated];
    kinds.extend(vec![RowKind::Generated; generated]);
    AttentionCapture { data, row_kinds: kinds }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wilcoxon_matches_sign_flip_enumeration(d in prop::collection::vec(-5i32..=5, 1..=12)) {
        let d: Vec<f64> = d.into_iter().map(f64::from).collect();
        let p = wilcoxon_one_sided(&d).unwrap();
        if d.iter().all(|&x| x == 0.0) {
            prop_assert!(p.is_nan());
        } else {
            prop_assert!((p - signed_rank_oracle(&d)).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_labels_form_a_distribution(k in 2usize..20, t in 0usize..20, eps in 0.0f64..0.99) {
        let t = t % k;
        let y = smooth_labels(k, t, eps).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y[t] - (1.0 - eps)).abs() < 1e-15);
    }

    #[test]
    fn weight_decays_monotonically(lambda in 0.0f64..5.0, total in 1usize..500) {
        prop_assert!((rg_weight(lambda, 0, total) - lambda).abs() < 1e-12);
        prop_assert!(rg_weight(lambda, total, total).abs() < 1e-12);
        for e in 1..=total {
            prop_assert!(rg_weight(lambda, e, total) <= rg_weight(lambda, e - 1, total) + 1e-15);
        }
    }

    #[test]
    fn fractions_over_a_partition_sum_to_one(
        cells in prop::collection::vec(0.0f64..1.0, 64),
        owners in prop::collection::vec(0usize..4, 8),
        rows in 1usize..8,
    ) {
        let n = 8;
        let mut a = Array2::zeros((rows, n));
        for r in 0..rows {
            for k in 0..=r.min(n - 1) {
                a[[r, k]] = cells[(r * n + k) % cells.len()] + 1e-3;
            }
            let s: f64 = a.row(r).sum();
            a.row_mut(r).mapv_inplace(|v| v / s);
        }
        let mut total = 0.0;
        for g in 0..4 {
            let ranges: Vec<TokenRange> = (0..n)
                .filter(|&k| owners[k] == g)
                .map(|k| TokenRange::new(k + 1, k + 1).unwrap())
                .collect();
            total += attention_fraction(a.view(), &ranges, n).unwrap();
        }
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rouge_is_symmetric_and_bounded(a in prop::collection::vec(0u8..6, 1..12), b in prop::collection::vec(0u8..6, 1..12)) {
        let f = rouge_l_f1(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - rouge_l_f1(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rouge_l_f1(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn jaccard_is_symmetric_and_bounded(a in prop::collection::btree_set((0usize..4, 0usize..4), 1..10), b in prop::collection::btree_set((0usize..4, 0usize..4), 1..10)) {
        let a = a.into_iter().map(|(l, h)| HeadId::new(l, h)).collect();
        let b = b.into_iter().map(|(l, h)| HeadId::new(l, h)).collect();
        let j = jaccard(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn eas_equals_naive_triple_loop(
        seeds in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 7..31), 1..8),
        spans in prop::collection::vec((1usize..10, 0usize..3), 3),
        present in prop::collection::vec(any::<bool>(), 3),
    ) {
        let (nl, nh, n, gen) = (2, 3, 14, 4);
        let mut ranges = BTreeMap::new();
        for (i, s) in Stage::ALL.into_iter().enumerate() {
            if present[i] || i == 0 {
                let (start, len) = spans[i];
                ranges.insert(s, vec![TokenRange::new(start, start + len).unwrap()]);
            }
        }
        let caps: Vec<AttentionCapture> = seeds.iter().map(|s| random_capture(s, nl, nh, n, gen)).collect();
        let contribs: Vec<_> = caps.iter().map(|c| instance_contributions(c, &ranges)).collect();
        let eas = aggregate(&contribs, nl, nh, "x");

        for s in Stage::ALL {
            let Some(rs) = ranges.get(&s) else {
                prop_assert!(eas.scores.index_axis(ndarray::Axis(0), s.index()).iter().all(|&v| v == 0.0));
                continue;
            };
            let count: usize = rs.iter().map(|r| r.len()).sum();
            for l in 0..nl {
                for h in 0..nh {
                    let mut sum = 0.0;
                    for c in &caps {
                        let mut hits = 0usize;
                        for r in n - gen..n {
                            let pos = argmax_first(c.data.slice(ndarray::s![l, h, r, ..])) + 1;
                            if rs.iter().any(|x| x.start() <= pos && pos <= x.end()) {
                                hits += 1;
                            }
                        }
                        sum += hits as f64 / count as f64;
                    }
                    prop_assert_eq!(eas.scores[[s.index(), l, h]], sum / caps.len() as f64);
                }
            }
        }

        let mut rev = contribs.clone();
        rev.reverse();
        let eas_rev = aggregate(&rev, nl, nh, "x");
        for (a, b) in eas.scores.iter().zip(eas_rev.scores.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(25))]

    #[test]
    fn captured_rows_are_distributions(ids in prop::collection::vec(0u32..40, 1..40), seed in 0u64..1000) {
        let cfg = ModelConfig { n_layers: 2, n_heads: 4, d_model: 32, d_ff: 64, ..ModelConfig::desk(40) };
        let m = Transformer::<f32>::new(cfg, "h", seed).unwrap();
        let (_, cap) = m.forward(&ids, true).unwrap();
        let cap = cap.unwrap();
        for l in 0..cap.n_layers() {
            for h in 0..cap.n_heads() {
                let a = cap.head(l, h);
                for (i, row) in a.outer_iter().enumerate() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-5);
                    prop_assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
                }
            }
        }
    }
}
