use std::collections::HashSet;

use mimrec::autograd::Tape;
use mimrec::corpus::{AttributeTable, DatasetSplit};
use mimrec::encoder::{
    attention_weights, build_attention_mask, embed_sequence, encode, Direction, ModelConfig, Params, TrainRng,
};
use mimrec::eval::{evaluate, evaluate_ranks, CandidateScope, EvalProtocol, PopularityScorer};
use mimrec::objectives::{pretrain_loss, pretrain_terms, sampled_info_nce, LossWeights, ObjectiveKind, PretrainObjective};
use mimrec::sampler::{
    build_finetune_batch, build_pretrain_batch, mask_count, mask_items, select_segment, PretrainContext, SamplerConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn small_model(max_len: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        blocks: 2,
        max_len,
        n_items: 40,
        n_attrs: 12,
        dropout: 0.0,
        d_ff: 16,
        init_std: 0.3,
    }
}

fn padded(len: usize, n: usize, rng: &mut TrainRng, n_items: usize) -> (Vec<usize>, Vec<bool>) {
    let mut ids = vec![0; n - len];
    ids.extend((0..len).map(|_| rng.random_range(1..=n_items)));
    let valid = ids.iter().map(|&i| i != 0).collect();
    (ids, valid)
}

fn random_attrs(n_items: usize, n_attrs: usize, rng: &mut TrainRng) -> AttributeTable {
    let mut t = AttributeTable::empty(n_items);
    for i in 1..=n_items {
        let mut a: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=n_attrs)).collect();
        a.sort_unstable();
        a.dedup();
        t.attrs[i] = a;
    }
    t
}

fn random_seqs(n: usize, lens: (usize, usize), n_items: usize, rng: &mut TrainRng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(lens.0..=lens.1);
            (0..len).map(|_| rng.random_range(1..=n_items)).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn causal_prefix_ignores_suffix(seed in 0u64..10_000, len in 2usize..=10) {
        let cfg = small_model(10);
        let mut rng = TrainRng::seed_from_u64(seed);
        let params = Params::<f64>::init(&cfg, &mut rng);
        let (ids, valid) = padded(len, 10, &mut rng, cfg.n_items);
        let t = rng.random_range(10 - len + 1..10);
        let mut other = ids.clone();
        for slot in &mut other[t..] {
            *slot = 1 + *slot % cfg.n_items;
        }
        let a = encode(&ids, &valid, Direction::Causal, &params).unwrap();
        let b = encode(&other, &valid, Direction::Causal, &params).unwrap();
        prop_assert_eq!(a.slice(ndarray::s![..t, ..]), b.slice(ndarray::s![..t, ..]));
        let c = encode(&ids, &valid, Direction::Bidirectional, &params).unwrap();
        let d = encode(&other, &valid, Direction::Bidirectional, &params).unwrap();
        prop_assert_ne!(c.slice(ndarray::s![10 - len..t, ..]), d.slice(ndarray::s![10 - len..t, ..]));
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, len in 1usize..=8, causal in any::<bool>()) {
        let cfg = small_model(8);
        let mut rng = TrainRng::seed_from_u64(seed);
        let params = Params::<f64>::init(&cfg, &mut rng);
        let (ids, _) = padded(len, len, &mut rng, cfg.n_items);
        let valid = vec![true; len];
        let dir = if causal { Direction::Causal } else { Direction::Bidirectional };
        let mask = build_attention_mask(&valid, dir);
        let f = embed_sequence(&ids, &params).unwrap();
        for head in attention_weights(&f, &mask, &params, 0).unwrap() {
            for (q, row) in head.rows().into_iter().enumerate() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                for (k, &w) in row.iter().enumerate() {
                    if !mask[[q, k]] {
                        prop_assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_output_shape(seed in 0u64..10_000, len in 1usize..=8) {
        let cfg = small_model(8);
        let mut rng = TrainRng::seed_from_u64(seed);
        let params = Params::<f32>::init(&cfg, &mut rng);
        let (ids, valid) = padded(len, 8, &mut rng, cfg.n_items);
        for dir in [Direction::Causal, Direction::Bidirectional] {
            let h = encode(&ids, &valid, dir, &params).unwrap();
            prop_assert_eq!(h.dim(), (8, cfg.d));
            prop_assert!(h.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mask_count_law(real in 1usize..60, pad in 0usize..10, ratio in 0.01f64..0.99, seed in 0u64..1000) {
        let expected = ((ratio * real as f64).ceil() as usize).max(1);
        prop_assert_eq!(mask_count(real, ratio), expected);
        let mut seq = vec![0; pad];
        seq.extend(1..=real);
        let valid: Vec<bool> = seq.iter().map(|&i| i != 0).collect();
        let mut rng = TrainRng::seed_from_u64(seed);
        let (masked, plan) = mask_items(&seq, &valid, ratio, 999, &mut rng).unwrap();
        prop_assert_eq!(plan.positions.len(), expected);
        prop_assert_eq!(masked.iter().filter(|&&i| i == 999).count(), expected);
        for &p in &plan.positions {
            prop_assert!(valid[p]);
        }
    }

    #[test]
    fn segment_lies_in_real_region(real in 4usize..40, pad in 0usize..6, seg_max in 2usize..10, seed in 0u64..1000) {
        let mut seq = vec![0; pad];
        seq.extend(1..=real);
        let valid: Vec<bool> = seq.iter().map(|&i| i != 0).collect();
        let mut rng = TrainRng::seed_from_u64(seed);
        let plan = select_segment(&seq, &valid, seg_max, &mut rng).unwrap();
        prop_assert!(plan.start >= pad && plan.end < seq.len());
        prop_assert!(plan.len() >= 2 && plan.len() <= (real / 2).min(seg_max).max(2));
        prop_assert_eq!(&plan.segment_items[..], &seq[plan.start..=plan.end]);
    }

    #[test]
    fn negatives_exclude_positives(seed in 0u64..10_000, k in 1usize..4) {
        let mut rng = TrainRng::seed_from_u64(seed);
        let attrs = random_attrs(40, 12, &mut rng);
        let seqs = random_seqs(6, (4, 12), 40, &mut rng);
        let ctx = PretrainContext { attributes: &attrs, n_items: 40, n_attrs: 12, max_len: 10, mask_token: 41 };
        let cfg = SamplerConfig { n_neg_item: k, n_neg_attr: k, n_neg_seg: k, ..Default::default() };
        let batch = build_pretrain_batch(&seqs, &ctx, &cfg, &mut rng).unwrap();
        for s in &batch.mip {
            prop_assert_eq!(s.negatives.len(), k);
            prop_assert!(!s.negatives.contains(&s.positive));
            prop_assert_eq!(s.negatives.iter().collect::<HashSet<_>>().len(), k);
        }
        for s in batch.aap.iter() {
            let own = attrs.of(batch.aap_items[s.row]);
            prop_assert!(s.negatives.iter().all(|n| !own.contains(n)));
        }
        for s in batch.map.iter() {
            let own = attrs.of(s.positive).len();
            prop_assert!(own == 0 || !s.negatives.contains(&s.positive));
        }
        for plan in batch.segment_plans.iter().flatten() {
            for neg in &plan.negative_segments {
                prop_assert_eq!(neg.len(), plan.len());
            }
        }
        let fb = build_finetune_batch(&seqs, 40, 10, &mut rng).unwrap();
        for &(row, pos, neg) in &fb.targets {
            prop_assert!(fb.input.validity[row]);
            prop_assert_ne!(pos, neg);
        }
    }

    #[test]
    fn batches_depend_only_on_seed(seed in 0u64..10_000) {
        let mut rng = TrainRng::seed_from_u64(seed);
        let attrs = random_attrs(40, 12, &mut rng);
        let seqs = random_seqs(5, (4, 12), 40, &mut rng);
        let ctx = PretrainContext { attributes: &attrs, n_items: 40, n_attrs: 12, max_len: 10, mask_token: 41 };
        let cfg = SamplerConfig::default();
        let a = build_pretrain_batch(&seqs, &ctx, &cfg, &mut TrainRng::seed_from_u64(seed ^ 1)).unwrap();
        let b = build_pretrain_batch(&seqs, &ctx, &cfg, &mut TrainRng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn info_nce_is_nonnegative_and_monotone(pos in -20.0f64..20.0, negs in prop::collection::vec(-20.0f64..20.0, 1..6), delta in 0.01f64..5.0) {
        let l = sampled_info_nce(pos, &negs);
        prop_assert!(l >= 0.0);
        prop_assert!(sampled_info_nce(pos + delta, &negs) <= l);
        let mut harder = negs.clone();
        harder[0] += delta;
        prop_assert!(sampled_info_nce(pos, &harder) >= l);
    }

    #[test]
    fn contrastive_terms_are_nonnegative(seed in 0u64..2000, raw in any::<bool>()) {
        let cfg = small_model(10);
        let mut rng = TrainRng::seed_from_u64(seed);
        let params = Params::<f64>::init(&cfg, &mut rng);
        let attrs = random_attrs(cfg.n_items, cfg.n_attrs, &mut rng);
        let seqs = random_seqs(6, (4, 10), cfg.n_items, &mut rng);
        let ctx = PretrainContext { attributes: &attrs, n_items: cfg.n_items, n_attrs: cfg.n_attrs, max_len: 10, mask_token: cfg.mask_token() };
        let batch = build_pretrain_batch(&seqs, &ctx, &SamplerConfig::default(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = params.register(&mut tape);
        let objective = PretrainObjective { raw_bilinear: raw, ..Default::default() };
        for (_, term) in pretrain_terms(&mut tape, &pv, &cfg, &batch, &objective, None).unwrap() {
            prop_assert!(tape.value(term.terms).iter().all(|&v| v >= 0.0));
        }
    }
}

/// Dropping an objective through a zero weight must give exactly the
/// gradients of the remaining weighted terms.
#[test]
fn zero_weight_matches_omitted_term() {
    let cfg = small_model(10);
    for seed in 0..5 {
        let mut rng = TrainRng::seed_from_u64(seed);
        let params = Params::<f64>::init(&cfg, &mut rng);
        let attrs = random_attrs(cfg.n_items, cfg.n_attrs, &mut rng);
        let seqs = random_seqs(6, (6, 10), cfg.n_items, &mut rng);
        let ctx = PretrainContext {
            attributes: &attrs,
            n_items: cfg.n_items,
            n_attrs: cfg.n_attrs,
            max_len: 10,
            mask_token: cfg.mask_token(),
        };
        let batch = build_pretrain_batch(&seqs, &ctx, &SamplerConfig::default(), &mut rng).unwrap();
        let full = LossWeights::default();
        for dropped in [ObjectiveKind::Aap, ObjectiveKind::Mip, ObjectiveKind::Map, ObjectiveKind::Sp] {
            let weight = |k: ObjectiveKind| match k {
                ObjectiveKind::Aap => full.aap,
                ObjectiveKind::Mip => full.mip,
                ObjectiveKind::Map => full.map,
                ObjectiveKind::Sp => full.sp,
            };
            let mut zeroed = full.clone();
            match dropped {
                ObjectiveKind::Aap => zeroed.aap = 0.0,
                ObjectiveKind::Mip => zeroed.mip = 0.0,
                ObjectiveKind::Map => zeroed.map = 0.0,
                ObjectiveKind::Sp => zeroed.sp = 0.0,
            }

            let mut tape = Tape::new();
            let pv = params.register(&mut tape);
            let objective = PretrainObjective {
                weights: zeroed,
                raw_bilinear: false,
            };
            let (loss, report) = pretrain_loss(&mut tape, &pv, &cfg, &batch, &objective, None).unwrap();
            let got = tape.backward(loss);
            let absent = match dropped {
                ObjectiveKind::Aap => report.aap,
                ObjectiveKind::Mip => report.mip,
                ObjectiveKind::Map => report.map,
                ObjectiveKind::Sp => report.sp,
            };
            assert!(absent.is_none());

            let mut tape2 = Tape::new();
            let pv2 = params.register(&mut tape2);
            let all = PretrainObjective::default();
            let terms = pretrain_terms(&mut tape2, &pv2, &cfg, &batch, &all, None).unwrap();
            let mut total = None;
            for (kind, t) in terms {
                if kind == dropped {
                    continue;
                }
                let scaled = tape2.scale(t.mean, weight(kind));
                total = Some(match total {
                    Some(acc) => tape2.add(acc, scaled),
                    None => scaled,
                });
            }
            let total = total.unwrap();
            let want = tape2.backward(total);
            for id in 0..pv.0.len() {
                let (a, b) = (got.get(pv.get(id)), want.get(pv2.get(id)));
                match (a, b) {
                    (Some(a), Some(b)) => {
                        let diff = (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        assert!(diff < 1e-12, "seed {seed} {dropped:?} tensor {id}: {diff}");
                    }
                    (None, None) => {}
                    (a, b) => {
                        // one side may carry an all-zero gradient for an unused tensor
                        let z = a.or(b).unwrap();
                        assert!(z.iter().all(|v| *v == 0.0), "seed {seed} {dropped:?} tensor {id}");
                    }
                }
            }
        }
    }
}

fn toy_split(seed: u64) -> DatasetSplit {
    let mut rng = TrainRng::seed_from_u64(seed);
    let n_users = 30;
    let train = random_seqs(n_users, (3, 10), 150, &mut rng);
    DatasetSplit {
        users: (0..n_users).collect(),
        valid_target: (0..n_users).map(|_| rng.random_range(1..=150)).collect(),
        test_target: (0..n_users).map(|_| rng.random_range(1..=150)).collect(),
        train,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn evaluation_is_reproducible_and_bounded(seed in 0u64..1000, eval_seed in 0u64..1000) {
        let split = toy_split(seed);
        let scorer = PopularityScorer::fit(&split, 150);
        let protocol = EvalProtocol { seed: eval_seed, ..Default::default() };
        let a = evaluate(&scorer, &split, 150, &protocol).unwrap();
        let b = evaluate(&scorer, &split, 150, &protocol).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.mrr >= 1.0 / 100.0 - 1e-12 && a.mrr <= 1.0);
        prop_assert!(a.hr_at(1) <= a.hr_at(5) && a.hr_at(5) <= a.hr_at(10));
        prop_assert!(a.ndcg_at(10) <= a.hr_at(10) + 1e-12);
        let ranks = evaluate_ranks(&scorer, &split, 150, &protocol).unwrap();
        prop_assert!(ranks.iter().all(|&r| (1..=100).contains(&r)));
        let full = EvalProtocol { scope: CandidateScope::Full, ..protocol };
        let full_ranks = evaluate_ranks(&scorer, &split, 150, &full).unwrap();
        for (s, f) in ranks.iter().zip(&full_ranks) {
            prop_assert!(s <= f);
        }
    }
}
