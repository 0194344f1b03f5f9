//! Property tests for the invariants that hold across modules.

use proptest::prelude::*;
use reorder_nat::align::{build_pseudo_translation, ibm1_em_train, viterbi_align};
use reorder_nat::blocks::uniform_copy_indices;
use reorder_nat::data::{gen_synthetic, read_lines, write_lines, ReorderRule, SyntheticTaskSpec, TokenMap};
use reorder_nat::eval::{corpus_bleu, dup_ratio, mis_ratio, ribes};
use reorder_nat::model::{guidance_from_scores, restricted_vocab};
use reorder_nat::numcore::{argmax, Tensor};
use reorder_nat::train::{lr_schedule, smoothed_target, smoothing_floor, LrSchedule};

fn sentence(max_type: usize, max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(5..max_type, 1..=max_len)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn rule() -> impl Strategy<Value = ReorderRule> {
    prop_oneof![
        Just(ReorderRule::Identity),
        Just(ReorderRule::Reverse),
        (0usize..5).prop_map(ReorderRule::Rotate),
        Just(ReorderRule::SwapHalves),
        Just(ReorderRule::RuleBased),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(t in matrix(3, 7), shift in -50.0f64..50.0, temp in 0.05f64..5.0) {
        let p = t.softmax_rows(temp).unwrap();
        let shifted = Tensor::matrix(3, 7, t.data().iter().map(|x| x + shift).collect()).unwrap();
        let q = shifted.softmax_rows(temp).unwrap();
        for i in 0..3 {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(i).iter().all(|&x| x >= 0.0));
            for (a, b) in p.row(i).iter().zip(q.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_keeps_the_argmax(src in sentence(30, 8), temp in 1e-3f64..10.0, seed in 0u64..1000) {
        let vr = restricted_vocab(&src);
        let n = vr.len();
        // distinct scores so the argmax is unique
        let data: Vec<f64> = (0..4 * n).map(|k| ((k as u64 * 7919 + seed * 104729) % 1009) as f64 / 37.0 + k as f64 * 1e-6).collect();
        let scores = Tensor::matrix(4, n, data).unwrap();
        let g = guidance_from_scores(&scores, temp, vr).unwrap();
        for i in 0..4 {
            prop_assert_eq!(argmax(g.q.row(i)), argmax(scores.row(i)));
        }
    }

    #[test]
    fn restricted_vocab_is_source_types_then_null(src in sentence(20, 12)) {
        let vr = restricted_vocab(&src);
        prop_assert_eq!(*vr.last().unwrap(), 4);
        for t in &vr[..vr.len() - 1] {
            prop_assert!(src.contains(t));
        }
        for t in &src {
            prop_assert!(vr.contains(t));
        }
    }

    #[test]
    fn uniform_copy_is_monotone_and_covers_a_prefix(n in 1usize..30, m in 1usize..30) {
        let idx = uniform_copy_indices(n, m);
        prop_assert_eq!(idx.len(), m);
        prop_assert_eq!(idx[0], 0);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        if m >= n {
            // stretching reaches every source row
            let mut seen = idx.clone();
            seen.dedup();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(pairs in prop::collection::vec((sentence(12, 9), sentence(12, 9)), 1..8), rot in 0usize..8) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let k = rot % h.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = corpus_bleu(&h, &r).unwrap();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a));
    }

    #[test]
    fn ribes_of_a_sentence_against_itself_is_100(h in sentence(40, 12)) {
        prop_assume!(h.iter().any(|&t| t != h[0]));
        prop_assert!((ribes(&[h.clone()], &[h]).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn dup_and_mis_are_ratios(pairs in prop::collection::vec((sentence(8, 9), sentence(8, 9)), 1..6)) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let d = dup_ratio(&h).unwrap();
        let m = mis_ratio(&h, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(mis_ratio(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_targets_sum_to_one_and_bound_the_loss(v in 2usize..50, gold in 0usize..50, eps in 0.0f64..0.9) {
        let gold = gold % v;
        let q = smoothed_target(gold, v, eps);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let floor = smoothing_floor(v, eps);
        // cross-entropy of q against any other distribution is at least H(q)
        let other: Vec<f64> = (0..v).map(|k| if k == (gold + 1) % v { 0.5 } else { 0.5 / (v - 1) as f64 }).collect();
        let ce: f64 = q.iter().zip(&other).map(|(a, b)| -a * b.ln()).sum();
        prop_assert!(ce >= floor - 1e-12);
    }

    #[test]
    fn warmup_branches_meet_at_the_peak(warmup in 1u64..10_000, dim in 1usize..1024) {
        let s = LrSchedule::Warmup { warmup_steps: warmup, model_dim: dim, scale: 1.0 };
        let peak = lr_schedule(warmup, &s).unwrap();
        let rising = (dim as f64).powf(-0.5) * warmup as f64 * (warmup as f64).powf(-1.5);
        let falling = (dim as f64).powf(-0.5) * (warmup as f64).powf(-0.5);
        prop_assert!((peak - rising).abs() <= 1e-15 * peak.max(1.0));
        prop_assert!((peak - falling).abs() <= 1e-15 * peak.max(1.0));
    }

    #[test]
    fn gold_pseudo_translations_are_sound(r in rule(), seed in 0u64..500, min_len in 1usize..6, extra in 0usize..6) {
        let spec = SyntheticTaskSpec {
            vocab_size: 20,
            min_len,
            max_len: min_len + extra,
            pairs: 40,
            rule: r,
            token_map: TokenMap::Permuted,
            seed,
            ..Default::default()
        };
        let syn = gen_synthetic(&spec).unwrap();
        let pseudo = syn.text.pseudo.as_ref().unwrap();
        let links = syn.text.links.as_ref().unwrap();
        for (k, ((x, y), z)) in syn.text.source.iter().zip(&syn.text.target).zip(pseudo).enumerate() {
            prop_assert_eq!(z.len(), y.len());
            let mapped: Vec<String> = z.iter().map(|t| syn.translate_word(t, syn.modes[k]).unwrap()).collect();
            prop_assert_eq!(&mapped, y);
            for t in z {
                prop_assert!(x.contains(t));
            }
            let ids: Vec<usize> = x.iter().map(|t| reorder_nat::data::synthetic::source_type(t).unwrap() + 5).collect();
            let built = build_pseudo_translation(&ids, &links[k]).unwrap();
            let want: Vec<usize> = z.iter().map(|t| reorder_nat::data::synthetic::source_type(t).unwrap() + 5).collect();
            prop_assert_eq!(built, want);
        }
    }

    #[test]
    fn em_likelihood_never_decreases(pairs in prop::collection::vec((sentence(12, 6), sentence(12, 6)), 1..12)) {
        let trace = ibm1_em_train(&pairs, 6).unwrap();
        for w in trace.log_likelihood.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", trace.log_likelihood);
        }
        let again = ibm1_em_train(&pairs, 6).unwrap();
        prop_assert_eq!(trace.table.sorted_entries(), again.table.sorted_entries());
        for (x, y) in &pairs {
            let z = build_pseudo_translation(x, &viterbi_align(x, y, &trace.table)).unwrap();
            prop_assert_eq!(z.len(), y.len());
            prop_assert!(z.iter().all(|t| *t == 4 || x.contains(t)));
        }
    }

    #[test]
    fn corpus_files_round_trip(lines in prop::collection::vec(prop::collection::vec("[a-z0-9<>/]{1,6}", 1..8), 1..10)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_lines(&p, &lines).unwrap();
        prop_assert_eq!(read_lines(&p).unwrap(), lines);
    }
}
